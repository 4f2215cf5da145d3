"""Inference-time machinery: conditional execution, quantization, evaluation."""
