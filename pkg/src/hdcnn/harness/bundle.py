"""Model bundle directories: block spec, hierarchy, one checkpoint per component, manifest."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from hdcnn.engine.checkpoint import network_from_arrays, save_tensors, load_tensors
from hdcnn.engine.network import Network, NetworkSpec
from hdcnn.errors import FormatError
from hdcnn.hierarchy import Hierarchy
from hdcnn.model import FineComponent, HdcnnModel
from hdcnn.runtime.pq import PqDescriptor, load_quantized, save_quantized

MANIFEST = "manifest.txt"
HEADER = "hdcnn-bundle 1"


def _save_component(directory: Path, name: str, net: Network, offset: int) -> list[str]:
    """Dense tensors to ``<name>.hdw``; quantized layers to ``<name>.L<i>.hdq``."""
    lines = []
    for i, p in enumerate(net.params):
        if "Wq" in p:
            fname = f"{name}.L{offset + i}.hdq"
            save_quantized(directory / fname, p["Wq"])
            lines.append(f"quantized {name} L{offset + i} {fname}")
    save_tensors(directory / f"{name}.hdw", net.param_arrays())
    return lines


def save_bundle(directory, model: HdcnnModel, descriptors=(), notes: dict[str, str] | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "block.spec").write_text(model.block_spec.to_text())
    model.hierarchy.save(directory / "hierarchy.txt")
    lines = [HEADER, f"split_index {model.split_index}", f"num_coarse {model.num_coarse}",
             "aggregation overlapping l1", "block_spec block.spec", "hierarchy hierarchy.txt",
             "shared shared.hdw", "coarse coarse.hdw"]
    lines += [f"fine {c.k} fine{c.k}.hdw" for c in model.fine]
    extra = _save_component(directory, "shared", model.shared, 0)
    extra += _save_component(directory, "coarse", model.coarse, model.split_index)
    for c in model.fine:
        extra += _save_component(directory, f"fine{c.k}", c.net, model.split_index)
    lines += [d.to_text() for d in descriptors]
    lines += extra
    for key, value in (notes or {}).items():
        lines.append(f"note {key} {value}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def _load_component(directory: Path, name: str, spec: NetworkSpec, offset: int, quantized: dict) -> Network:
    q = {int(layer[1:]) - offset: load_quantized(directory / fname)
         for (comp, layer), fname in quantized.items() if comp == name}
    return network_from_arrays(spec, load_tensors(directory / f"{name}.hdw"), q)


def read_manifest(directory) -> dict:
    directory = Path(directory)
    text = (directory / MANIFEST).read_text()
    lines = text.splitlines()
    if not lines or lines[0] != HEADER:
        raise FormatError(f"{directory / MANIFEST}: missing '{HEADER}' header", 0)
    info = {"fine": {}, "pq": [], "quantized": {}, "notes": {}}
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key == "fine":
            info["fine"][int(parts[1])] = parts[2]
        elif key == "pq":
            info["pq"].append(PqDescriptor.from_text(line))
        elif key == "quantized":
            info["quantized"][(parts[1], parts[2])] = parts[3]
        elif key == "note":
            info["notes"][parts[1]] = " ".join(parts[2:])
        elif len(parts) >= 2:
            info[key] = " ".join(parts[1:])
        else:
            raise FormatError(f"{MANIFEST} line {lineno}: malformed entry {line!r}")
    return info


def load_bundle(directory) -> HdcnnModel:
    directory = Path(directory)
    info = read_manifest(directory)
    split = int(info["split_index"])
    block_spec = NetworkSpec.from_text((directory / info["block_spec"]).read_text())
    hierarchy = Hierarchy.load(directory / info["hierarchy"])
    shapes = block_spec.shapes()
    shared_spec = NetworkSpec(block_spec.input_shape, block_spec.layers[:split], 0)
    rear_spec = NetworkSpec(shapes[split], block_spec.layers[split:], 0)
    q = info["quantized"]
    shared = _load_component(directory, "shared", shared_spec, 0, q)
    coarse = _load_component(directory, "coarse", rear_spec, split, q)
    fine = []
    for k, ps in enumerate(hierarchy.partial_sets):
        spec = rear_spec.with_classifier_width(len(ps))
        fine.append(FineComponent(k, np.asarray(ps), _load_component(directory, f"fine{k}", spec, split, q)))
    return HdcnnModel(block_spec, split, shared, coarse, fine, hierarchy)


def save_block(directory, net: Network) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "block.spec").write_text(net.spec.to_text())
    save_tensors(directory / "block.hdw", net.param_arrays())


def load_block(directory) -> Network:
    directory = Path(directory)
    spec = NetworkSpec.from_text((directory / "block.spec").read_text())
    return network_from_arrays(spec, load_tensors(directory / "block.hdw"))
