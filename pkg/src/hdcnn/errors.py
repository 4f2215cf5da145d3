"""Exception hierarchy shared by all subpackages."""


class HdcnnError(Exception):
    pass


class InvalidInputError(HdcnnError, ValueError):
    """Arguments violate a documented precondition (shape, range, symmetry)."""


class StateError(HdcnnError, RuntimeError):
    """An operation was called out of order, e.g. backward without forward."""


class TrainingDivergedError(HdcnnError, RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class FormatError(HdcnnError, ValueError):
    """A binary or text artifact failed to parse."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} at byte offset {offset}")
        self.offset = offset


class StageError(HdcnnError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
