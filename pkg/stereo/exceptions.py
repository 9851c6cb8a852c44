"""Error hierarchy for the stereo engine."""


class StereoError(Exception):
    """Base class for every error raised by the engine."""


class ConfigurationError(StereoError, ValueError):
    """Shape mismatch, invalid config or misaligned inputs."""


class NumericError(StereoError, ArithmeticError):
    """A kernel produced or received a non-finite value."""


class TrainingDiverged(NumericError):
    def __init__(self, step, last_loss=None):
        self.step = step
        self.last_loss = last_loss
        detail = '' if last_loss is None else f' (last finite loss {last_loss:.6g})'
        super().__init__(f'non-finite loss at step {step}{detail}')


class EmptyMaskError(StereoError, ValueError):
    """No valid pixel to average over."""


class FormatError(StereoError, ValueError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f'byte {offset}')
        if where:
            message = f'{message} ({", ".join(where)})'
        super().__init__(message)


class UnsupportedFormatError(FormatError):
    """Well-formed file in a variant the engine does not handle."""


class CheckpointError(FormatError):
    pass


class CheckpointMismatch(CheckpointError):
    """Checkpoint tensors do not line up with the model."""
