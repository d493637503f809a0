"""Exception hierarchy shared by all modules."""


class SiamstError(Exception):
    """Base class for toolkit errors."""


class ConfigurationError(SiamstError, ValueError):
    """Invalid hyperparameter or config file content."""


class DimensionError(SiamstError, ValueError):
    """Operand shapes are incompatible."""


class SequenceTooShortError(SiamstError, ValueError):
    """A sequence is shorter than an operator's receptive field."""


class TrainingDivergenceError(SiamstError, FloatingPointError):
    """Non-finite loss or gradient during optimization."""


class NumericalError(SiamstError, FloatingPointError):
    """A computation produced NaN or infinity."""


class InfeasibleAlignmentError(SiamstError, ValueError):
    """CTC target cannot be aligned to the given number of frames."""


class DataError(SiamstError, ValueError):
    """Malformed or out-of-range input data."""


class CalibrationInfeasibleError(SiamstError, ValueError):
    """No WER threshold achieves the requested corpus WER."""


class CheckpointError(SiamstError, ValueError):
    """Checkpoint file is malformed or incompatible with a model."""
