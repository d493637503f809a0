"""Desk-scale speech translation toolkit: CTC compression, Siamese OT pretraining,
distilled ST fine-tuning, corpus filtering and length-constrained segmentation."""

from .errors import (
    CalibrationInfeasibleError,
    CheckpointError,
    ConfigurationError,
    DataError,
    DimensionError,
    InfeasibleAlignmentError,
    NumericalError,
    SequenceTooShortError,
    SiamstError,
    TrainingDivergenceError,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "CalibrationInfeasibleError",
    "CheckpointError",
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "InfeasibleAlignmentError",
    "NumericalError",
    "SequenceTooShortError",
    "SiamstError",
    "TrainingDivergenceError",
]
