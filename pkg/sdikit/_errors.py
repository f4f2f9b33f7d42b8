# Exception types raised by sdikit.
# Configuration/input problems subclass ValueError so plain `except ValueError` still works.


class SketchConfigError(ValueError):
    """Sketch dimension, hash domain, or plan/gradient layout is inconsistent."""


class PlanMismatchError(ValueError):
    """Features built from different plans, modes, or checkpoint lists were combined."""


class ModelInputError(ValueError):
    """Tokens, readout step, or trace do not fit the model configuration."""


class FormatError(ValueError):
    """A checkpoint or feature-cache file is malformed."""


class ConservationError(ArithmeticError):
    """Step-decomposed scores do not sum to their TracIn total."""


class TrainingDivergedError(RuntimeError):
    """The training loss became NaN or infinite."""
