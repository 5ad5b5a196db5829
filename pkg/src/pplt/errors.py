"""Exception hierarchy shared by every stage of the pipeline."""


class PpltError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(PpltError, ValueError):
    """A configuration value or rule table is unusable."""


class InputError(PpltError, ValueError):
    """An input array, file or argument violates a precondition."""


class ConsistencyError(PpltError, ValueError):
    """Inputs are individually valid but mutually inconsistent."""


class OsmParseError(PpltError, ValueError):
    """Malformed OSM XML. ``offset`` is the byte offset of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ValidationError(PpltError, ValueError):
    """A parsed document violates a structural invariant."""


class MissingClassError(PpltError, KeyError):
    """An embedding table has no vector for a class present in a raster."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DegenerateInputError(PpltError, ValueError):
    """A volume carries no usable (finite, non-sentinel) entries."""


class NumericalError(PpltError, ArithmeticError):
    """A non-finite intermediate was produced. ``stage`` names where."""

    def __init__(self, stage, message=""):
        super().__init__(f"non-finite values in stage '{stage}'" + (f": {message}" if message else ""))
        self.stage = stage


class TrainingError(PpltError, RuntimeError):
    """Training diverged. ``epoch`` is the epoch at which it happened."""

    def __init__(self, epoch, message=""):
        super().__init__(f"training diverged at epoch {epoch}" + (f": {message}" if message else ""))
        self.epoch = epoch


class GenerationError(PpltError, ValueError):
    """A synthetic scene cannot be generated with the requested density."""
