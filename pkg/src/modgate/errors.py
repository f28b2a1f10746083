"""Exception types shared across the package."""


class ModgateError(Exception):
    """Base class for all modgate errors."""


# catalog
class InvalidSpec(ModgateError):
    pass


class FormatError(ModgateError):
    """File decodes but is not an accepted raster format."""


class DecodeError(ModgateError):
    """File is missing, truncated, or not decodable at all."""


class IllegalTransition(ModgateError):
    """Image state machine rejected the requested edge."""


# signature / index
class InsufficientReference(ModgateError):
    pass


class DimensionError(ModgateError):
    pass


class EmptyIndex(ModgateError):
    pass


# synthgen
class EmptyLogo(ModgateError):
    """Logo raster has no pixel with alpha > 0."""


class LogoTooLarge(ModgateError):
    pass


class OutOfBounds(ModgateError):
    pass


class SplitExhausted(ModgateError):
    """No Train-split non-compliant logo available for a requested class."""


class TooFewBoxes(ModgateError):
    pass


# detectors
class DegenerateTemplate(ModgateError):
    """Template has no pixel variance under its alpha weights."""


class TemplateTooLarge(ModgateError):
    pass


class DegenerateTraining(ModgateError):
    """Training data contains a single class."""


class NotFitted(ModgateError):
    pass


class InsufficientData(ModgateError):
    pass


class InvalidConfig(ModgateError):
    pass


# pipeline / review
class ConfigError(ModgateError):
    """Invalid run configuration; carries every violation found."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DuplicateDecision(ModgateError):
    pass


class NotFound(ModgateError):
    pass


class UndefinedMetric(ModgateError):
    """Metric has no defined value on this input (e.g. ROI of zero tasks)."""


class DegenerateRoc(ModgateError):
    """ROC needs both truth classes present."""
