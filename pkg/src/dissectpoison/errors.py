"""Exception hierarchy. The CLI maps these onto exit codes."""


class DissectPoisonError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DissectPoisonError, ValueError):
    """Bad shapes, unknown layers, invalid settings (CLI exit code 2)."""


class InvalidArgumentError(DissectPoisonError, ValueError):
    """A call received arguments that do not fit together."""


class IntegrityError(DissectPoisonError):
    """A stored bundle is inconsistent with its manifest (CLI exit code 3)."""


class MissingTensorError(IntegrityError):
    """A manifest references a tensor that is not in the bundle."""


class UnknownLayerKindError(IntegrityError):
    """``model.json`` names a layer kind outside the supported vocabulary."""


class ShapeMismatchError(IntegrityError):
    """Stored tensor shape disagrees with what the architecture requires."""


class EmptyPoisonSetError(DissectPoisonError, ValueError):
    """No probing image carries the source concept."""


class EmptyConceptMaskError(DissectPoisonError, ValueError):
    """An average concept activation was requested over an empty mask."""


class NoBaselineConceptError(DissectPoisonError, ValueError):
    """The neuron had no interpretable concept in the uncorrupted run."""
