"""Exception hierarchy shared by every module."""


class ConceptMasterError(Exception):
    """Base class for all package errors."""


class ValidationError(ConceptMasterError, ValueError):
    """Invalid user input; the CLI maps these to exit code 1."""


class DimensionError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class MaskError(ValidationError):
    pass


class RangeError(ValidationError):
    pass


class EmptyListError(ValidationError):
    pass


class EmptyError(ValidationError):
    pass


class TooManyConceptsError(ValidationError):
    pass


class TooFewFramesError(ValidationError):
    pass


class AlignmentError(ValidationError):
    pass


class EmptyDatasetError(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class SchemaError(ValidationError):
    def __init__(self, keys, message=None):
        self.keys = list(keys)
        super().__init__(f"{message or 'invalid config keys'}: {', '.join(self.keys)}")


class BackendError(ConceptMasterError):
    """A model backend failed. ``context`` names the concept index or stage."""

    def __init__(self, message, context=None):
        self.context = context
        if context is not None:
            message = f"[{context}] {message}"
        super().__init__(message)


class NonFiniteLossError(ConceptMasterError, FloatingPointError):
    pass


class NonFiniteStateError(ConceptMasterError, FloatingPointError):
    pass


class NoRegionsError(ConceptMasterError):
    pass


class CheckpointError(ConceptMasterError):
    pass


class MissingArtifactError(ConceptMasterError):
    pass
