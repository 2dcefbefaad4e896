"""Exception hierarchy shared by the I/O, training and CLI layers."""


class DataError(Exception):
    """Bad or inconsistent input data.  ``code`` is a stable machine-readable tag."""

    code = "data_error"


class FeatureFormatError(DataError):
    code = "feature_format"


class BadMagic(FeatureFormatError):
    code = "bad_magic"


class UnsupportedVersion(FeatureFormatError):
    code = "unsupported_version"


class TruncatedPayload(FeatureFormatError):
    code = "truncated_payload"


class DimensionOverflow(FeatureFormatError):
    code = "dimension_overflow"


class CheckpointError(DataError):
    code = "checkpoint"


class MissingTensor(CheckpointError):
    code = "missing_tensor"

    def __init__(self, name: str):
        super().__init__(name)
        self.name = name


class UnknownTensor(CheckpointError):
    code = "unknown_tensor"

    def __init__(self, name: str):
        super().__init__(name)
        self.name = name


class ShapeMismatch(CheckpointError):
    code = "shape_mismatch"


class DegenerateWeights(ArithmeticError):
    """The significance weights of an image sum to zero."""
