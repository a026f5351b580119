"""Exception types shared across the package."""


class MaskMlpError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MaskMlpError):
    """Array dimensions do not line up."""


class ContractError(MaskMlpError):
    """A caller violated an API precondition (stale cache, mismatched folds, ...)."""


class NumericError(MaskMlpError):
    """A numeric guard tripped (zero norm, non-finite input)."""


class TrainingError(MaskMlpError):
    """Training diverged or received non-finite gradients."""


class SchemaError(MaskMlpError):
    """Dataset columns do not match the declared schema."""


class ParseError(MaskMlpError):
    """A CSV cell could not be parsed."""


class IntegrityError(MaskMlpError):
    """Dataset invariants are violated (duplicate ids, bad flags)."""


class ConfigError(MaskMlpError):
    """Invalid run or generator configuration."""


class DerivationError(MaskMlpError):
    """Label derivation is impossible (e.g. no eligible control rows)."""


class StateError(MaskMlpError):
    """An object is used before it was fitted."""


class DegenerateTestError(MaskMlpError):
    """A statistical test is undefined for the given inputs."""
