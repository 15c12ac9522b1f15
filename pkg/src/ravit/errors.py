"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shape or dimension mismatch."""


class NonFiniteError(FloatingPointError):
    """A tensor operation produced NaN or Inf."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataFormatError(ValueError):
    """Malformed dataset or checkpoint file."""


class DivergenceError(RuntimeError):
    """Training produced non-finite values."""
