"""Exception types raised by the exchange engine."""


class DimensionError(ValueError):
    """Vector lengths do not match the market's product count."""


class FeasibilityError(ValueError):
    """A package violates a prosumer's technical constraints."""


class DegenerateProductError(ValueError):
    """No prosumer can trade a product, so relative imbalance is undefined."""


class ModelDefinitionError(ValueError):
    """A prosumer model is ill-posed (e.g. unbounded preferred trade)."""


class EnumerationBudgetError(RuntimeError):
    """A requested grid enumeration exceeds the point budget."""


class OracleBudgetError(RuntimeError):
    """A brute-force oracle exceeds its enumeration budget."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, last_finite_epoch: int = -1):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch


class ConfigError(ValueError):
    """Invalid run or experiment configuration."""
