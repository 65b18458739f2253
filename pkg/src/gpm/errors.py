"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inconsistent shapes, specs, or incompatible component combinations."""


class ValidationError(ConfigurationError):
    """An experiment config failed validation; lists the offending keys."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


class NumericError(ArithmeticError):
    """Non-finite values where finiteness is a precondition."""


class DomainError(ValueError):
    """An argument is outside its mathematical domain (e.g. sigma = 0)."""


class GraphError(RuntimeError):
    """A differentiated computation used something the tape cannot handle."""


class DivergenceError(RuntimeError):
    """Particles or losses became non-finite mid-run; carries the step index."""

    def __init__(self, step, what="particles"):
        self.step = step
        super().__init__(f"{what} became non-finite at step {step}")
