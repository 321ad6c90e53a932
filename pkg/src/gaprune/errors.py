"""Exception hierarchy shared by all gaprune modules."""


class GapruneError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(GapruneError, ValueError):
    pass


class NumericError(GapruneError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, batch_index: int, loss: float):
        super().__init__(f"training diverged at batch {batch_index} (loss={loss})")
        self.batch_index = batch_index
        self.loss = loss


class CorruptFileError(GapruneError, ValueError):
    pass


class ConfigError(GapruneError, ValueError):
    pass


class SurgeryError(GapruneError, ValueError):
    pass
