"""Exception types shared across the package."""


class PdafError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PdafError, ValueError):
    pass


class ContractError(PdafError, ValueError):
    pass


class ConfigError(PdafError, ValueError):
    pass


class ParseError(PdafError, ValueError):
    """Malformed file contents. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(PdafError, ValueError):
    pass


class TrainingAborted(PdafError, RuntimeError):
    pass
