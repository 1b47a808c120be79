"""Exception taxonomy. Every deliberate fault raises one of these."""


class BlockSwapError(Exception):
    """Base class for all package errors."""


class EngineError(BlockSwapError):
    """Shape mismatch, invalid op arguments, or graph misuse."""


class ConfigError(BlockSwapError):
    """Malformed block/network configuration."""


class BudgetError(BlockSwapError):
    """Parameter budget infeasible or too tight to sample."""


class DataError(BlockSwapError):
    """Corrupt or inconsistent dataset bytes/arrays."""


class TrainingDiverged(BlockSwapError):
    """Loss became non-finite during training; carries history so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


class CheckpointError(BlockSwapError):
    """Unreadable or inconsistent checkpoint file."""
