"""Exception hierarchy shared across the toolkit."""


class MTCTLError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(MTCTLError, ValueError):
    pass


class ContractError(MTCTLError, ValueError):
    """A caller violated an operation's precondition."""


class ConstantVolumeError(MTCTLError, ValueError):
    pass


class EmptyDatasetError(MTCTLError, ValueError):
    pass


class FormatError(MTCTLError, ValueError):
    pass


class MetadataError(MTCTLError, ValueError):
    pass


class DegenerateMaskError(MTCTLError, ValueError):
    """Mask is all background or all foreground, so no opposite class exists."""


class EmptyMaskError(MTCTLError, ValueError):
    pass


class NumericsError(MTCTLError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class UselessSamplingError(MTCTLError, ValueError):
    """MC sampling requested from a model without dropout."""


class CheckpointError(MTCTLError, IOError):
    pass


class ConfigError(MTCTLError, ValueError):
    pass
