"""Exception hierarchy for DRRNet."""


class DRRNetError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(DRRNetError, ValueError):
    """Configuration file or override could not be turned into a valid config."""


class MissingWeights(DRRNetError, FileNotFoundError):
    """Backbone weights path is set but cannot be read."""


class ShapeMismatch(DRRNetError, ValueError):
    """Tensors or weight arrays do not have the expected shapes."""


class InvalidResolution(DRRNetError, ValueError):
    """Input height or width is not divisible by the deepest stride."""


class ResolutionMismatch(DRRNetError, ValueError):
    """Two feature maps that must line up spatially do not."""


class ChannelIndivisible(DRRNetError, ValueError):
    """Channel count cannot be split into the required groups."""


class IncompletePyramid(DRRNetError, ValueError):
    """A feature pyramid is missing one of its four levels."""


class NonFiniteInput(DRRNetError, ValueError):
    """NaN or infinite values reached a loss or metric."""


class DatasetError(DRRNetError):
    """Dataset directory is missing, empty or malformed."""


class UnpairedFile(DatasetError):
    """A file stem exists in only one of two directories that must pair up."""


class CorruptImage(DatasetError):
    """An image or mask file exists but cannot be decoded."""


class UnreadableImage(DatasetError):
    """An input image for inference or evaluation cannot be read."""


class CheckpointMismatch(DRRNetError):
    """Checkpoint schema or parameters do not match the model being restored."""


class NonFiniteLoss(DRRNetError, FloatingPointError):
    """Training loss became NaN or infinite.

    `grad_norm` is the gradient norm of the last finite step, NaN when the
    first step already fails.
    """

    def __init__(self, step: int, lr: float, grad_norm: float, loss: float):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        self.loss = loss
        previous = "none, first step" if step <= 1 else f"{grad_norm:.4g}"
        super().__init__(f"loss={loss} at step {step} (lr={lr:.3g}, last finite grad_norm={previous})")
