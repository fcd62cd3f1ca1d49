"""Losses that fit the surrogate to the real codec."""

from dataclasses import dataclass
from typing import NamedTuple

from focal_frequency_loss import FocalFrequencyLoss
import kornia
import numpy as np
import torch

from ..exceptions import ContractError, ShapeError

__all__ = (
    'CodedBatch',
    'SurrogateLossWeights',
    'correlation_loss',
    'focal_frequency_loss',
    'ssim_loss',
    'surrogate_loss',
)

_focal_frequency = FocalFrequencyLoss(loss_weight=1.0, alpha=1.0)


class CodedBatch(NamedTuple):
    """Codec ground truth for a batch of clips.

    Attributes:
        frames_hat (torch.Tensor): ``B x T x 3 x H x W`` decoded frames.
        file_sizes (torch.Tensor): ``B x T`` bytes.
    """

    frames_hat: torch.Tensor
    file_sizes: torch.Tensor

    @classmethod
    def stack(cls, coded_clips, device='cpu', dtype=torch.float32):
        """Stack :class:`~vidctl.codec_bridge.CodedClip` objects."""
        return cls(
            frames_hat=torch.from_numpy(np.stack(
                [c.frames_hat for c in coded_clips])).to(device, dtype),
            file_sizes=torch.from_numpy(np.stack(
                [c.file_sizes for c in coded_clips])).to(device, dtype),
        )


@dataclass(frozen=True)
class SurrogateLossWeights:
    """Weights of the terms of the surrogate loss."""

    rho_video: float = 1e-4
    ssim: float = 2.0
    focal_frequency: float = 200.0
    rho_size: float = 1e-4
    l1: float = 0.1

    SETTINGS = {
        'rho_video': 'LOSS_RHO_VIDEO',
        'ssim': 'LOSS_SSIM',
        'focal_frequency': 'LOSS_FF',
        'rho_size': 'LOSS_RHO_SIZE',
        'l1': 'LOSS_L1',
    }

    @classmethod
    def from_settings(cls, settings):
        """Return the weights described by settings."""
        return cls(**{name: settings[key]
                      for name, key in cls.SETTINGS.items()})


def correlation_loss(prediction, target, eps=1e-8):
    """Return one minus the Pearson correlation of two tensors.

    Every element is one sample. The loss lies in [0, 2]. When either
    tensor is constant the correlation is undefined and the loss is 1.

    Args:
        prediction (torch.Tensor): Any shape.
        target (torch.Tensor): The same shape.
        eps (float): Added to the standard deviations.

    Returns:
        torch.Tensor: A scalar.

    """
    if prediction.shape != target.shape:
        raise ShapeError('Cannot correlate {} with {}.'.format(
            tuple(prediction.shape), tuple(target.shape)))

    p = prediction.flatten() - prediction.mean()
    t = target.flatten() - target.mean()
    p_std = p.pow(2).mean().sqrt()
    t_std = t.pow(2).mean().sqrt()
    if p_std.item() == 0 or t_std.item() == 0:
        return prediction.sum() * 0 + 1
    rho = (p * t).mean() / ((p_std + eps) * (t_std + eps))
    return (1 - rho).clamp(0, 2)


def ssim_loss(prediction, target, window_size=11):
    """Return one minus the mean SSIM of two batches of images.

    Args:
        prediction (torch.Tensor): ``N x C x H x W`` in [0, 1].
        target (torch.Tensor): The same shape.
    """
    return 1 - kornia.metrics.ssim(
        prediction, target, window_size, max_val=1.0).mean()


def focal_frequency_loss(prediction, target):
    """Return the focal frequency loss of two batches of images."""
    return _focal_frequency(prediction, target)


def surrogate_loss(prediction, truth, weights=None):
    """Return the weighted surrogate loss and its terms.

    Args:
        prediction (vidctl.surrogate.SurrogateOutput): What the surrogate
            predicted.
        truth (CodedBatch): What the codec produced.
        weights (Optional[SurrogateLossWeights]): Term weights.

    Returns:
        Tuple[torch.Tensor, Dict[str, float]]: The loss and the
            unweighted value of every term.

    Raises:
        ContractError: If a true file size isn't positive.

    """
    weights = weights or SurrogateLossWeights()
    if (truth.file_sizes <= 0).any():
        raise ContractError('File sizes must be positive.')
    if prediction.frames.shape != truth.frames_hat.shape:
        raise ShapeError('Predicted frames are {}, the codec gave {}.'.format(
            tuple(prediction.frames.shape), tuple(truth.frames_hat.shape)))

    frames = prediction.frames.flatten(0, 1)
    frames_hat = truth.frames_hat.flatten(0, 1)
    log_sizes = torch.log10(truth.file_sizes)

    terms = {
        'rho_video': correlation_loss(frames, frames_hat),
        'ssim': ssim_loss(frames, frames_hat),
        'focal_frequency': focal_frequency_loss(frames, frames_hat),
        'rho_size': correlation_loss(prediction.log_file_sizes, log_sizes),
        'l1': (prediction.log_file_sizes - log_sizes).abs().mean(),
    }
    loss = sum(getattr(weights, name) * value
               for name, value in terms.items())
    return loss, {name: value.item() for name, value in terms.items()}
