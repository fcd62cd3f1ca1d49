"""Conversion between per-frame file sizes and stream bandwidth."""

import math

import numpy as np
import torch

from .exceptions import ContractError

__all__ = ('bandwidth_from_filesizes',)


def bandwidth_from_filesizes(sizes, fps, frames=None, stride=1, *,
                             log_sizes=False):
    """Return the bandwidth, in bit/s, of a clip streamed at a constant rate.

    The clip spans ``frames * stride`` source frames, so its duration is
    ``frames * stride / fps`` seconds and the bandwidth is
    ``8 * sum(sizes) * fps / (frames * stride)``.

    Args:
        sizes: Per-frame sizes in bytes, or in log10 bytes when
            ``log_sizes`` is set. A sequence, a numpy array, or a tensor
            whose last axis is the frame axis. Tensors stay
            differentiable.
        fps (float): Frame rate of the source video.
        frames (Optional[int]): Number of frames in the clip. Defaults to
            the length of the last axis of ``sizes``.
        stride (int): Temporal stride the clip was sampled at.
        log_sizes (bool): Whether ``sizes`` are given in log10 bytes.

    Returns:
        The bandwidth with the frame axis reduced: a float for a single
        clip given as a sequence, otherwise an array or tensor.

    Raises:
        ContractError: If the frame count, stride, or frame rate are out
            of range, or the sizes are not finite.

    """
    if isinstance(sizes, torch.Tensor):
        if not torch.isfinite(sizes).all():
            raise ContractError('File sizes must be finite.')
        sizes = torch.pow(10.0, sizes) if log_sizes else sizes
        total = sizes.sum(dim=-1)
    else:
        sizes = np.asarray(sizes, dtype=np.float64)
        if not np.isfinite(sizes).all():
            raise ContractError('File sizes must be finite.')
        sizes = np.power(10.0, sizes) if log_sizes else sizes
        total = sizes.sum(axis=-1)
        if total.ndim == 0:
            total = float(total)

    frames = sizes.shape[-1] if frames is None else frames
    if frames <= 0:
        raise ContractError('A clip needs at least one frame.')
    if stride < 1:
        raise ContractError('The temporal stride must be at least 1.')
    if not fps > 0 or math.isinf(fps):
        raise ContractError('The frame rate must be positive.')

    return 8 * total * fps / (frames * stride)
