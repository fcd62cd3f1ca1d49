"""One-hot QP tensors and the QP maps drawn while pre-training."""

import math

import numpy as np
import torch
import torch.nn.functional as F

from ..codec_bridge import QP_MAX, QpMap
from ..exceptions import ContractError, ShapeError

__all__ = ('QP_LEVELS', 'QpSampler', 'check_qp', 'from_one_hot', 'to_one_hot')

QP_LEVELS = QP_MAX + 1


def to_one_hot(qp, dtype=torch.float32, device='cpu'):
    """Return the one-hot encoding of QP maps.

    Args:
        qp (Union[QpMap, Sequence[QpMap]]): One map, or a batch of maps
            with the same shape.

    Returns:
        torch.Tensor: ``52 x T x h x w`` for one map, ``B x 52 x T x h x
            w`` for a batch.

    """
    single = isinstance(qp, QpMap)
    maps = [qp] if single else list(qp)
    values = torch.as_tensor(np.stack([m.values for m in maps]), device=device)
    encoded = F.one_hot(values, QP_LEVELS).permute(0, 4, 1, 2, 3).to(dtype)
    return encoded[0] if single else encoded


def from_one_hot(qp):
    """Return the QP maps of a batch of one-hot (or soft) encodings."""
    values = qp.detach().argmax(dim=1).cpu().numpy()
    return [QpMap(v) for v in values]


def check_qp(qp, frames=None, *, hard=False, atol=1e-4):
    """Check that a tensor encodes a distribution over the 52 QP levels.

    Args:
        qp (torch.Tensor): ``B x 52 x T x h x w``.
        frames (Optional[int]): The expected ``T``.
        hard (bool): Whether every entry must be exactly 0 or 1.
        atol (float): Tolerance on the sum over levels.

    Raises:
        ShapeError: If the tensor has the wrong layout.
        ContractError: If the entries don't form a distribution.

    """
    if qp.dim() != 5 or qp.shape[1] != QP_LEVELS:
        raise ShapeError(
            'QP tensors must be B x {} x T x h x w, got {}.'.format(
                QP_LEVELS, tuple(qp.shape)))
    if frames is not None and qp.shape[2] != frames:
        raise ShapeError('The QP tensor has {} frames, expected {}.'.format(
            qp.shape[2], frames))
    values = qp.detach()
    if (values < 0).any() or not torch.allclose(
            values.sum(dim=1), torch.ones_like(values[:, 0]), atol=atol):
        raise ContractError('QP entries must sum to one over the levels.')
    if hard and not ((values == 0) | (values == 1)).all():
        raise ContractError('Hard QP entries must be 0 or 1.')


class QpSampler:
    """Draws random QP maps for pre-training the surrogate.

    Early on only coarse quantization is drawn: at step ``s`` of ``S``
    values come from ``[max(0, 51 * (1 - 2 * s / S)), 51]``, so the full
    range opens up halfway through. Each map is drawn on a grid coarser
    than the macroblock grid by a factor picked from ``stages`` and then
    upsampled, which mixes flat and busy maps. With probability
    ``shared_p`` one frame's map is used for the whole clip.

    Args:
        total_steps (int): The length of the curriculum.
        stages (Sequence[int]): Grid coarsening factors.
        shared_p (float): Probability of one map for all frames.
    """

    def __init__(self, total_steps, stages=(1, 2, 4, 8, 16), shared_p=0.4):
        """Initialize the sampler."""
        if total_steps < 1:
            raise ContractError('The curriculum needs at least one step.')
        if not stages or any(stage < 1 for stage in stages):
            raise ContractError('Stages must be positive integers.')
        self.total_steps = total_steps
        self.stages = tuple(stages)
        self.shared_p = shared_p

    def qp_range(self, step):
        """Return the ``(lowest, highest)`` QP drawn at a step."""
        low = max(0.0, QP_MAX * (1 - 2 * step / self.total_steps))
        return math.ceil(low), QP_MAX

    def _draw_frame(self, low, height, width, rng):
        stage = int(rng.choice(self.stages))
        coarse = rng.integers(
            low, QP_MAX + 1,
            size=(math.ceil(height / stage), math.ceil(width / stage)))
        upsampled = coarse.repeat(stage, axis=0).repeat(stage, axis=1)
        return upsampled[:height, :width]

    def sample(self, step, frames, height, width, rng):
        """Return a QP map for a clip.

        Args:
            step (int): The training step.
            frames (int): ``T``.
            height (int): Macroblock rows.
            width (int): Macroblock columns.
            rng (numpy.random.Generator): Source of randomness.

        Returns:
            QpMap: The map.

        """
        low, _ = self.qp_range(step)
        if rng.random() < self.shared_p:
            frame = self._draw_frame(low, height, width, rng)
            values = np.broadcast_to(frame, (frames, height, width))
        else:
            values = np.stack([
                self._draw_frame(low, height, width, rng)
                for _ in range(frames)])
        return QpMap(np.array(values))
