"""Optical flow and backward warping of reference features."""

import torch
from torch import nn
import torch.nn.functional as F
from torchvision.models.optical_flow import Raft_Small_Weights, raft_small

from ..exceptions import ShapeError

__all__ = (
    'FLOW_ESTIMATORS',
    'RaftFlow',
    'TranslationFlow',
    'ZeroFlow',
    'align_features',
    'backward_warp',
    'build_flow_estimator',
    'resize_flow',
)


class RaftFlow(nn.Module):
    """RAFT (small) from torchvision.

    Args:
        pretrained (bool): Load the published weights.
        finetune (bool): Let gradients reach the flow network.
        updates (int): Number of recurrent flow updates.
    """

    def __init__(self, pretrained=True, finetune=True, updates=12):
        """Build the layers."""
        super().__init__()
        weights = Raft_Small_Weights.DEFAULT if pretrained else None
        self.raft = raft_small(weights=weights, progress=False)
        self.finetune = finetune
        self.updates = updates
        if not finetune:
            self.raft.requires_grad_(False)

    def forward(self, target, reference):
        """Return the flow from ``target`` pixels to ``reference`` pixels.

        Args:
            target (torch.Tensor): ``N x 3 x H x W`` in [0, 1].
            reference (torch.Tensor): ``N x 3 x H x W`` in [0, 1].

        Returns:
            torch.Tensor: ``N x 2 x H x W`` displacements in pixels,
                ``(dx, dy)``.

        """
        with torch.set_grad_enabled(self.finetune and torch.is_grad_enabled()):
            flows = self.raft(target * 2 - 1, reference * 2 - 1,
                              num_flow_updates=self.updates)
        return flows[-1]


class ZeroFlow(nn.Module):
    """A flow estimator that reports no motion."""

    def forward(self, target, reference):
        """Return zero flow."""
        n, _, h, w = target.shape
        return target.new_zeros(n, 2, h, w)


class TranslationFlow(nn.Module):
    """A flow estimator that reports one global translation.

    Args:
        dx (float): Horizontal displacement in pixels.
        dy (float): Vertical displacement in pixels.
    """

    def __init__(self, dx=0.0, dy=0.0):
        """Build the layers."""
        super().__init__()
        self.dx = dx
        self.dy = dy

    def forward(self, target, reference):
        """Return the constant flow."""
        n, _, h, w = target.shape
        flow = target.new_empty(n, 2, h, w)
        flow[:, 0] = self.dx
        flow[:, 1] = self.dy
        return flow


FLOW_ESTIMATORS = {
    'raft_small': RaftFlow,
    'translation': TranslationFlow,
    'zero': ZeroFlow,
}


def build_flow_estimator(name, *, pretrained=True, finetune=True):
    """Return the flow estimator registered under ``name``."""
    try:
        estimator = FLOW_ESTIMATORS[name]
    except KeyError:
        raise ValueError('Unknown flow estimator {!r}.'.format(name)) \
            from None
    if estimator is RaftFlow:
        return RaftFlow(pretrained=pretrained, finetune=finetune)
    return estimator()


def resize_flow(flow, size):
    """Resize a flow field and rescale its displacements to match."""
    h, w = flow.shape[2:]
    if (h, w) == tuple(size):
        return flow
    resized = F.interpolate(flow, size=tuple(size), mode='bilinear',
                            align_corners=False)
    scale = flow.new_tensor([size[1] / w, size[0] / h]).view(1, 2, 1, 1)
    return resized * scale


def backward_warp(features, flow):
    """Sample features at positions displaced by a flow field.

    The output at ``(x, y)`` is the input at ``(x + dx, y + dy)``,
    bilinearly interpolated. Positions outside the input read zero.

    Args:
        features (torch.Tensor): ``N x C x h x w``.
        flow (torch.Tensor): ``N x 2 x h x w`` in pixels at the features'
            resolution.

    Returns:
        torch.Tensor: ``N x C x h x w``.

    """
    if flow.shape[0] != features.shape[0] or flow.shape[1] != 2 \
            or flow.shape[2:] != features.shape[2:]:
        raise ShapeError('A {} flow cannot warp {} features.'.format(
            tuple(flow.shape), tuple(features.shape)))

    n, _, h, w = features.shape
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=flow.dtype, device=flow.device),
        torch.arange(w, dtype=flow.dtype, device=flow.device),
        indexing='ij')
    x = xs + flow[:, 0]
    y = ys + flow[:, 1]
    grid = torch.stack([
        2 * x / max(w - 1, 1) - 1,
        2 * y / max(h - 1, 1) - 1,
    ], dim=-1)
    return F.grid_sample(features, grid, mode='bilinear',
                         padding_mode='zeros', align_corners=True)


def align_features(reference_features, target_frame, reference_frame,
                   estimator, *, flow=None):
    """Warp a reference frame's features onto a target frame.

    Flow is estimated between the frames at full resolution, then
    resized to the features' resolution.

    Args:
        reference_features (torch.Tensor): ``N x C x h x w``.
        target_frame (torch.Tensor): ``N x 3 x H x W``.
        reference_frame (torch.Tensor): ``N x 3 x H x W``.
        estimator (nn.Module): Maps ``(target, reference)`` frames to
            flow.
        flow (Optional[torch.Tensor]): The full-resolution flow of an
            earlier call for the same frames. The estimator isn't run
            when it is given.

    Returns:
        torch.Tensor: The aligned features, ``N x C x h x w``.

    """
    if flow is None:
        flow = estimator(target_frame, reference_frame)
    return backward_warp(
        reference_features,
        resize_flow(flow, reference_features.shape[2:]))
