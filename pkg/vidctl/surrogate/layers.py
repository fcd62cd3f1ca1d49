"""Building blocks of the surrogate's encoder and decoder."""

import math

from torch import nn
import torch.nn.functional as F

from ..exceptions import ShapeError
from .qp import QP_LEVELS

__all__ = (
    'ConditionalGroupNorm',
    'DecoderBlock',
    'EncoderBlock',
    'QpEmbedding',
    'ResidualBlock3d',
    'group_count',
)

# Softplus(x) == 1 at this bias, so a fresh layer starts close to a
# plain GroupNorm.
_UNIT_SOFTPLUS = math.log(math.e - 1)


def group_count(channels, groups=32):
    """Return the largest group count up to ``groups`` dividing channels."""
    return math.gcd(channels, groups)


class QpEmbedding(nn.Module):
    """Embeds a one-hot QP per macroblock position.

    The same two-layer MLP is applied at every frame and macroblock.

    Args:
        condition_dim (int): Size of the embedding.
        levels (int): Number of QP levels.
    """

    def __init__(self, condition_dim=256, levels=QP_LEVELS):
        """Build the layers."""
        super().__init__()
        self.levels = levels
        self.mlp = nn.Sequential(
            nn.Linear(levels, condition_dim),
            nn.GELU(),
            nn.Linear(condition_dim, condition_dim),
        )

    def forward(self, qp):
        """Embed ``B x 52 x T x h x w`` QPs to ``B x Cz x T x h x w``."""
        if qp.dim() != 5 or qp.shape[1] != self.levels:
            raise ShapeError('Expected B x {} x T x h x w, got {}.'.format(
                self.levels, tuple(qp.shape)))
        return self.mlp(qp.movedim(1, -1)).movedim(-1, 1)


class ConditionalGroupNorm(nn.Module):
    """Group normalization with a condition-dependent affine transform.

    ``Softplus(scale(z)) * GroupNorm(x) + shift(z)`` where ``scale`` and
    ``shift`` are pointwise convolutions of the condition. The condition
    is upsampled (nearest) to the features' resolution, which must be an
    integer multiple of it. Works on 2D and 3D features.

    Args:
        channels (int): Feature channels.
        condition_dim (int): Condition channels.
        groups (int): Upper bound on the group count.
    """

    def __init__(self, channels, condition_dim, groups=32):
        """Build the layers."""
        super().__init__()
        self.norm = nn.GroupNorm(
            group_count(channels, groups), channels, affine=False)
        self.scale = nn.Linear(condition_dim, channels)
        self.shift = nn.Linear(condition_dim, channels)
        nn.init.constant_(self.scale.bias, _UNIT_SOFTPLUS)
        nn.init.zeros_(self.shift.bias)

    def modulation(self, condition, size):
        """Return the scale and shift at the features' resolution."""
        condition_size = condition.shape[2:]
        if len(condition_size) != len(size) or any(
                big % small for big, small in zip(size, condition_size)):
            raise ShapeError(
                'Features of size {} are not an integer multiple of the '
                'condition size {}.'.format(tuple(size),
                                            tuple(condition_size)))
        condition = condition.movedim(1, -1)
        scale = F.softplus(self.scale(condition)).movedim(-1, 1)
        shift = self.shift(condition).movedim(-1, 1)
        if tuple(condition_size) != tuple(size):
            scale = F.interpolate(scale, size=tuple(size), mode='nearest')
            shift = F.interpolate(shift, size=tuple(size), mode='nearest')
        return scale, shift

    def forward(self, x, condition):
        """Normalize ``x`` and modulate it by ``condition``.

        Args:
            x (torch.Tensor): ``N x C x *S`` features.
            condition (torch.Tensor): ``N x Cz x *s`` with every ``S``
                an integer multiple of the matching ``s``.
        """
        scale, shift = self.modulation(condition, x.shape[2:])
        return scale * self.norm(x) + shift


class EncoderBlock(nn.Module):
    """Residual block that halves the resolution.

    A strided 3x3 convolution, conditional normalization and a leaky
    ReLU, then a 3x3 convolution and group normalization, added to a
    strided pointwise projection of the input.
    """

    def __init__(self, in_channels, out_channels, condition_dim, groups=32):
        """Build the layers."""
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=2,
                               padding=1)
        self.norm1 = ConditionalGroupNorm(out_channels, condition_dim, groups)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(group_count(out_channels, groups),
                                  out_channels)
        self.skip = nn.Conv2d(in_channels, out_channels, 1, stride=2)

    def forward(self, x, condition):
        """Halve the resolution of ``x``."""
        y = F.leaky_relu(self.norm1(self.conv1(x), condition), 0.2)
        y = self.norm2(self.conv2(y))
        return F.leaky_relu(y + self.skip(x), 0.2)


class DecoderBlock(nn.Module):
    """Residual block that doubles the resolution.

    Mirrors :class:`EncoderBlock` with a 4x4 transposed convolution and a
    nearest-upsampled pointwise projection on the skip path.
    """

    def __init__(self, in_channels, out_channels, condition_dim, groups=32):
        """Build the layers."""
        super().__init__()
        self.conv1 = nn.ConvTranspose2d(in_channels, out_channels, 4,
                                        stride=2, padding=1)
        self.norm1 = ConditionalGroupNorm(out_channels, condition_dim, groups)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(group_count(out_channels, groups),
                                  out_channels)
        self.skip = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x, condition):
        """Double the resolution of ``x``."""
        y = F.leaky_relu(self.norm1(self.conv1(x), condition), 0.2)
        y = self.norm2(self.conv2(y))
        skip = self.skip(F.interpolate(x, scale_factor=2, mode='nearest'))
        return F.leaky_relu(y + skip, 0.2)


class ResidualBlock3d(nn.Module):
    """Residual block over time and space at constant resolution.

    Two 3x3x3 convolutions, the first conditionally normalized, with the
    input added back. Used in place of the aligned GRUs when the
    bottleneck is ``residual3d``.
    """

    def __init__(self, channels, condition_dim, groups=32):
        """Build the layers."""
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm1 = ConditionalGroupNorm(channels, condition_dim, groups)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(group_count(channels, groups), channels)

    def forward(self, x, condition):
        """Refine ``B x C x T x h x w`` features.

        Args:
            x (torch.Tensor): The features.
            condition (torch.Tensor): ``B x Cz x T x h x w``.
        """
        y = F.leaky_relu(self.norm1(self.conv1(x), condition), 0.2)
        y = self.norm2(self.conv2(y))
        return F.leaky_relu(x + y, 0.2)
