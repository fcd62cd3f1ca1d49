"""The control network: from a clip and a bandwidth to QP maps.

The network reads a clip with a light 3D convolutional backbone down to
the macroblock grid. Two residual head blocks, normalized conditionally
on the target bandwidth, produce logits over the 52 QP levels of every
macroblock. Training draws differentiable one-hot samples from the
logits; inference takes their argmax.
"""

from copy import deepcopy
from dataclasses import dataclass, fields, replace
import math
import os

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .checkpoints import load_checkpoint, save_checkpoint
from .codec_bridge import MACROBLOCK, QpMap
from .exceptions import ContractError, ShapeError
from .extensions import Extension
from .surrogate.layers import ConditionalGroupNorm, group_count
from .surrogate.qp import QP_LEVELS

__all__ = (
    'BACKBONES',
    'BandwidthEmbedding',
    'Control',
    'ControlConfig',
    'ControlNetwork',
    'ema_update',
    'gumbel_sample',
    'infer_qp',
    'load_control',
    'parameter_count',
    'save_control',
    'temperature',
)

BACKBONES = ('x3d_lite', 'x3d_s')

# Uniform draws are kept inside (0, 1) so that the Gumbel noise is finite.
_UNIFORM_EPS = 1e-10

_X3D_MEAN = (0.45, 0.45, 0.45)
_X3D_STD = (0.225, 0.225, 0.225)

NEGATIVE_SLOPE = 0.2


@dataclass(frozen=True)
class ControlConfig:
    """Sizes and schedules of the control network."""

    backbone: str = 'x3d_lite'
    pretrained: bool = False
    widths: tuple = (24, 48, 96)
    depths: tuple = (3, 5, 11)
    head_channels: int = 192
    condition_dim: int = 64
    bandwidth_min: float = 30000.0
    bandwidth_max: float = 900000.0
    tau_start: float = 2.0
    tau_end: float = 0.1
    ema_decay: float = 0.99
    max_parameters: int = 4000000

    SETTINGS = {
        'backbone': 'CONTROL_BACKBONE',
        'pretrained': 'CONTROL_PRETRAINED',
        'widths': 'CONTROL_WIDTHS',
        'depths': 'CONTROL_DEPTHS',
        'head_channels': 'CONTROL_HEAD_CHANNELS',
        'condition_dim': 'CONTROL_CONDITION_DIM',
        'bandwidth_min': 'BANDWIDTH_MIN',
        'bandwidth_max': 'BANDWIDTH_MAX',
        'tau_start': 'CONTROL_TAU_START',
        'tau_end': 'CONTROL_TAU_END',
        'ema_decay': 'CONTROL_EMA_DECAY',
        'max_parameters': 'CONTROL_MAX_PARAMETERS',
    }

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ContractError('Unknown backbone {!r}.'.format(self.backbone))
        if len(self.widths) != 3 or len(self.depths) != 3:
            raise ContractError(
                'The backbone has three stages after its stem.')
        if not 0 < self.tau_end <= self.tau_start:
            raise ContractError(
                'The temperature must be positive and non-increasing.')
        if not 0 < self.ema_decay < 1:
            raise ContractError('The EMA decay must lie in (0, 1).')
        if not 0 < self.bandwidth_min < self.bandwidth_max:
            raise ContractError(
                'The bandwidth range must be positive and non-empty.')

    @classmethod
    def from_settings(cls, settings):
        """Return the configuration described by settings."""
        values = {name: settings[key] for name, key in cls.SETTINGS.items()}
        for name in ('widths', 'depths'):
            values[name] = tuple(values[name])
        return cls(**values)

    def to_settings(self):
        """Return the settings that describe this configuration."""
        return {self.SETTINGS[f.name]: getattr(self, f.name)
                for f in fields(self)}


def parameter_count(module):
    """Return the number of parameters of a module."""
    return sum(p.numel() for p in module.parameters())


def temperature(step, total_steps, start=2.0, end=0.1):
    """Return the Gumbel-Softmax temperature at a step.

    The temperature follows half a cosine from ``start`` at step 0 to
    ``end`` at ``total_steps`` and stays there afterwards.
    """
    if total_steps <= 0:
        return end
    progress = min(1.0, max(0.0, step / total_steps))
    return end + (start - end) * 0.5 * (1 + math.cos(math.pi * progress))


def gumbel_sample(logits, tau, hard=False, generator=None):
    """Draw a differentiable one-hot sample from per-macroblock logits.

    Args:
        logits (torch.Tensor): ``B x 52 x T x h x w``.
        tau (float): The temperature.
        hard (bool): Whether to return exact one-hot vectors. Their
            gradient is the gradient of the relaxed sample.
        generator (Optional[torch.Generator]): A CPU generator for the
            noise.

    Returns:
        torch.Tensor: Samples with the shape of ``logits`` that sum to
            one over dimension 1.

    Raises:
        ContractError: If ``tau`` isn't positive.

    """
    if not tau > 0:
        raise ContractError('The temperature must be positive.')
    uniform = torch.rand(logits.shape, generator=generator,
                         dtype=torch.float64)
    uniform = uniform.clamp(_UNIFORM_EPS, 1 - _UNIFORM_EPS)
    noise = -torch.log(-torch.log(uniform))
    noise = noise.to(device=logits.device, dtype=logits.dtype)

    soft = F.softmax((logits + noise) / tau, dim=1)
    if not hard:
        return soft
    index = soft.argmax(dim=1, keepdim=True)
    one_hot = torch.zeros_like(soft).scatter_(1, index, 1.0)
    # The difference is exactly zero but carries the relaxed gradient.
    return one_hot + (soft - soft.detach())


def ema_update(live, shadow, decay=0.99):
    """Move shadow tensors towards live tensors, in place.

    ``shadow = decay * shadow + (1 - decay) * live`` for floating point
    entries; other entries (counters) are copied.

    Args:
        live (Union[nn.Module, Mapping[str, torch.Tensor]]): The
            trained parameters.
        shadow (Union[nn.Module, Mapping[str, torch.Tensor]]): The
            averaged parameters.
        decay (float): The weight of the shadow.

    Returns:
        Mapping[str, torch.Tensor]: The updated shadow tensors.

    Raises:
        ContractError: If the two don't hold the same tensors.

    """
    live = _tensors(live)
    shadow = _tensors(shadow)
    if live.keys() != shadow.keys():
        raise ContractError('The live and shadow parameters differ: {}.'
                            .format(sorted(live.keys() ^ shadow.keys())))
    with torch.no_grad():
        for name, value in shadow.items():
            if value.shape != live[name].shape:
                raise ContractError('{} is {} live and {} in the shadow.'
                                    .format(name, tuple(live[name].shape),
                                            tuple(value.shape)))
            if value.is_floating_point():
                value.mul_(decay).add_(live[name], alpha=1 - decay)
            else:
                value.copy_(live[name])
    return shadow


def _tensors(tree):
    if isinstance(tree, nn.Module):
        return tree.state_dict()
    return tree


class _Bottleneck(nn.Module):
    """A residual X3D bottleneck.

    Pointwise expansion, then a depthwise 3x3x3 convolution, then a
    pointwise projection.
    """

    def __init__(self, in_channels, out_channels, stride, expansion=2.25):
        """Build the layers."""
        super().__init__()
        inner = int(round(out_channels * expansion))
        self.expand = nn.Sequential(
            nn.Conv3d(in_channels, inner, 1, bias=False),
            nn.BatchNorm3d(inner),
            nn.ReLU(inplace=True),
        )
        self.depthwise = nn.Sequential(
            nn.Conv3d(inner, inner, 3, stride=(1, stride, stride),
                      padding=1, groups=inner, bias=False),
            nn.BatchNorm3d(inner),
            nn.SiLU(inplace=True),
        )
        self.project = nn.Sequential(
            nn.Conv3d(inner, out_channels, 1, bias=False),
            nn.BatchNorm3d(out_channels),
        )
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv3d(in_channels, out_channels, 1,
                          stride=(1, stride, stride), bias=False),
                nn.BatchNorm3d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        """Return the block applied to ``x``."""
        y = self.project(self.depthwise(self.expand(x)))
        return F.relu(y + self.shortcut(x))


class X3dLite(nn.Module):
    """A compact X3D-style backbone ending at 1/16 resolution.

    A stem halves the resolution; each of three stages halves it again.
    There is no temporal striding, so the frame count is preserved.

    Args:
        widths (Sequence[int]): Output channels of the three stages.
        depths (Sequence[int]): Blocks per stage.
        stem_channels (int): Output channels of the stem.
    """

    def __init__(self, widths=(24, 48, 96), depths=(3, 5, 11),
                 stem_channels=24):
        """Build the layers."""
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv3d(3, stem_channels, (1, 3, 3), stride=(1, 2, 2),
                      padding=(0, 1, 1), bias=False),
            nn.Conv3d(stem_channels, stem_channels, (5, 1, 1),
                      padding=(2, 0, 0), groups=stem_channels, bias=False),
            nn.BatchNorm3d(stem_channels),
            nn.ReLU(inplace=True),
        )
        stages = []
        previous = stem_channels
        for width, depth in zip(widths, depths):
            blocks = [_Bottleneck(previous, width, stride=2)]
            blocks.extend(_Bottleneck(width, width, stride=1)
                          for _ in range(depth - 1))
            stages.append(nn.Sequential(*blocks))
            previous = width
        self.stages = nn.Sequential(*stages)
        self.out_channels = previous

    def forward(self, x):
        """Map ``B x 3 x T x H x W`` to ``B x C x T x H/16 x W/16``."""
        return self.stages(self.stem(x))


class _HubX3dS(nn.Module):
    """The stem and first three stages of the pytorchvideo X3D-S."""

    out_channels = 96

    def __init__(self, pretrained=True):
        """Build the layers."""
        super().__init__()
        model = torch.hub.load('facebookresearch/pytorchvideo', 'x3d_s',
                               pretrained=pretrained)
        self.blocks = nn.Sequential(*model.blocks[:4])
        self.register_buffer(
            'mean', torch.tensor(_X3D_MEAN).view(1, 3, 1, 1, 1))
        self.register_buffer(
            'std', torch.tensor(_X3D_STD).view(1, 3, 1, 1, 1))

    def forward(self, x):
        """Return features of clips in [0, 1]."""
        return self.blocks((x - self.mean) / self.std)


def build_backbone(config):
    """Return the backbone named by a :class:`ControlConfig`."""
    if config.backbone == 'x3d_s':
        return _HubX3dS(pretrained=config.pretrained)
    return X3dLite(config.widths, config.depths)


class BandwidthEmbedding(nn.Module):
    """Embeds a target bandwidth for conditional normalization.

    The bandwidth is taken in log10 and standardized so that the
    training range maps to [-1, 1].

    Args:
        condition_dim (int): Size of the embedding.
        low (float): The lowest training bandwidth, in bit/s.
        high (float): The highest training bandwidth, in bit/s.
    """

    def __init__(self, condition_dim=64, low=30000.0, high=900000.0):
        """Build the layers."""
        super().__init__()
        self.center = (math.log10(low) + math.log10(high)) / 2
        self.half_width = (math.log10(high) - math.log10(low)) / 2
        self.mlp = nn.Sequential(
            nn.Linear(1, condition_dim),
            nn.GELU(),
            nn.Linear(condition_dim, condition_dim),
        )

    def standardize(self, bandwidth):
        """Return standardized log10 bandwidths.

        Raises:
            ContractError: If a bandwidth isn't positive.
        """
        if (bandwidth <= 0).any():
            raise ContractError('Bandwidths must be positive.')
        return (torch.log10(bandwidth) - self.center) / self.half_width

    def forward(self, bandwidth):
        """Embed ``B`` bandwidths to ``B x Cz x 1 x 1 x 1``."""
        x = self.standardize(bandwidth.reshape(-1, 1).float())
        return self.mlp(x).view(x.shape[0], -1, 1, 1, 1)


class ConditionalResBlock3d(nn.Module):
    """A 3D residual block normalized conditionally on the bandwidth.

    A depthwise 3x3x3 convolution, conditional group norm and a leaky
    ReLU are followed by a 1x1x1 convolution and group norm; the input is
    added back before a final leaky ReLU.
    """

    def __init__(self, channels, condition_dim, groups=32):
        """Build the layers."""
        super().__init__()
        self.depthwise = nn.Conv3d(channels, channels, 3, padding=1,
                                   groups=channels)
        self.norm1 = ConditionalGroupNorm(channels, condition_dim, groups)
        self.conv2 = nn.Conv3d(channels, channels, 1)
        self.norm2 = nn.GroupNorm(group_count(channels, groups), channels)

    def forward(self, x, condition):
        """Refine ``x`` conditioned on the bandwidth embedding."""
        y = F.leaky_relu(self.norm1(self.depthwise(x), condition),
                         NEGATIVE_SLOPE)
        y = self.norm2(self.conv2(y))
        return F.leaky_relu(x + y, NEGATIVE_SLOPE)


class ControlNetwork(nn.Module):
    """Predicts QP logits for every macroblock of a clip.

    Args:
        config (Optional[ControlConfig]): Sizes.

    Raises:
        ContractError: If the network has more parameters than the
            configured maximum.
    """

    def __init__(self, config=None):
        """Build the layers."""
        super().__init__()
        self.config = config = config or ControlConfig()
        self.backbone = build_backbone(config)
        self.embedding = BandwidthEmbedding(
            config.condition_dim, config.bandwidth_min, config.bandwidth_max)
        self.project = nn.Conv3d(self.backbone.out_channels,
                                 config.head_channels, 1)
        self.head = nn.ModuleList(
            ConditionalResBlock3d(config.head_channels, config.condition_dim)
            for _ in range(2))
        self.logits = nn.Conv3d(config.head_channels, QP_LEVELS, 1)

        count = parameter_count(self)
        if count > config.max_parameters:
            raise ContractError(
                'The control network has {} parameters, at most {} are '
                'allowed.'.format(count, config.max_parameters))

    def train(self, mode=True):
        """Set the training mode; backbone normalization stays frozen."""
        super().train(mode)
        for module in self.backbone.modules():
            if isinstance(module, nn.modules.batchnorm._BatchNorm):
                module.eval()
        return self

    def backbone_parameters(self):
        """Return the backbone's parameters."""
        return self.backbone.parameters()

    def head_parameters(self):
        """Yield every parameter outside the backbone."""
        for name, parameter in self.named_parameters():
            if not name.startswith('backbone.'):
                yield parameter

    def forward(self, clips, bandwidth):
        """Return QP logits.

        Args:
            clips (torch.Tensor): ``B x T x 3 x H x W`` in [0, 1].
            bandwidth (torch.Tensor): ``B`` target bandwidths in bit/s.

        Returns:
            torch.Tensor: ``B x 52 x T x H/16 x W/16``.

        Raises:
            ShapeError: If the clips aren't on the macroblock grid or
                there isn't one bandwidth per clip.

        """
        if clips.dim() != 5 or clips.shape[2] != 3:
            raise ShapeError('Clips must be B x T x 3 x H x W, got {}.'
                             .format(tuple(clips.shape)))
        b, t, _, h, w = clips.shape
        if h % MACROBLOCK or w % MACROBLOCK:
            raise ShapeError('Frames of {}x{} are not on the macroblock grid.'
                             .format(h, w))
        bandwidth = torch.as_tensor(bandwidth, device=clips.device)
        if bandwidth.numel() != b:
            raise ShapeError('{} bandwidths for {} clips.'.format(
                bandwidth.numel(), b))

        x = self.project(self.backbone(clips.transpose(1, 2)))
        size = (t, h // MACROBLOCK, w // MACROBLOCK)
        if tuple(x.shape[2:]) != size:
            x = F.interpolate(x, size=size, mode='trilinear',
                              align_corners=False)
        condition = self.embedding(bandwidth)
        for block in self.head:
            x = block(x, condition)
        return self.logits(x)


def infer_qp(model, clip, bandwidth):
    """Return the QP map the network chooses for a clip.

    Args:
        model (ControlNetwork): The network, usually the EMA copy.
        clip (Union[vidctl.clipstore.VideoClip, torch.Tensor]): One clip,
            ``T x 3 x H x W``.
        bandwidth (float): The target bandwidth in bit/s.

    Returns:
        vidctl.codec_bridge.QpMap: The argmax QP of every macroblock.

    """
    frames = getattr(clip, 'frames', clip)
    device = next(model.parameters()).device
    if not isinstance(frames, torch.Tensor):
        frames = torch.from_numpy(np.ascontiguousarray(frames))
    frames = frames.to(device, torch.float32)
    model.eval()
    with torch.no_grad():
        logits = model(frames.unsqueeze(0),
                       torch.tensor([float(bandwidth)], device=device))
    return QpMap(logits[0].argmax(dim=0).cpu().numpy())


def save_control(path, model, ema=None, metadata=None):
    """Write a control archive with the live and averaged parameters."""
    save_checkpoint(
        path, 'control', model.config.to_settings(), model.state_dict(),
        ema_state_dict=None if ema is None else ema.state_dict(),
        metadata=metadata)


def load_control(path, map_location='cpu'):
    """Rebuild a control network and its EMA copy from an archive.

    Returns:
        Tuple[ControlNetwork, Optional[ControlNetwork], dict]: The live
            network, the averaged network (when archived), and the
            metadata.
    """
    archive = load_checkpoint(path, 'control', map_location)
    config = ControlConfig.from_settings(archive['settings'])
    if config.pretrained:
        # The archive holds the trained weights.
        config = replace(config, pretrained=False)
    model = ControlNetwork(config)
    model.load_state_dict(archive['state_dict'])
    ema = None
    if archive.get('ema_state_dict') is not None:
        ema = deepcopy(model)
        ema.load_state_dict(archive['ema_state_dict'])
    return model, ema, archive['metadata']


class Control(Extension):
    """Builds and loads the control network for an application."""

    DEFAULT_SETTINGS = {
        **ControlConfig().to_settings(),
        'CONTROL_CHECKPOINT': None,
        'EVAL_USE_EMA': True,
    }

    def validate_settings(self, settings):
        """Return problems with the control settings."""
        problems = []
        try:
            ControlConfig.from_settings(settings)
        except (ContractError, TypeError) as e:
            problems.append('CONTROL_*: {}'.format(e))
        checkpoint = settings['CONTROL_CHECKPOINT']
        if checkpoint is not None and not os.path.exists(checkpoint):
            problems.append(
                'CONTROL_CHECKPOINT: {} does not exist'.format(checkpoint))
        return problems

    @property
    def config(self):
        """The control network's configuration."""
        return ControlConfig.from_settings(self.app.settings)

    def build(self):
        """Return a fresh network and its EMA copy on the device."""
        device = self.app.settings['DEVICE']
        model = ControlNetwork(self.config).to(device)
        return model, deepcopy(model)

    def load(self, path=None):
        """Return the network used for inference.

        The EMA copy is used when ``EVAL_USE_EMA`` is set and the archive
        has one.
        """
        path = path or self.app.settings['CONTROL_CHECKPOINT']
        if path is None:
            raise ContractError('CONTROL_CHECKPOINT is required.')
        model, ema, metadata = load_control(path)
        self.app.logger.info('control.loaded', extra={
            'path': path, **metadata})
        if self.app.settings['EVAL_USE_EMA'] and ema is not None:
            model = ema
        return model.to(self.app.settings['DEVICE']).eval()
