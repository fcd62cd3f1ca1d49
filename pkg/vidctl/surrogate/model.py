"""The differentiable codec surrogate."""

from dataclasses import dataclass, fields
from typing import NamedTuple

import torch
from torch import nn

from ..codec_bridge import MACROBLOCK
from ..exceptions import ContractError, ShapeError
from .agru import AlignedGRU
from .flow import align_features, build_flow_estimator
from .layers import DecoderBlock, EncoderBlock, QpEmbedding, ResidualBlock3d
from .qp import QP_LEVELS

__all__ = (
    'BOTTLENECKS',
    'FileSizeHead',
    'SurrogateConfig',
    'SurrogateModel',
    'SurrogateOutput',
)

PICTURE_TYPES = ('I', 'P', 'B')
REFERENCES = {'I': 0, 'P': 1, 'B': 2}
BOTTLENECKS = ('agru', 'residual3d')
RESIDUAL_BLOCKS = 3


@dataclass(frozen=True)
class SurrogateConfig:
    """Sizes of the surrogate.

    The encoder must downsample by 16 so that the bottleneck is on the
    macroblock grid. The ``residual3d`` bottleneck replaces the aligned
    GRUs with three 3D residual blocks of ``agru_channels``; it uses no
    flow and ignores ``agru_iterations``.
    """

    encoder_channels: tuple = (64, 128, 256, 1024)
    decoder_channels: tuple = (512, 256, 128, 64)
    condition_dim: int = 256
    agru_channels: int = 1024
    agru_iterations: int = 8
    token_dim: int = 256
    heads: int = 4
    groups: int = 32
    flow: str = 'raft_small'
    flow_pretrained: bool = True
    flow_finetune: bool = True
    bottleneck: str = 'agru'

    SETTINGS = {
        'encoder_channels': 'SURROGATE_ENCODER_CHANNELS',
        'decoder_channels': 'SURROGATE_DECODER_CHANNELS',
        'condition_dim': 'SURROGATE_CONDITION_DIM',
        'agru_channels': 'SURROGATE_AGRU_CHANNELS',
        'agru_iterations': 'SURROGATE_AGRU_ITERATIONS',
        'token_dim': 'SURROGATE_TOKEN_DIM',
        'heads': 'SURROGATE_HEADS',
        'groups': 'SURROGATE_GROUPS',
        'flow': 'SURROGATE_FLOW',
        'flow_pretrained': 'SURROGATE_FLOW_PRETRAINED',
        'flow_finetune': 'SURROGATE_FLOW_FINETUNE',
        'bottleneck': 'SURROGATE_BOTTLENECK',
    }

    def __post_init__(self):
        if len(self.encoder_channels) != 4 or len(self.decoder_channels) != 4:
            raise ContractError(
                'The surrogate has four encoder and four decoder stages.')
        if self.token_dim % self.heads:
            raise ContractError('The token size must divide into the heads.')
        if self.agru_iterations < 1:
            raise ContractError('The GRU needs at least one iteration.')
        if self.bottleneck not in BOTTLENECKS:
            raise ContractError('Unknown bottleneck {!r}.'.format(
                self.bottleneck))

    @classmethod
    def from_settings(cls, settings):
        """Return the configuration described by settings."""
        values = {name: settings[key] for name, key in cls.SETTINGS.items()}
        for name in ('encoder_channels', 'decoder_channels'):
            values[name] = tuple(values[name])
        return cls(**values)

    def to_settings(self):
        """Return the settings that describe this configuration."""
        return {self.SETTINGS[f.name]: getattr(self, f.name)
                for f in fields(self)}


class SurrogateOutput(NamedTuple):
    """What the surrogate predicts for a batch of clips.

    Attributes:
        frames (torch.Tensor): ``B x T x 3 x H x W`` in [0, 1].
        log_file_sizes (torch.Tensor): ``B x T`` log10 bytes.
    """

    frames: torch.Tensor
    log_file_sizes: torch.Tensor


class FileSizeHead(nn.Module):
    """Predicts a frame's log10 size from its bottleneck features.

    A learned token per picture type attends over the frame's feature
    positions. There is no positional encoding, so the prediction doesn't
    depend on the order of positions.

    Args:
        in_channels (int): Bottleneck channels.
        token_dim (int): Attention width.
        heads (int): Attention heads.
    """

    def __init__(self, in_channels, token_dim=256, heads=4):
        """Build the layers."""
        super().__init__()
        self.tokens = nn.Parameter(torch.randn(len(PICTURE_TYPES),
                                               token_dim) * 0.02)
        self.project = nn.Linear(in_channels, token_dim)
        self.attention = nn.MultiheadAttention(token_dim, heads,
                                               batch_first=True)
        self.regress = nn.Sequential(
            nn.Linear(token_dim, token_dim),
            nn.GELU(),
            nn.Linear(token_dim, 1),
        )
        # Start near 1 kB per frame.
        nn.init.constant_(self.regress[-1].bias, 3.0)

    def forward(self, features, picture_types):
        """Return log10 sizes.

        Args:
            features (torch.Tensor): ``N x C x h x w``.
            picture_types (Sequence[str]): One type per row of features.

        Returns:
            torch.Tensor: ``N`` log10 sizes.

        """
        if len(picture_types) != features.shape[0]:
            raise ShapeError('One picture type per frame is needed.')
        try:
            index = [PICTURE_TYPES.index(kind) for kind in picture_types]
        except ValueError:
            raise ContractError(
                'Unknown picture type in {}.'.format(picture_types)) \
                from None

        query = self.tokens[torch.tensor(index, device=features.device)]
        keys = self.project(features.flatten(2).transpose(1, 2))
        attended, _ = self.attention(query.unsqueeze(1), keys, keys,
                                     need_weights=False)
        return self.regress(attended.squeeze(1)).squeeze(-1)


class SurrogateModel(nn.Module):
    """Predicts decoded frames and frame sizes for clips and QP maps.

    Each frame is encoded to the macroblock grid with QP-conditioned
    residual blocks. The bottleneck features are refined jointly by
    picture-type specific GRUs whose inputs are the features of the
    frame's references, warped with optical flow. The refined features
    are decoded with skip connections to the encoder and read out by the
    file size head.

    Args:
        config (SurrogateConfig): Sizes.
        flow_estimator (Optional[nn.Module]): Overrides the configured
            flow estimator.
    """

    def __init__(self, config=None, flow_estimator=None):
        """Build the layers."""
        super().__init__()
        self.config = config = config or SurrogateConfig()

        self.embedding = QpEmbedding(config.condition_dim)

        channels = (3,) + tuple(config.encoder_channels)
        self.encoder = nn.ModuleList(
            EncoderBlock(c_in, c_out, config.condition_dim, config.groups)
            for c_in, c_out in zip(channels, channels[1:]))

        bottleneck = config.encoder_channels[-1]
        if config.agru_channels != bottleneck:
            self.into_gru = nn.Conv2d(bottleneck, config.agru_channels, 1)
            self.out_of_gru = nn.Conv2d(config.agru_channels, bottleneck, 1)
        else:
            self.into_gru = self.out_of_gru = nn.Identity()
        if config.bottleneck == 'agru':
            self.gru = nn.ModuleDict({
                kind: AlignedGRU(config.agru_channels, config.condition_dim,
                                 REFERENCES[kind], config.groups)
                for kind in PICTURE_TYPES
            })
        else:
            self.residual = nn.ModuleList(
                ResidualBlock3d(config.agru_channels, config.condition_dim,
                                config.groups)
                for _ in range(RESIDUAL_BLOCKS))

        skips = tuple(reversed(config.encoder_channels[:-1]))
        decoder = []
        previous = bottleneck
        for i, c_out in enumerate(config.decoder_channels):
            c_in = previous + (skips[i - 1] if i else 0)
            decoder.append(DecoderBlock(c_in, c_out, config.condition_dim,
                                        config.groups))
            previous = c_out
        self.decoder = nn.ModuleList(decoder)
        self.to_rgb = nn.Conv2d(previous, 3, 3, padding=1)

        self.file_size_head = FileSizeHead(bottleneck, config.token_dim,
                                           config.heads)
        if config.bottleneck != 'agru':
            flow_estimator = None
        elif flow_estimator is None:
            flow_estimator = build_flow_estimator(
                config.flow, pretrained=config.flow_pretrained,
                finetune=config.flow_finetune)
        self.flow = flow_estimator

    def _flows(self, frames, gop):
        """Estimate flow once for every (frame, reference) pair."""
        return {
            (t, r): self.flow(frames[:, t], frames[:, r])
            for t, references in enumerate(gop.reference_map)
            for r in references
        }

    def _recur(self, clips, hidden, condition, gop):
        hidden = [hidden[:, i] for i in range(hidden.shape[1])]
        flows = self._flows(clips, gop)
        for _ in range(self.config.agru_iterations):
            hidden = [
                self.gru[kind](
                    hidden[i],
                    [align_features(hidden[r], clips[:, i], clips[:, r],
                                    self.flow, flow=flows[i, r])
                     for r in gop.reference_map[i]],
                    condition[:, i])
                for i, kind in enumerate(gop.picture_types)
            ]
        return torch.stack(hidden, dim=1)

    def _convolve(self, hidden, condition):
        x = hidden.transpose(1, 2)
        condition = condition.transpose(1, 2)
        for block in self.residual:
            x = block(x, condition)
        return x.transpose(1, 2)

    def forward(self, clips, qp, gop):
        """Predict decoded frames and file sizes.

        Args:
            clips (torch.Tensor): ``B x T x 3 x H x W`` in [0, 1].
            qp (torch.Tensor): ``B x 52 x T x H/16 x W/16`` one-hot (or
                soft) QPs.
            gop (vidctl.codec_bridge.GopStructure): Picture types and
                references of the T frames.

        Returns:
            SurrogateOutput: Frames and log10 sizes.

        Raises:
            ShapeError: If the shapes disagree.

        """
        b, t, c, h, w = clips.shape
        if c != 3 or h % MACROBLOCK or w % MACROBLOCK:
            raise ShapeError(
                'Clips must be B x T x 3 x H x W with H and W multiples of '
                '{}, got {}.'.format(MACROBLOCK, tuple(clips.shape)))
        expected = (b, QP_LEVELS, t, h // MACROBLOCK, w // MACROBLOCK)
        if tuple(qp.shape) != expected:
            raise ShapeError('The QP tensor is {}, expected {}.'.format(
                tuple(qp.shape), expected))
        if len(gop) != t:
            raise ShapeError('The GOP has {} frames, the clips have {}.'
                             .format(len(gop), t))

        condition = self.embedding(qp).transpose(1, 2)  # B x T x Cz x h x w
        condition_frames = condition.flatten(0, 1)

        x = clips.flatten(0, 1)
        skips = []
        for block in self.encoder:
            x = block(x, condition_frames)
            skips.append(x)

        hidden = self.into_gru(x).unflatten(0, (b, t))
        if self.config.bottleneck == 'agru':
            hidden = self._recur(clips, hidden, condition, gop)
        else:
            hidden = self._convolve(hidden, condition)
        x = self.out_of_gru(hidden.flatten(0, 1))

        log_sizes = self.file_size_head(x, list(gop.picture_types) * b)

        for i, block in enumerate(self.decoder):
            if i:
                x = torch.cat([x, skips[-1 - i]], dim=1)
            x = block(x, condition_frames)
        frames = torch.sigmoid(self.to_rgb(x))

        return SurrogateOutput(
            frames=frames.unflatten(0, (b, t)),
            log_file_sizes=log_sizes.view(b, t),
        )
