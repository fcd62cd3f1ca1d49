"""A convolutional GRU whose inputs are motion-aligned reference features."""

import torch
from torch import nn

from ..exceptions import ContractError
from .layers import ConditionalGroupNorm, group_count

__all__ = ('AlignedGRU', 'blend')


def blend(hidden, update, candidate):
    """Return ``(1 - update) * hidden + update * candidate``."""
    return (1 - update) * hidden + update * candidate


class AlignedGRU(nn.Module):
    """One GRU cell for one picture type.

    The hidden state is a frame's bottleneck features. The input is the
    concatenation of the frame's aligned reference features: none for I
    frames, one for P frames, two for B frames. The update gate is
    normalized conditionally on the frame's QP embedding.

    Args:
        channels (int): Hidden channels.
        condition_dim (int): QP embedding channels.
        references (int): Reference frames per input.
        groups (int): Upper bound on normalization groups.
    """

    def __init__(self, channels, condition_dim, references, groups=32):
        """Build the layers."""
        super().__init__()
        self.references = references
        norm_groups = group_count(channels, groups)

        self.update_hidden = nn.Conv2d(channels, channels, 3, padding=1)
        self.reset_hidden = nn.Conv2d(channels, channels, 1)
        self.candidate_hidden = nn.Conv2d(channels, channels, 1)
        if references:
            inputs = channels * references
            self.update_input = nn.Conv2d(inputs, channels, 3, padding=1)
            self.reset_input = nn.Conv2d(inputs, channels, 1)
            self.candidate_input = nn.Conv2d(inputs, channels, 1)

        self.update_norm = ConditionalGroupNorm(channels, condition_dim,
                                                groups)
        self.reset_norm = nn.GroupNorm(norm_groups, channels)
        self.candidate_norm = nn.GroupNorm(norm_groups, channels)

    def gates(self, hidden, references, condition):
        """Return the update gate, reset gate, and candidate state.

        Args:
            hidden (torch.Tensor): ``N x C x h x w``.
            references (Sequence[torch.Tensor]): Aligned reference
                features, each ``N x C x h x w``.
            condition (torch.Tensor): ``N x Cz x h x w`` QP embedding.

        Raises:
            ContractError: If the number of references is wrong for the
                picture type.

        """
        if len(references) != self.references:
            raise ContractError(
                'Expected {} reference frames, got {}.'.format(
                    self.references, len(references)))

        update = self.update_hidden(hidden)
        reset = self.reset_hidden(hidden)
        if self.references:
            inputs = torch.cat(list(references), dim=1)
            update = update + self.update_input(inputs)
            reset = reset + self.reset_input(inputs)
        update = torch.sigmoid(self.update_norm(update, condition))
        reset = torch.sigmoid(self.reset_norm(reset))

        candidate = self.candidate_hidden(reset * hidden)
        if self.references:
            candidate = candidate + self.candidate_input(inputs)
        candidate = torch.tanh(self.candidate_norm(candidate))
        return update, reset, candidate

    def forward(self, hidden, references, condition):
        """Return the next hidden state."""
        update, _, candidate = self.gates(hidden, references, condition)
        return blend(hidden, update, candidate)
