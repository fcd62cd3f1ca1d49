"""Saving and loading model archives."""

import logging
import os

import torch

from .exceptions import ContractError

__all__ = ('CHECKPOINT_VERSION', 'load_checkpoint', 'save_checkpoint')

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
KINDS = ('surrogate', 'control', 'stand_in')


def save_checkpoint(path, kind, settings, state_dict, *, ema_state_dict=None,
                    metadata=None):
    """Write a model archive.

    Args:
        path (str): Where to write. Parent directories are created.
        kind (str): ``surrogate``, ``control`` or ``stand_in``.
        settings (Mapping): The settings that rebuild the model.
        state_dict (Mapping): The model's parameters.
        ema_state_dict (Optional[Mapping]): Averaged parameters.
        metadata (Optional[Mapping]): Encoder versions, step, and so on.
    """
    if kind not in KINDS:
        raise ContractError('Unknown checkpoint kind {!r}.'.format(kind))
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    torch.save({
        'version': CHECKPOINT_VERSION,
        'kind': kind,
        'settings': dict(settings),
        'state_dict': state_dict,
        'ema_state_dict': ema_state_dict,
        'metadata': dict(metadata or {}),
    }, path)
    logger.info('checkpoint.saved', extra={'path': path, 'kind': kind})


def load_checkpoint(path, kind, map_location='cpu'):
    """Read a model archive.

    Args:
        path (str): The archive.
        kind (str): The kind of model expected.
        map_location: Passed to :func:`torch.load`.

    Returns:
        dict: The archive's contents.

    Raises:
        ContractError: If the archive has no or an unknown version, or
            holds a different kind of model.

    """
    archive = torch.load(path, map_location=map_location, weights_only=False)
    if not isinstance(archive, dict) or 'version' not in archive:
        raise ContractError('{} is not a vidctl checkpoint.'.format(path))
    if archive['version'] != CHECKPOINT_VERSION:
        raise ContractError('{} has unsupported version {}.'.format(
            path, archive['version']))
    if archive.get('kind') != kind:
        raise ContractError('{} holds a {} model, expected {}.'.format(
            path, archive.get('kind'), kind))
    return archive
