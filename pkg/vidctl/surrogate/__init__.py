"""The differentiable surrogate of the H.264 codec."""

from dataclasses import replace
import os

from ..checkpoints import load_checkpoint, save_checkpoint
from ..exceptions import ContractError
from ..extensions import Extension
from .flow import FLOW_ESTIMATORS, align_features, backward_warp
from .layers import ConditionalGroupNorm, QpEmbedding
from .losses import (
    CodedBatch,
    SurrogateLossWeights,
    correlation_loss,
    surrogate_loss,
)
from .model import (
    FileSizeHead,
    SurrogateConfig,
    SurrogateModel,
    SurrogateOutput,
)
from .qp import QP_LEVELS, QpSampler, check_qp, from_one_hot, to_one_hot

__all__ = (
    'CodedBatch',
    'ConditionalGroupNorm',
    'FileSizeHead',
    'QP_LEVELS',
    'QpEmbedding',
    'QpSampler',
    'Surrogate',
    'SurrogateConfig',
    'SurrogateLossWeights',
    'SurrogateModel',
    'SurrogateOutput',
    'align_features',
    'backward_warp',
    'check_qp',
    'correlation_loss',
    'from_one_hot',
    'load_surrogate',
    'save_surrogate',
    'surrogate_loss',
    'to_one_hot',
)


def save_surrogate(path, model, metadata=None):
    """Write a surrogate archive."""
    save_checkpoint(path, 'surrogate', model.config.to_settings(),
                    model.state_dict(), metadata=metadata)


def load_surrogate(path, flow_estimator=None, map_location='cpu'):
    """Rebuild a surrogate from an archive.

    Returns:
        Tuple[SurrogateModel, dict]: The model and the archive's
            metadata.
    """
    archive = load_checkpoint(path, 'surrogate', map_location)
    # The archive holds the flow network's weights.
    config = replace(SurrogateConfig.from_settings(archive['settings']),
                     flow_pretrained=False)
    model = SurrogateModel(config, flow_estimator)
    model.load_state_dict(archive['state_dict'],
                          strict=flow_estimator is None)
    return model, archive['metadata']


_defaults = SurrogateConfig().to_settings()
_loss_defaults = {
    key: getattr(SurrogateLossWeights(), name)
    for name, key in SurrogateLossWeights.SETTINGS.items()
}


class Surrogate(Extension):
    """Builds, loads, and saves the surrogate for an application."""

    DEFAULT_SETTINGS = {
        **_defaults,
        **_loss_defaults,
        'SURROGATE_CHECKPOINT': None,
        'PRETRAIN_STEPS': 45000,
        'PRETRAIN_BATCH_SIZE': 8,
        'PRETRAIN_LR': 4e-4,
        'PRETRAIN_WEIGHT_DECAY': 1e-5,
        'PRETRAIN_WARMUP_STEPS': 1000,
        'PRETRAIN_QP_STAGES': (1, 2, 4, 8, 16),
        'PRETRAIN_QP_SHARED_P': 0.4,
    }

    def validate_settings(self, settings):
        """Return problems with the surrogate settings."""
        problems = []
        try:
            SurrogateConfig.from_settings(settings)
        except (ContractError, TypeError) as e:
            problems.append('SURROGATE_*: {}'.format(e))
        if settings['SURROGATE_FLOW'] not in FLOW_ESTIMATORS:
            problems.append('SURROGATE_FLOW must be one of {}'.format(
                ', '.join(FLOW_ESTIMATORS)))
        for key in ('PRETRAIN_STEPS', 'PRETRAIN_BATCH_SIZE'):
            if not isinstance(settings[key], int) or settings[key] < 1:
                problems.append('{} must be a positive integer'.format(key))
        if settings['PRETRAIN_WARMUP_STEPS'] < 0:
            problems.append('PRETRAIN_WARMUP_STEPS cannot be negative')
        if not settings['PRETRAIN_LR'] > 0:
            problems.append('PRETRAIN_LR must be positive')
        if not 0 <= settings['PRETRAIN_QP_SHARED_P'] <= 1:
            problems.append('PRETRAIN_QP_SHARED_P must be a probability')
        for key in SurrogateLossWeights.SETTINGS.values():
            if settings[key] < 0:
                problems.append('{} cannot be negative'.format(key))
        checkpoint = settings['SURROGATE_CHECKPOINT']
        if checkpoint is not None and not os.path.exists(checkpoint):
            problems.append(
                'SURROGATE_CHECKPOINT: {} does not exist'.format(checkpoint))
        return problems

    @property
    def config(self):
        """The surrogate's configuration."""
        return SurrogateConfig.from_settings(self.app.settings)

    @property
    def loss_weights(self):
        """The weights of the surrogate loss."""
        return SurrogateLossWeights.from_settings(self.app.settings)

    def build(self):
        """Return the configured surrogate, loaded from its checkpoint if set.

        Returns:
            SurrogateModel: On the configured device.
        """
        device = self.app.settings['DEVICE']
        checkpoint = self.app.settings['SURROGATE_CHECKPOINT']
        if checkpoint is None:
            model = SurrogateModel(self.config)
        else:
            model, metadata = load_surrogate(checkpoint)
            self.app.logger.info('surrogate.loaded', extra={
                'path': checkpoint, **metadata})
        return model.to(device)


