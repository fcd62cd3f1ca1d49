"""Pre-training the surrogate on batches labeled online by the codec."""

import asyncio
from dataclasses import dataclass, field
import math
import os
from typing import Any

import torch

from ..base import Application
from ..clipstore import (
    ClipConsumer,
    ClipStore,
    batch_rng,
    macroblocks,
    stack_clips,
)
from ..codec_bridge import CodecBridge
from ..contrib.retry import Retry
from ..exceptions import Abort, NonFiniteLossError
from ..metrics import MetricsWriter
from . import Surrogate, save_surrogate
from .losses import CodedBatch, surrogate_loss
from .qp import QpSampler, to_one_hot

__all__ = (
    'PretrainState',
    'create_pretrain_app',
    'pretrain_step',
    'pretrain_surrogate',
    'warmup_cosine',
)

# Streams of batch_rng used by the pre-training preprocessors.
AUGMENT_STREAM = 0
QP_STREAM = 1

METRIC_NAMES = {
    'ssim': 'loss_ssim',
    'focal_frequency': 'loss_ff',
    'rho_video': 'loss_rho_video',
    'rho_size': 'loss_rho_size',
    'l1': 'loss_l1',
}


def warmup_cosine(warmup_steps, total_steps):
    """Return a learning-rate factor: linear warm-up, then cosine decay.

    Args:
        warmup_steps (int): Steps to ramp from 0 to 1.
        total_steps (int): Steps after which the factor reaches 0.

    Returns:
        Callable[[int], float]: For :class:`torch.optim.lr_scheduler.LambdaLR`.
    """
    def factor(step):
        if step < warmup_steps:
            return (step + 1) / warmup_steps
        remaining = max(1, total_steps - warmup_steps)
        progress = min(1.0, (step - warmup_steps) / remaining)
        return 0.5 * (1 + math.cos(math.pi * progress))
    return factor


@dataclass
class PretrainState:
    """What a pre-training run holds between steps."""

    model: Any = None
    optimizer: Any = None
    scheduler: Any = None
    sampler: Any = None
    gop: Any = None
    encoder: dict = field(default_factory=dict)
    steps: int = 0


def pretrain_step(model, optimizer, scheduler, clips, qp, truth, gop,
                  weights=None):
    """Take one optimizer step on the surrogate loss.

    Args:
        model (SurrogateModel): The surrogate, in training mode.
        optimizer (torch.optim.Optimizer): Its optimizer.
        scheduler (Optional[torch.optim.lr_scheduler.LRScheduler]):
            Stepped after the optimizer.
        clips (torch.Tensor): ``B x T x 3 x H x W``.
        qp (torch.Tensor): ``B x 52 x T x h x w`` one-hot QPs.
        truth (CodedBatch): The codec's output for the clips.
        gop (vidctl.codec_bridge.GopStructure): The encoder's GOP.
        weights (Optional[SurrogateLossWeights]): Loss weights.

    Returns:
        Tuple[float, Dict[str, float]]: The loss and its terms.

    Raises:
        NonFiniteLossError: If the loss isn't finite. No parameter is
            updated.

    """
    prediction = model(clips, qp, gop)
    loss, terms = surrogate_loss(prediction, truth, weights)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            'The surrogate loss is {}.'.format(loss.item()))

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return loss.item(), terms


def create_pretrain_app(settings=None, clips=None):
    """Assemble the surrogate pre-training application.

    Each message is one batch. Preprocessors augment the clips, draw a
    QP map per clip from the curriculum, and label the clips through the
    codec, several encodes at a time. The callback takes one optimizer
    step and returns a metrics record. The surrogate is written to
    ``OUTPUT_DIR/surrogate.pt`` when the run ends.

    Args:
        settings (Optional[Mapping]): Settings for the application.
        clips (Optional[List[VideoClip]]): Downsampled training clips.
            Loaded from ``CLIPS_PATHS`` when omitted.

    Returns:
        Application: The assembled application. Call
            :meth:`~vidctl.base.Application.validate_settings` before
            running it.

    """
    app = Application('vidctl.pretrain', settings)
    store = ClipStore(app)
    bridge = CodecBridge(app)
    surrogate = Surrogate(app)
    Retry(app)

    app.consumer = ClipConsumer(
        store, clips,
        batch_size=app.settings['PRETRAIN_BATCH_SIZE'],
        steps=app.settings['PRETRAIN_STEPS'],
        seed=app.settings['SEED'],
    )
    state = app.state = PretrainState()
    metrics = MetricsWriter(
        os.path.join(app.settings['OUTPUT_DIR'], 'pretrain_metrics.jsonl'))

    @app.startup
    async def build(app):
        torch.manual_seed(app.settings['SEED'])
        state.model = surrogate.build()
        state.model.train()
        state.optimizer = torch.optim.AdamW(
            state.model.parameters(),
            lr=app.settings['PRETRAIN_LR'],
            weight_decay=app.settings['PRETRAIN_WEIGHT_DECAY'],
        )
        state.scheduler = torch.optim.lr_scheduler.LambdaLR(
            state.optimizer,
            warmup_cosine(app.settings['PRETRAIN_WARMUP_STEPS'],
                          app.settings['PRETRAIN_STEPS']),
        )
        state.sampler = QpSampler(
            app.settings['PRETRAIN_STEPS'],
            stages=tuple(app.settings['PRETRAIN_QP_STAGES']),
            shared_p=app.settings['PRETRAIN_QP_SHARED_P'],
        )
        state.encoder = await app.run_blocking(bridge.versions)
        height, width = app.settings['CLIPS_CROP']
        state.gop = await app.run_blocking(
            bridge.probe_gop, app.settings['CLIPS_LENGTH'], height, width)
        app.logger.info('pretrain.started', extra={
            'gop': state.gop.pattern,
            'steps': app.settings['PRETRAIN_STEPS'],
        })

    @app.message_preprocessor
    async def augment(app, message):
        rng = batch_rng(message, AUGMENT_STREAM)
        message['clips'] = [store.augment(clip, rng)
                            for clip in message['clips']]
        return message

    @app.message_preprocessor
    async def sample_qp(app, message):
        rng = batch_rng(message, QP_STREAM)
        message['qp'] = [
            state.sampler.sample(message['step'], clip.length,
                                 *macroblocks(clip), rng)
            for clip in message['clips']
        ]
        return message

    @app.message_preprocessor
    async def label(app, message):
        message['coded'] = await asyncio.gather(*(
            app.run_blocking(bridge.encode_decode, clip, qp)
            for clip, qp in zip(message['clips'], message['qp'])))
        return message

    async def train(app, message):
        device = app.settings['DEVICE']
        loss, terms = pretrain_step(
            state.model, state.optimizer, state.scheduler,
            stack_clips(message['clips'], device),
            to_one_hot(message['qp'], device=device),
            CodedBatch.stack(message['coded'], device),
            state.gop,
            surrogate.loss_weights,
        )
        state.steps += 1
        record = {
            'step': message['step'],
            'loss': loss,
            'qp_low': state.sampler.qp_range(message['step'])[0],
        }
        record.update((METRIC_NAMES[name], value)
                      for name, value in terms.items())
        app.logger.debug('pretrain.stepped', extra=record)
        return [record]

    app.callback = train
    app.result_postprocessor(metrics.postprocess)

    @app.error
    async def skip_non_finite(app, message, exc):
        if isinstance(exc, NonFiniteLossError):
            app.logger.error('step.skipped', extra={
                'step': message['step'], 'error': str(exc)})
            raise Abort('step.skipped', message)

    @app.teardown
    async def save(app):
        if state.model is None:
            return
        path = os.path.join(app.settings['OUTPUT_DIR'], 'surrogate.pt')
        save_surrogate(path, state.model, metadata={
            'encoder': state.encoder,
            'step': state.steps,
        })

    return app


def pretrain_surrogate(clips, settings=None):
    """Pre-train a surrogate on clips.

    Args:
        clips (List[VideoClip]): Downsampled training clips.
        settings (Optional[Mapping]): Settings for the run.

    Returns:
        SurrogateModel: The trained surrogate.

    Raises:
        InvalidSettings: If the settings aren't valid.

    """
    app = create_pretrain_app(settings, clips)
    app.validate_settings(required=('CODEC_ENCODER_PATH',))
    app.run_forever()
    return app.state.model
