"""Training the control network against the frozen surrogate.

Every outer step draws a target bandwidth per clip, samples QP maps from
the control network, and pushes them through the surrogate and the
downstream model. The control loss keeps the predicted bandwidth under
the target while the downstream prediction on the coded clip stays close
to its prediction on the raw clip. The surrogate is then fine-tuned on
fresh codec labels so that it keeps up with the QP maps the control
network produces.
"""

import asyncio
from contextlib import contextmanager
from dataclasses import dataclass, field
import math
import os
from typing import Any, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .bandwidth import bandwidth_from_filesizes
from .base import Application
from .clipstore import (
    ClipConsumer,
    ClipStore,
    batch_rng,
    macroblocks,
    stack_clips,
)
from .codec_bridge import CodecBridge
from .contrib.retry import Retry
from .control import (
    Control,
    ema_update,
    gumbel_sample,
    infer_qp,
    save_control,
    temperature,
)
from .downstream import Downstream, predict, pseudo_label
from .exceptions import Abort, ContractError, NonFiniteLossError
from .extensions import Extension
from .metrics import MetricsWriter
from .surrogate import Surrogate, save_surrogate
from .surrogate.losses import CodedBatch
from .surrogate.pretrain import METRIC_NAMES, pretrain_step
from .surrogate.qp import QpSampler, to_one_hot

__all__ = (
    'BandwidthSampler',
    'ControlBatch',
    'ControlLossWeights',
    'Networks',
    'Training',
    'bandwidth_loss',
    'bandwidth_regularizer',
    'control_loss',
    'create_training_app',
    'performance_gate',
    'performance_loss',
    'sample_bandwidth',
    'train_control',
    'train_step_control',
    'train_step_surrogate',
)

# Streams of batch_rng used by the training preprocessors.
BANDWIDTH_STREAM = 2
QP_SOURCE_STREAM = 3
QP_STREAM = 4
GUMBEL_STREAM = 5


@dataclass(frozen=True)
class ControlLossWeights:
    """Weights and tolerances of the control loss."""

    alpha_b: float = 6.0
    alpha_p: float = 2.0
    alpha_r: float = 1.0
    epsilon_p: float = 0.02
    epsilon_r: float = 0.05

    SETTINGS = {
        'alpha_b': 'ALPHA_B',
        'alpha_p': 'ALPHA_P',
        'alpha_r': 'ALPHA_R',
        'epsilon_p': 'EPSILON_P',
        'epsilon_r': 'EPSILON_R',
    }

    def __post_init__(self):
        if min(self.alpha_b, self.alpha_p, self.alpha_r) < 0:
            raise ContractError('Loss weights cannot be negative.')
        if not 0 <= self.epsilon_p < self.epsilon_r < 1:
            raise ContractError(
                'The tolerances must satisfy 0 <= EPSILON_P < EPSILON_R < 1.')

    @classmethod
    def from_settings(cls, settings):
        """Return the weights described by settings."""
        return cls(**{name: settings[key]
                      for name, key in cls.SETTINGS.items()})


class BandwidthSampler:
    """Draws target bandwidths log-uniformly from a range.

    Args:
        low (float): The lowest bandwidth, in bit/s.
        high (float): The highest bandwidth, in bit/s.
    """

    def __init__(self, low=30000.0, high=900000.0):
        """Initialize the sampler."""
        if not 0 < low < high:
            raise ContractError(
                'The bandwidth range must be positive and non-empty.')
        self.low = low
        self.high = high

    def __repr__(self):
        return '<BandwidthSampler: {:g}..{:g}>'.format(self.low, self.high)

    def sample(self, rng, size=None):
        """Return one bandwidth, or an array of ``size`` bandwidths."""
        return sample_bandwidth(rng, self.low, self.high, size)


def sample_bandwidth(rng, low=30000.0, high=900000.0, size=None):
    """Return bandwidths whose log10 is uniform over the range."""
    exponent = rng.uniform(math.log10(low), math.log10(high), size)
    bandwidth = np.clip(10.0 ** exponent, low, high)
    return float(bandwidth) if size is None else bandwidth


def _as_tensor(value, like=None):
    if isinstance(value, torch.Tensor):
        return value
    if like is not None:
        return torch.as_tensor(value, dtype=like.dtype, device=like.device)
    return torch.as_tensor(value, dtype=torch.float64)


def bandwidth_loss(predicted, target, epsilon=0.02):
    """Return ``max(0, predicted - target * (1 - epsilon))`` elementwise."""
    predicted = _as_tensor(predicted)
    target = _as_tensor(target, predicted)
    return torch.clamp(predicted - target * (1 - epsilon), min=0)


def bandwidth_regularizer(predicted, target, epsilon=0.05):
    """Return ``|min(0, predicted - target * (1 - epsilon))|`` elementwise.

    Penalizes bandwidths far below the target, which waste quality.
    """
    predicted = _as_tensor(predicted)
    target = _as_tensor(target, predicted)
    return torch.clamp(predicted - target * (1 - epsilon), max=0).abs()


def performance_gate(predicted_bandwidth, target_bandwidth, epsilon=0.02):
    """Return 1 for clips the performance loss applies to, else 0.

    A clip is open when its predicted bandwidth, inflated by
    ``epsilon``, is within the target; equality counts. The gate carries
    no gradient.
    """
    predicted_bandwidth = _as_tensor(predicted_bandwidth).detach()
    target_bandwidth = _as_tensor(target_bandwidth, predicted_bandwidth)
    open_ = target_bandwidth - predicted_bandwidth * (1 + epsilon) >= 0
    return open_.to(predicted_bandwidth.dtype).reshape(-1)


def performance_loss(prediction, pseudo, predicted_bandwidth,
                     target_bandwidth, epsilon=0.02, task='segmentation'):
    """Return the distillation loss of each clip.

    The loss is gated by :func:`performance_gate`. Segmentation uses
    the pixelwise KL divergence from the pseudo label's class
    distribution to the prediction's; flow uses the mean absolute error.

    Args:
        prediction (torch.Tensor): ``[B x] K x T x H x W`` on coded clips.
        pseudo (torch.Tensor): The same shape, on raw clips.
        predicted_bandwidth: ``[B]`` bandwidths of the coded clips.
        target_bandwidth: ``[B]`` target bandwidths.
        epsilon (float): The tolerance.
        task (str): ``segmentation`` or ``flow``.

    Returns:
        torch.Tensor: ``[B]`` losses.

    Raises:
        ContractError: If the task is unknown.

    """
    if prediction.shape != pseudo.shape:
        raise ContractError('Cannot compare {} with {}.'.format(
            tuple(prediction.shape), tuple(pseudo.shape)))
    single = prediction.dim() == 4
    if single:
        prediction = prediction.unsqueeze(0)
        pseudo = pseudo.unsqueeze(0)
    pseudo = pseudo.detach()

    if task == 'segmentation':
        divergence = F.kl_div(
            F.log_softmax(prediction, dim=1), F.log_softmax(pseudo, dim=1),
            reduction='none', log_target=True).sum(dim=1)
        per_clip = divergence.flatten(1).mean(dim=1)
    elif task == 'flow':
        per_clip = (prediction - pseudo).abs().flatten(1).mean(dim=1)
    else:
        raise ContractError('Unknown task {!r}.'.format(task))

    gate = performance_gate(
        _as_tensor(predicted_bandwidth, per_clip), target_bandwidth, epsilon)
    loss = gate * per_clip
    return loss[0] if single else loss


def control_loss(components, weights=None):
    """Return the weighted control loss.

    Args:
        components (Mapping[str, torch.Tensor]): Scalar ``bandwidth``,
            ``performance``, and ``regularizer`` losses.
        weights (Optional[ControlLossWeights]): The weights.

    Returns:
        Tuple[torch.Tensor, Dict[str, float]]: The loss and the value of
            every component.

    Raises:
        NonFiniteLossError: If a component isn't finite.
        ContractError: If a component is negative.

    """
    weights = weights or ControlLossWeights()
    alphas = {
        'bandwidth': weights.alpha_b,
        'performance': weights.alpha_p,
        'regularizer': weights.alpha_r,
    }
    values = {name: _as_tensor(components[name]) for name in alphas}
    for name, value in values.items():
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(
                'The {} loss is {}.'.format(name, value.tolist()))
        if (value < 0).any():
            raise ContractError(
                'The {} loss is negative: {}.'.format(name, value.tolist()))
    loss = sum(alphas[name] * value for name, value in values.items())
    return loss, {name: value.item() for name, value in values.items()}


class ControlBatch(NamedTuple):
    """The inputs of one control step.

    Attributes:
        clips (torch.Tensor): ``B x T x 3 x H x W``.
        bandwidth (torch.Tensor): ``B`` targets in bit/s.
        fps (Sequence[float]): Frame rate of each clip's source.
        strides (Sequence[int]): Temporal stride of each clip.
    """

    clips: torch.Tensor
    bandwidth: torch.Tensor
    fps: tuple
    strides: tuple


@dataclass
class Networks:
    """The networks trained or consulted during control training."""

    control: Any
    surrogate: Any
    downstream: Any
    ema: Any = None


@contextmanager
def frozen(module):
    """Disable gradients of a module's parameters for a block."""
    flags = [p.requires_grad for p in module.parameters()]
    for parameter in module.parameters():
        parameter.requires_grad_(False)
    try:
        yield module
    finally:
        for parameter, flag in zip(module.parameters(), flags):
            parameter.requires_grad_(flag)


def clip_bandwidths(log_file_sizes, fps, strides):
    """Return the bandwidth of each clip from predicted log10 sizes."""
    return torch.stack([
        bandwidth_from_filesizes(sizes, rate, stride=stride, log_sizes=True)
        for sizes, rate, stride in zip(log_file_sizes, fps, strides)
    ])


def train_step_control(batch, nets, optimizer, *, gop, tau, weights=None,
                       generator=None, scheduler=None, ema_decay=0.99):
    """Take one optimizer step of the control network.

    Only the control network is updated. Its EMA copy follows when
    ``nets.ema`` is set.

    Args:
        batch (ControlBatch): Clips and bandwidths.
        nets (Networks): The networks.
        optimizer (torch.optim.Optimizer): Optimizes the control network.
        gop (vidctl.codec_bridge.GopStructure): The encoder's GOP.
        tau (float): The Gumbel-Softmax temperature.
        weights (Optional[ControlLossWeights]): Loss weights.
        generator (Optional[torch.Generator]): Source of Gumbel noise.
        scheduler (Optional[torch.optim.lr_scheduler.LRScheduler]):
            Stepped after the optimizer.
        ema_decay (float): The EMA decay.

    Returns:
        dict: The step's metrics. ``gate_open`` is the fraction of clips
            the performance loss applied to.

    Raises:
        NonFiniteLossError: If the loss isn't finite. No parameter is
            updated.

    """
    weights = weights or ControlLossWeights()
    control, surrogate, downstream = nets.control, nets.surrogate, \
        nets.downstream
    control.train()
    surrogate.eval()

    with frozen(surrogate):
        logits = control(batch.clips, batch.bandwidth)
        qp = gumbel_sample(logits, tau, hard=True, generator=generator)
        coded = surrogate(batch.clips, qp, gop)
        estimate = clip_bandwidths(coded.log_file_sizes, batch.fps,
                                   batch.strides)

        pseudo = pseudo_label(downstream, batch.clips)
        prediction = predict(downstream, coded.frames)

        target = batch.bandwidth.to(estimate.dtype)
        performance = performance_loss(
            prediction, pseudo, estimate, target, weights.epsilon_p,
            downstream.task)
        components = {
            'bandwidth': bandwidth_loss(
                estimate, target, weights.epsilon_p).mean(),
            'performance': performance.mean(),
            'regularizer': bandwidth_regularizer(
                estimate, target, weights.epsilon_r).mean(),
        }
        loss, values = control_loss(components, weights)

        optimizer.zero_grad()
        loss.backward()

    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    if nets.ema is not None:
        ema_update(control, nets.ema, ema_decay)

    return {
        'kind': 'control',
        'loss': loss.item(),
        'loss_bandwidth': values['bandwidth'],
        'loss_performance': values['performance'],
        'loss_regularizer': values['regularizer'],
        'bandwidth': target.mean().item(),
        'bandwidth_predicted': estimate.mean().item(),
        'gate_open': performance_gate(
            estimate, target, weights.epsilon_p).mean().item(),
        'tau': tau,
    }


def train_step_surrogate(surrogate, optimizer, clips, qp, truth, gop,
                         weights=None):
    """Take one fine-tuning step of the surrogate.

    Args:
        surrogate (SurrogateModel): The surrogate.
        optimizer (torch.optim.Optimizer): Optimizes the surrogate.
        clips (torch.Tensor): ``B x T x 3 x H x W``.
        qp (torch.Tensor): ``B x 52 x T x h x w`` one-hot QPs.
        truth (CodedBatch): The codec's output for the QPs.
        gop (vidctl.codec_bridge.GopStructure): The encoder's GOP.
        weights (Optional[SurrogateLossWeights]): Loss weights.

    Returns:
        dict: The step's metrics.

    """
    surrogate.train()
    loss, terms = pretrain_step(surrogate, optimizer, None, clips, qp, truth,
                                gop, weights)
    record = {'kind': 'surrogate', 'loss': loss}
    record.update((METRIC_NAMES[name], value)
                  for name, value in terms.items())
    return record


class Training(Extension):
    """Settings of the alternating training loop."""

    DEFAULT_SETTINGS = {
        'TRAIN_STEPS': 6000,
        'TRAIN_BATCH_SIZE': 8,
        'TRAIN_HEAD_LR': 1e-4,
        'TRAIN_BACKBONE_LR': 1e-5,
        'TRAIN_WEIGHT_DECAY': 1e-3,
        'TRAIN_SURROGATE_LR': 1e-4,
        'TRAIN_CONTROL_QP_P': 0.5,
        'ALPHA_B': 6.0,
        'ALPHA_P': 2.0,
        'ALPHA_R': 1.0,
        'EPSILON_P': 0.02,
        'EPSILON_R': 0.05,
    }

    def validate_settings(self, settings):
        """Return problems with the training settings."""
        problems = []
        for key in ('TRAIN_STEPS', 'TRAIN_BATCH_SIZE'):
            if not isinstance(settings[key], int) or settings[key] < 1:
                problems.append('{} must be a positive integer'.format(key))
        for key in ('TRAIN_HEAD_LR', 'TRAIN_BACKBONE_LR',
                    'TRAIN_SURROGATE_LR'):
            if not settings[key] > 0:
                problems.append('{} must be positive'.format(key))
        if not 0 <= settings['TRAIN_CONTROL_QP_P'] <= 1:
            problems.append('TRAIN_CONTROL_QP_P must be a probability')
        try:
            ControlLossWeights.from_settings(settings)
        except ContractError as e:
            problems.append('ALPHA_*/EPSILON_*: {}'.format(e))
        return problems

    @property
    def loss_weights(self):
        """The configured control loss weights."""
        return ControlLossWeights.from_settings(self.app.settings)

    @property
    def bandwidth_sampler(self):
        """Draws target bandwidths from the training range."""
        return BandwidthSampler(self.app.settings['BANDWIDTH_MIN'],
                                self.app.settings['BANDWIDTH_MAX'])


@dataclass
class TrainingState:
    """What a training run holds between steps."""

    nets: Any = None
    control_optimizer: Any = None
    control_scheduler: Any = None
    surrogate_optimizer: Any = None
    sampler: Any = None
    gop: Any = None
    encoder: dict = field(default_factory=dict)
    steps: int = 0


def _control_optimizer(control, settings):
    return torch.optim.AdamW([
        {'params': list(control.backbone_parameters()),
         'lr': settings['TRAIN_BACKBONE_LR']},
        {'params': list(control.head_parameters()),
         'lr': settings['TRAIN_HEAD_LR']},
    ], weight_decay=settings['TRAIN_WEIGHT_DECAY'])


def create_training_app(settings=None, clips=None):
    """Assemble the alternating control training application.

    Each message is one batch. Preprocessors draw a target bandwidth per
    clip, choose for each clip whether the surrogate's fine-tuning QP
    map comes from the pre-training sampler or from the current control
    network, and label those QP maps through the codec. The callback
    takes a control step and then a surrogate step. The control network
    (live and EMA weights) and the fine-tuned surrogate are written to
    ``OUTPUT_DIR`` when the run ends.

    Args:
        settings (Optional[Mapping]): Settings for the application.
            ``SURROGATE_CHECKPOINT`` should name a pre-trained surrogate.
        clips (Optional[List[VideoClip]]): Downsampled training clips.

    Returns:
        Application: The assembled application.

    """
    app = Application('vidctl.train', settings)
    store = ClipStore(app)
    bridge = CodecBridge(app)
    surrogate = Surrogate(app)
    control = Control(app)
    downstream = Downstream(app)
    training = Training(app)
    Retry(app)

    app.consumer = ClipConsumer(
        store, clips,
        batch_size=app.settings['TRAIN_BATCH_SIZE'],
        steps=app.settings['TRAIN_STEPS'],
        seed=app.settings['SEED'],
    )
    state = app.state = TrainingState()
    metrics = MetricsWriter(
        os.path.join(app.settings['OUTPUT_DIR'], 'control_metrics.jsonl'))

    @app.startup
    async def build(app):
        settings = app.settings
        torch.manual_seed(settings['SEED'])
        live, ema = control.build()
        state.nets = Networks(
            control=live,
            surrogate=surrogate.build(),
            downstream=downstream.build(),
            ema=ema,
        )
        state.control_optimizer = _control_optimizer(live, settings)
        state.control_scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            state.control_optimizer, T_max=settings['TRAIN_STEPS'])
        state.surrogate_optimizer = torch.optim.AdamW(
            state.nets.surrogate.parameters(),
            lr=settings['TRAIN_SURROGATE_LR'],
            weight_decay=settings['PRETRAIN_WEIGHT_DECAY'],
        )
        # Sampled at its last step, the curriculum covers every QP.
        state.sampler = QpSampler(
            1, stages=tuple(settings['PRETRAIN_QP_STAGES']),
            shared_p=settings['PRETRAIN_QP_SHARED_P'])
        state.encoder = await app.run_blocking(bridge.versions)
        height, width = settings['CLIPS_CROP']
        state.gop = await app.run_blocking(
            bridge.probe_gop, settings['CLIPS_LENGTH'], height, width)
        app.logger.info('training.started', extra={
            'gop': state.gop.pattern,
            'steps': settings['TRAIN_STEPS'],
        })

    @app.message_preprocessor
    async def condition(app, message):
        rng = batch_rng(message, BANDWIDTH_STREAM)
        message['bandwidth'] = training.bandwidth_sampler.sample(
            rng, len(message['clips']))
        return message

    @app.message_preprocessor
    async def choose_qp(app, message):
        source_rng = batch_rng(message, QP_SOURCE_STREAM)
        qp_rng = batch_rng(message, QP_STREAM)
        p = app.settings['TRAIN_CONTROL_QP_P']
        message['qp'] = []
        message['qp_source'] = []
        for clip, bandwidth in zip(message['clips'], message['bandwidth']):
            if source_rng.random() < p:
                qp = infer_qp(state.nets.control, clip, bandwidth)
                message['qp_source'].append('control')
            else:
                qp = state.sampler.sample(1, clip.length,
                                          *macroblocks(clip), qp_rng)
                message['qp_source'].append('sampler')
            message['qp'].append(qp)
        return message

    @app.message_preprocessor
    async def label(app, message):
        message['coded'] = await asyncio.gather(*(
            app.run_blocking(bridge.encode_decode, clip, qp)
            for clip, qp in zip(message['clips'], message['qp'])))
        return message

    async def train(app, message):
        settings = app.settings
        device = settings['DEVICE']
        clips = stack_clips(message['clips'], device)
        step = message['step']
        tau = temperature(step, settings['TRAIN_STEPS'],
                          settings['CONTROL_TAU_START'],
                          settings['CONTROL_TAU_END'])
        seed = int(batch_rng(message, GUMBEL_STREAM).integers(2 ** 62))

        batch = ControlBatch(
            clips=clips,
            bandwidth=torch.as_tensor(message['bandwidth'], device=device),
            fps=tuple(clip.fps for clip in message['clips']),
            strides=tuple(clip.temporal_stride for clip in message['clips']),
        )
        control_record = train_step_control(
            batch, state.nets, state.control_optimizer,
            gop=state.gop, tau=tau, weights=training.loss_weights,
            generator=torch.Generator().manual_seed(seed),
            scheduler=state.control_scheduler,
            ema_decay=settings['CONTROL_EMA_DECAY'],
        )
        surrogate_record = train_step_surrogate(
            state.nets.surrogate, state.surrogate_optimizer, clips,
            to_one_hot(message['qp'], device=device),
            CodedBatch.stack(message['coded'], device),
            state.gop, surrogate.loss_weights,
        )
        state.steps += 1
        records = [{'step': step, **control_record},
                   {'step': step, **surrogate_record}]
        app.logger.debug('training.stepped', extra=records[0])
        return records

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
        if state.nets is None:
            return
        metadata = {'encoder': state.encoder, 'step': state.steps}
        output = app.settings['OUTPUT_DIR']
        save_control(os.path.join(output, 'control.pt'), state.nets.control,
                     state.nets.ema, metadata)
        save_surrogate(os.path.join(output, 'surrogate_finetuned.pt'),
                       state.nets.surrogate, metadata)

    return app


def train_control(clips, settings=None):
    """Train a control network on clips.

    Returns:
        Networks: The trained networks.

    Raises:
        InvalidSettings: If the settings aren't valid.

    """
    app = create_training_app(settings, clips)
    app.validate_settings(
        required=('SURROGATE_CHECKPOINT', 'CODEC_ENCODER_PATH'))
    app.run_forever()
    return app.state.nets
