"""Frozen vision models whose performance the control network protects.

Two tasks are supported: semantic segmentation, predicting class logits
for every pixel of every frame, and optical flow, predicting the
displacement from every frame to the next. Small seeded networks stand
in for the real models so that everything runs without external
weights; full-size torchvision models load through adapters. Stand-ins
can be fitted briefly to synthetic scenes and saved as archives.
"""

import logging
import math
import os

import kornia
import torch
from torch import nn
import torch.nn.functional as F

from .checkpoints import load_checkpoint, save_checkpoint
from .exceptions import ContractError, ShapeError
from .extensions import Extension

__all__ = (
    'ADAPTERS',
    'Downstream',
    'DownstreamModel',
    'F1_RULES',
    'FlowStandIn',
    'SegmentationStandIn',
    'TASKS',
    'fit_stand_in',
    'load_adapter',
    'load_stand_in',
    'predict',
    'pseudo_label',
    'save_stand_in',
    'stand_in',
    'synthetic_scenes',
    'task_metric',
)

logger = logging.getLogger(__name__)

TASKS = ('segmentation', 'flow')
# Stand-in archives hold a network for either task.
ADAPTERS = {
    'deeplabv3_resnet50': 'segmentation',
    'raft_large': 'flow',
    'stand_in': None,
}
F1_RULES = ('or', 'and')

# An endpoint error above either bound makes a flow vector an outlier.
FLOW_OUTLIER_PIXELS = 3.0
FLOW_OUTLIER_RATIO = 0.05

SYNTHETIC_RECTANGLES = 3
SYNTHETIC_SHIFT = 2

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class SegmentationStandIn(nn.Module):
    """Four 3x3 convolutions from RGB to class logits."""

    def __init__(self, classes=8, width=16):
        """Build the layers."""
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, classes, 3, padding=1),
        )

    def forward(self, frames):
        """Map ``N x 3 x H x W`` frames to ``N x C x H x W`` logits."""
        return self.layers(frames)


class FlowStandIn(nn.Module):
    """Three 3x3 convolutions from a pair of frames to a flow field."""

    def __init__(self, width=16):
        """Build the layers."""
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(6, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, 2, 3, padding=1),
        )

    def forward(self, first, second):
        """Map two ``N x 3 x H x W`` batches to ``N x 2 x H x W`` flow."""
        return self.layers(torch.cat([first, second], dim=1))


class _SegmentationAdapter(nn.Module):

    def __init__(self, network):
        """Build the layers."""
        super().__init__()
        self.network = network
        self.register_buffer(
            'mean', torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer(
            'std', torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, frames):
        return self.network((frames - self.mean) / self.std)['out']


class _FlowAdapter(nn.Module):

    def __init__(self, network):
        """Build the layers."""
        super().__init__()
        self.network = network

    def forward(self, first, second):
        return self.network(first * 2 - 1, second * 2 - 1)[-1]


def stand_in(task, classes=8, seed=0):
    """Return a stand-in network initialized from a seed.

    The global random state is left untouched.
    """
    if task not in TASKS:
        raise ContractError('Unknown task {!r}.'.format(task))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if task == 'segmentation':
            return SegmentationStandIn(classes)
        return FlowStandIn()


def synthetic_scenes(task, count, generator, size=32, classes=8):
    """Return a batch of a synthetic version of a task.

    Segmentation scenes are rectangles of flat class colors, evenly
    spaced in hue, on a background class, with a little noise; the
    target is the class of every pixel. Flow scenes are pairs of noise
    textures, the second translated by up to two pixels each way; the
    target is the translation at every pixel.

    Args:
        task (str): ``segmentation`` or ``flow``.
        count (int): Scenes in the batch.
        generator (torch.Generator): Source of randomness.
        size (int): Height and width.
        classes (int): Segmentation classes.

    Returns:
        Tuple: ``N x 3 x H x W`` frames and ``N x H x W`` class indices,
            or a pair of frame batches and ``N x 2 x H x W`` flow.

    """
    if task == 'segmentation':
        hue = torch.arange(classes) * (2 * math.pi / classes)
        hsv = torch.stack([hue, torch.ones(classes),
                           torch.full((classes,), 0.9)])
        palette = kornia.color.hsv_to_rgb(hsv.view(3, classes, 1))
        palette = palette.view(3, classes).t()

        labels = torch.randint(classes, (count, 1, 1), generator=generator)
        labels = labels.expand(count, size, size).clone()
        for scene in labels:
            for _ in range(SYNTHETIC_RECTANGLES):
                top, left = torch.randint(
                    size - 4, (2,), generator=generator).tolist()
                height, width = torch.randint(
                    4, size // 2, (2,), generator=generator).tolist()
                scene[top:top + height, left:left + width] = torch.randint(
                    classes, (), generator=generator)
        frames = palette[labels].permute(0, 3, 1, 2)
        noise = torch.randn(frames.shape, generator=generator) * 0.03
        return (frames + noise).clamp(0, 1), labels
    if task == 'flow':
        first = torch.rand(count, 3, size, size, generator=generator)
        shifts = torch.randint(-SYNTHETIC_SHIFT, SYNTHETIC_SHIFT + 1,
                               (count, 2), generator=generator)
        second = torch.stack([
            torch.roll(frame, (int(dy), int(dx)), dims=(-2, -1))
            for frame, (dx, dy) in zip(first, shifts)])
        flow = shifts.float().view(count, 2, 1, 1).expand(
            count, 2, size, size)
        return (first, second), flow
    raise ContractError('Unknown task {!r}.'.format(task))


def fit_stand_in(task, classes=8, seed=0, steps=200, batch_size=16,
                 lr=3e-3):
    """Return a stand-in briefly trained on synthetic scenes.

    The network and the scenes are drawn from ``seed``, so the result
    is reproducible. Segmentation minimizes the cross entropy and flow
    the endpoint L1 error.

    Args:
        task (str): ``segmentation`` or ``flow``.
        classes (int): Segmentation classes.
        seed (int): Seeds the initial weights and the scenes.
        steps (int): Optimizer steps.
        batch_size (int): Scenes per step.
        lr (float): Adam's learning rate.

    Returns:
        nn.Module: The fitted network, in eval mode.

    """
    network = stand_in(task, classes, seed)
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(network.parameters(), lr=lr)
    network.train()
    loss = None
    for _ in range(steps):
        inputs, target = synthetic_scenes(task, batch_size, generator,
                                          classes=classes)
        if task == 'segmentation':
            loss = F.cross_entropy(network(inputs), target)
        else:
            loss = (network(*inputs) - target).abs().mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    logger.info('stand_in.fitted', extra={
        'task': task, 'steps': steps,
        'loss': None if loss is None else loss.item()})
    return network.eval()


def save_stand_in(path, network, task, classes=8, metadata=None):
    """Write a stand-in archive for ``DOWNSTREAM_ADAPTER = 'stand_in'``."""
    save_checkpoint(path, 'stand_in',
                    {'DOWNSTREAM_TASK': task, 'DOWNSTREAM_CLASSES': classes},
                    network.state_dict(), metadata=metadata)


def load_stand_in(path, task=None, classes=None):
    """Rebuild a stand-in from an archive.

    Raises:
        ContractError: If the archive was saved for another task or
            number of classes, or its weights don't match.
    """
    archive = load_checkpoint(path, 'stand_in')
    settings = archive['settings']
    saved_task = settings['DOWNSTREAM_TASK']
    saved_classes = settings['DOWNSTREAM_CLASSES']
    if task is not None and task != saved_task:
        raise ContractError('{} holds a {} stand-in, expected {}.'.format(
            path, saved_task, task))
    if (classes is not None and saved_task == 'segmentation'
            and classes != saved_classes):
        raise ContractError('{} predicts {} classes, expected {}.'.format(
            path, saved_classes, classes))
    network = stand_in(saved_task, saved_classes)
    return _load_weights(network, archive['state_dict']).eval()


def _state_dict(path):
    archive = torch.load(path, map_location='cpu', weights_only=False)
    for key in ('state_dict', 'model'):
        if isinstance(archive, dict) and key in archive:
            return archive[key]
    return archive


def _load_weights(network, state_dict, optional=()):
    """Load a state dict that must cover every parameter of the network.

    Keys the network doesn't have are tolerated only under the
    ``optional`` prefixes.

    Raises:
        ContractError: If a parameter is missing or misshapen, or a key
            is unexpected.
    """
    try:
        result = network.load_state_dict(state_dict, strict=False)
    except RuntimeError as e:
        raise ContractError(str(e)) from e
    unexpected = [key for key in result.unexpected_keys
                  if not key.startswith(tuple(optional))]
    if result.missing_keys or unexpected:
        raise ContractError(
            'The weights do not match the network: missing {}, unexpected '
            '{}.'.format(result.missing_keys, unexpected))
    return network


def load_adapter(adapter, path, classes=None, task=None):
    """Load a network from an external weight archive.

    Args:
        adapter (str): ``deeplabv3_resnet50``, ``raft_large``, or
            ``stand_in`` for an archive written by :func:`save_stand_in`.
        path (str): A file saved with :func:`torch.save` holding the
            model's state dict, directly or under ``state_dict`` or
            ``model``.
        classes (Optional[int]): Classes of a segmentation model.
        task (Optional[str]): The task a stand-in archive must hold.

    Returns:
        nn.Module: The model, taking frames in [0, 1].

    Raises:
        ContractError: If the archive doesn't hold every weight of the
            model.

    """
    if adapter == 'stand_in':
        return load_stand_in(path, task, classes)
    if adapter == 'deeplabv3_resnet50':
        from torchvision.models.segmentation import deeplabv3_resnet50
        network = deeplabv3_resnet50(weights=None, weights_backbone=None,
                                     num_classes=classes, aux_loss=False)
        # Published archives carry the auxiliary head, which isn't built.
        _load_weights(network, _state_dict(path),
                      optional=('aux_classifier.',))
        return _SegmentationAdapter(network)
    if adapter == 'raft_large':
        from torchvision.models.optical_flow import raft_large
        network = raft_large(weights=None)
        _load_weights(network, _state_dict(path))
        return _FlowAdapter(network)
    raise ContractError('Unknown adapter {!r}.'.format(adapter))


class DownstreamModel:
    """A frozen network for one task.

    Args:
        task (str): ``segmentation`` or ``flow``.
        network (nn.Module): A per-frame segmentation network, or a flow
            network taking two frames.
        classes (Optional[int]): Classes predicted by a segmentation
            network.
    """

    def __init__(self, task, network, classes=None):
        """Freeze the network."""
        if task not in TASKS:
            raise ContractError('Unknown task {!r}.'.format(task))
        self.task = task
        self.classes = classes
        self.network = network.eval()
        for parameter in self.network.parameters():
            parameter.requires_grad_(False)

    def __repr__(self):
        return '<DownstreamModel: {}>'.format(self.task)

    @property
    def frozen(self):
        """Whether no parameter can receive a gradient."""
        return not any(p.requires_grad for p in self.network.parameters())

    def to(self, device):
        """Move the network to a device and return self."""
        self.network.to(device)
        return self

    def __call__(self, clips):
        return predict(self, clips)


def predict(model, clips):
    """Run a downstream model on clips.

    Gradients flow to the clips' pixels but never to the model.

    Args:
        model (DownstreamModel): The model.
        clips (torch.Tensor): ``T x 3 x H x W`` or ``B x T x 3 x H x W``
            in [0, 1].

    Returns:
        torch.Tensor: Segmentation logits ``[B x] C x T x H x W`` or flow
            ``[B x] 2 x (T - 1) x H x W`` in pixels.

    Raises:
        ShapeError: If the clips have the wrong layout, or a flow clip
            has a single frame.

    """
    single = clips.dim() == 4
    if single:
        clips = clips.unsqueeze(0)
    if clips.dim() != 5 or clips.shape[2] != 3:
        raise ShapeError('Clips must be [B x] T x 3 x H x W, got {}.'.format(
            tuple(clips.shape)))
    b, t = clips.shape[:2]

    if model.task == 'segmentation':
        logits = model.network(clips.flatten(0, 1))
        prediction = logits.unflatten(0, (b, t)).transpose(1, 2)
    else:
        if t < 2:
            raise ShapeError('Flow needs at least two frames.')
        first = clips[:, :-1].flatten(0, 1)
        second = clips[:, 1:].flatten(0, 1)
        flow = model.network(first, second)
        prediction = flow.unflatten(0, (b, t - 1)).transpose(1, 2)
    return prediction[0] if single else prediction


def pseudo_label(model, clips):
    """Return the model's prediction on raw clips as a detached target."""
    with torch.no_grad():
        return predict(model, clips).detach()


def task_metric(prediction, pseudo, task, rule='or'):
    """Return how well a prediction agrees with the pseudo label.

    Segmentation scores the percentage of pixels whose most likely class
    matches. Flow scores the percentage of outlier vectors, whose
    endpoint error exceeds 3 pixels or 5% of the pseudo flow's
    magnitude; with ``rule='and'`` both bounds must be exceeded.

    Args:
        prediction (torch.Tensor): ``[B x] K x T x H x W``.
        pseudo (torch.Tensor): The same shape.
        task (str): ``segmentation`` or ``flow``.
        rule (str): ``or`` or ``and``.

    Returns:
        float: A percentage; higher is better for segmentation, lower
            for flow.

    """
    if prediction.shape != pseudo.shape:
        raise ShapeError('Cannot compare {} with {}.'.format(
            tuple(prediction.shape), tuple(pseudo.shape)))
    if task == 'segmentation':
        agree = prediction.argmax(dim=-4) == pseudo.argmax(dim=-4)
        return agree.float().mean().item() * 100
    if task != 'flow':
        raise ContractError('Unknown task {!r}.'.format(task))
    if rule not in F1_RULES:
        raise ContractError('Unknown outlier rule {!r}.'.format(rule))

    error = torch.linalg.vector_norm(prediction - pseudo, dim=-4)
    magnitude = torch.linalg.vector_norm(pseudo, dim=-4)
    beyond_pixels = error > FLOW_OUTLIER_PIXELS
    beyond_ratio = error > FLOW_OUTLIER_RATIO * magnitude
    if rule == 'or':
        outliers = beyond_pixels | beyond_ratio
    else:
        outliers = beyond_pixels & beyond_ratio
    return outliers.float().mean().item() * 100


class Downstream(Extension):
    """Supplies the frozen downstream model to an application."""

    DEFAULT_SETTINGS = {
        'DOWNSTREAM_TASK': 'segmentation',
        'DOWNSTREAM_CLASSES': 8,
        'DOWNSTREAM_CHECKPOINT': None,
        'DOWNSTREAM_ADAPTER': None,
        'DOWNSTREAM_SEED': 0,
        'F1_RULE': 'or',
    }

    def validate_settings(self, settings):
        """Return problems with the downstream settings."""
        problems = []
        task = settings['DOWNSTREAM_TASK']
        if task not in TASKS:
            problems.append('DOWNSTREAM_TASK must be one of {}'.format(
                ', '.join(TASKS)))
        if settings['F1_RULE'] not in F1_RULES:
            problems.append('F1_RULE must be one of {}'.format(
                ', '.join(F1_RULES)))
        classes = settings['DOWNSTREAM_CLASSES']
        if not isinstance(classes, int) or classes < 2:
            problems.append('DOWNSTREAM_CLASSES must be at least 2')

        adapter = settings['DOWNSTREAM_ADAPTER']
        checkpoint = settings['DOWNSTREAM_CHECKPOINT']
        if adapter is not None:
            if adapter not in ADAPTERS:
                problems.append('DOWNSTREAM_ADAPTER must be one of {}'.format(
                    ', '.join(ADAPTERS)))
            elif ADAPTERS[adapter] not in (None, task):
                problems.append('DOWNSTREAM_ADAPTER {} is for {}'.format(
                    adapter, ADAPTERS[adapter]))
            if checkpoint is None:
                problems.append(
                    'DOWNSTREAM_ADAPTER requires DOWNSTREAM_CHECKPOINT')
        if checkpoint is not None:
            if adapter is None:
                problems.append(
                    'DOWNSTREAM_CHECKPOINT requires DOWNSTREAM_ADAPTER')
            if not os.path.exists(checkpoint):
                problems.append('DOWNSTREAM_CHECKPOINT: {} does not exist'
                                .format(checkpoint))
        return problems

    @property
    def task(self):
        """The configured task, segmentation or flow."""
        return self.app.settings['DOWNSTREAM_TASK']

    def build(self):
        """Return the frozen model on the configured device."""
        settings = self.app.settings
        classes = settings['DOWNSTREAM_CLASSES']
        if settings['DOWNSTREAM_ADAPTER'] is None:
            network = stand_in(self.task, classes, settings['DOWNSTREAM_SEED'])
        else:
            network = load_adapter(settings['DOWNSTREAM_ADAPTER'],
                                   settings['DOWNSTREAM_CHECKPOINT'], classes,
                                   task=self.task)
        model = DownstreamModel(self.task, network, classes)
        self.app.logger.info('downstream.loaded', extra={
            'task': self.task,
            'adapter': settings['DOWNSTREAM_ADAPTER'] or 'seeded',
        })
        return model.to(settings['DEVICE'])

    def metric(self, prediction, pseudo):
        """Score a prediction with the configured task and rule."""
        return task_metric(prediction, pseudo, self.task,
                           self.app.settings['F1_RULE'])
