"""Loading videos and cutting them into training and evaluation clips."""

from dataclasses import dataclass, replace
import logging
import math
import os
import re

import av
import kornia
import numpy as np
from PIL import Image
import torch
import torch.nn.functional as F

from .exceptions import (
    Abort,
    ContractError,
    EmptyInputError,
    GeometryError,
    InsufficientFramesError,
    ShapeError,
)
from .extensions import Extension

__all__ = (
    'ClipConsumer',
    'ClipStore',
    'SamplerConfig',
    'Video',
    'VideoClip',
    'augment_for_surrogate',
    'center_offset',
    'crop',
    'downsample',
    'load_video',
    'preprocess',
    'sample_clips',
    'stack_clips',
)

logger = logging.getLogger(__name__)

MACROBLOCK = 16
STRIDES = (1, 2, 3)
# Resampling and color conversion may overshoot [0, 1] by rounding.
RANGE_TOLERANCE = 1e-6

IMAGE_EXTENSIONS = ('.bmp', '.jpeg', '.jpg', '.png', '.tif', '.tiff')
STRIDE_POLICIES = ('fixed', 'random')
CROP_MODES = ('center', 'random')
CROP_ALIGNMENTS = ('clip', 'sequence')


@dataclass(frozen=True)
class Video:
    """A decoded video.

    Attributes:
        frames (numpy.ndarray): ``N x 3 x H x W`` float32 RGB in [0, 1].
        fps (float): The frame rate the frames were resampled to.
        source_id (str): Where the video came from.
    """

    frames: np.ndarray
    fps: float
    source_id: str

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class VideoClip:
    """A fixed-length clip cut from a video.

    Frames are in [0, 1], their height and width are multiples of the
    16 pixel macroblock, and the temporal stride is 1, 2 or 3.

    Attributes:
        frames (numpy.ndarray): ``T x 3 x H x W`` float32 RGB in [0, 1].
        fps (float): Frame rate of the source video.
        temporal_stride (int): Number of source frames between
            consecutive clip frames.
        source_id (str): Identifies the source video and window.
    """

    frames: np.ndarray
    fps: float
    temporal_stride: int
    source_id: str

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ContractError(
                'Clip frames must be T x 3 x H x W, got {}.'.format(
                    self.frames.shape))
        height, width = self.frames.shape[2:]
        if not height or height % MACROBLOCK or width % MACROBLOCK:
            raise GeometryError(
                'Clip frames must be multiples of {} pixels, got {}x{}.'
                .format(MACROBLOCK, height, width))
        if self.temporal_stride not in STRIDES:
            raise ContractError('The temporal stride must be one of {}, got '
                                '{}.'.format(STRIDES, self.temporal_stride))
        if not self.fps > 0:
            raise ContractError('The frame rate must be positive.')
        if self.frames.size and not (
                self.frames.min() >= -RANGE_TOLERANCE
                and self.frames.max() <= 1 + RANGE_TOLERANCE):
            raise ContractError('Clip frames must be in [0, 1].')

    @property
    def length(self):
        """Return the number of frames in the clip."""
        return self.frames.shape[0]

    @property
    def size(self):
        """Return the ``(height, width)`` of the clip's frames."""
        return self.frames.shape[2:]


@dataclass(frozen=True)
class SamplerConfig:
    """How clips are cut from videos and resized.

    Attributes:
        clip_length (int): Frames per clip.
        stride_policy (str): ``fixed`` uses ``stride`` for every clip;
            ``random`` draws each clip's stride from ``strides``.
        stride (int): The fixed temporal stride.
        strides (Tuple[int, ...]): Strides drawn by the random policy.
        downsample (int): Integer spatial downsampling factor.
        crop (Tuple[int, int]): ``(height, width)`` of the crop.
        crop_mode (str): ``center`` or ``random``.
        crop_alignment (str): ``clip`` draws a random crop per clip;
            ``sequence`` reuses one crop for every clip of a video.
    """

    clip_length: int = 8
    stride_policy: str = 'fixed'
    stride: int = 3
    strides: tuple = (1, 2, 3)
    downsample: int = 4
    crop: tuple = (224, 224)
    crop_mode: str = 'center'
    crop_alignment: str = 'clip'

    @classmethod
    def from_settings(cls, settings, *, train=False):
        """Return the sampler configuration described by settings."""
        return cls(
            clip_length=settings['CLIPS_LENGTH'],
            stride_policy=settings['CLIPS_STRIDE_POLICY'],
            stride=settings['CLIPS_STRIDE'],
            strides=tuple(settings['CLIPS_STRIDES']),
            downsample=settings['CLIPS_DOWNSAMPLE'],
            crop=tuple(settings['CLIPS_CROP']),
            crop_mode='random' if train else 'center',
            crop_alignment=settings['CLIPS_CROP_ALIGNMENT'],
        )

    def span(self, stride):
        """Return the number of source frames a clip covers."""
        return (self.clip_length - 1) * stride + 1


def _to_float(rgb):
    """Convert an ``H x W x 3`` uint8 image to ``3 x H x W`` float32."""
    return np.ascontiguousarray(
        rgb.transpose(2, 0, 1), dtype=np.float32) / 255


def _frame_number(name):
    """Sort key placing `frame2.png` before `frame10.png`."""
    digits = re.findall(r'\d+', name)
    return (int(digits[-1]) if digits else -1, name)


def _load_images(path):
    names = sorted(
        (name for name in os.listdir(path)
         if name.lower().endswith(IMAGE_EXTENSIONS)),
        key=_frame_number)
    frames = []
    for name in names:
        with Image.open(os.path.join(path, name)) as image:
            frames.append(_to_float(np.asarray(image.convert('RGB'))))
    return frames


def _load_container(path, fps):
    try:
        container = av.open(path)
    except av.error.FFmpegError as e:
        raise OSError('Unable to open {}: {}'.format(path, e)) from e

    frames, times = [], []
    with container:
        try:
            for frame in container.decode(video=0):
                frames.append(_to_float(frame.to_ndarray(format='rgb24')))
                times.append(frame.time)
        except av.error.FFmpegError as e:
            raise OSError('Unable to decode {}: {}'.format(path, e)) from e

    if not frames or None in times:
        return frames

    # Resample to the requested rate by picking the frame nearest to
    # each output timestamp.
    times = np.asarray(times) - times[0]
    targets = np.arange(0, times[-1] + 0.5 / fps, 1 / fps)
    indices = np.clip(np.searchsorted(times, targets), 0, len(frames) - 1)
    previous = np.clip(indices - 1, 0, len(frames) - 1)
    closer = np.abs(times[previous] - targets) <= np.abs(
        times[indices] - targets)
    indices = np.where(closer, previous, indices)
    return [frames[i] for i in indices]


def load_video(path, fps=17):
    """Decode a video file or a directory of images.

    Video files are resampled to ``fps`` using their timestamps. Image
    directories are read in frame number order and assumed to already
    be at ``fps``.

    Args:
        path (str): A video file or a directory of image files.
        fps (float): The frame rate to resample to.

    Returns:
        Video: The decoded frames.

    Raises:
        FileNotFoundError: If the path doesn't exist.
        OSError: If the source can't be decoded.
        EmptyInputError: If the source has no frames.

    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)

    if os.path.isdir(path):
        frames = _load_images(path)
    else:
        frames = _load_container(path, fps)

    if not frames:
        raise EmptyInputError('{} has no frames.'.format(path))

    shapes = {frame.shape for frame in frames}
    if len(shapes) != 1:
        raise ContractError(
            '{} mixes frame sizes: {}.'.format(path, sorted(shapes)))

    logger.debug('video.loaded', extra={
        'source': path, 'frames': len(frames), 'fps': fps})
    return Video(np.stack(frames), float(fps), os.fspath(path))


def _macroblock_aligned(video, block):
    height, width = video.frames.shape[2:]
    if height < block or width < block:
        raise GeometryError(
            '{} is {}x{}, smaller than a {}x{} block.'.format(
                video.source_id, height, width, block, block))
    return video.frames[:, :, :height - height % block,
                        :width - width % block]


def sample_clips(video, config, rng=None):
    """Cut a video into non-overlapping clips.

    Windows are laid end to end from the first frame. A window that would
    run past the end of the video is dropped. Frames are trimmed at the
    bottom and right so that, once downsampled, they cover whole
    macroblocks.

    Args:
        video (Video): The source video.
        config (SamplerConfig): How to sample.
        rng (Optional[numpy.random.Generator]): Used by the ``random``
            stride policy.

    Returns:
        List[VideoClip]: The clips, in source order, at source
            resolution.

    Raises:
        InsufficientFramesError: If no clip fits in the video.
        GeometryError: If the frames are smaller than one downsampled
            macroblock.

    """
    if config.stride_policy not in STRIDE_POLICIES:
        raise ContractError(
            'Unknown stride policy {!r}.'.format(config.stride_policy))

    frames = _macroblock_aligned(video, MACROBLOCK * config.downsample)

    rng = rng or np.random.default_rng()

    def next_stride():
        if config.stride_policy == 'fixed':
            return config.stride
        return int(rng.choice(config.strides))

    clips = []
    start = 0
    stride = next_stride()
    while start + config.span(stride) <= len(video):
        stop = start + config.span(stride)
        clips.append(VideoClip(
            frames=frames[start:stop:stride],
            fps=video.fps,
            temporal_stride=stride,
            source_id='{}#{}@{}'.format(video.source_id, start, stride),
        ))
        start = stop
        stride = next_stride()

    if not clips:
        raise InsufficientFramesError(
            '{} has {} frames; a clip of {} frames at stride {} needs '
            '{}.'.format(video.source_id, len(video), config.clip_length,
                         stride, config.span(stride)))

    return clips


def downsample(frames, factor):
    """Downsample frames by an integer factor with area averaging.

    Args:
        frames (numpy.ndarray): ``T x 3 x H x W`` frames.
        factor (int): The downsampling factor.

    Returns:
        numpy.ndarray: ``T x 3 x H // factor x W // factor`` frames.

    Raises:
        GeometryError: If a frame is smaller than the factor.

    """
    if factor < 1:
        raise ContractError('The downsampling factor must be at least 1.')
    if factor == 1:
        return frames

    height, width = frames.shape[2] // factor, frames.shape[3] // factor
    if not height or not width:
        raise GeometryError(
            'Frames of {}x{} cannot be downsampled by {}.'.format(
                frames.shape[2], frames.shape[3], factor))
    resized = F.interpolate(
        torch.from_numpy(frames), size=(height, width), mode='area')
    return resized.numpy()


def center_offset(size, crop_size):
    """Return the ``(top, left)`` of a centered crop."""
    return (size[0] - crop_size[0]) // 2, (size[1] - crop_size[1]) // 2


def random_offset(size, crop_size, rng):
    """Return the ``(top, left)`` of a uniformly placed crop."""
    return (int(rng.integers(0, size[0] - crop_size[0] + 1)),
            int(rng.integers(0, size[1] - crop_size[1] + 1)))


def crop(frames, crop_size, offset):
    """Crop frames.

    Raises:
        GeometryError: If the crop doesn't fit in the frames.
    """
    height, width = frames.shape[2:]
    top, left = offset
    if (crop_size[0] > height or crop_size[1] > width or top < 0 or left < 0
            or top + crop_size[0] > height or left + crop_size[1] > width):
        raise GeometryError(
            'A {}x{} crop at {} does not fit in {}x{} frames.'.format(
                crop_size[0], crop_size[1], offset, height, width))
    return frames[:, :, top:top + crop_size[0], left:left + crop_size[1]]


def preprocess(clip, config, rng=None, offset=None):
    """Downsample and crop a clip to working resolution.

    Args:
        clip (VideoClip): A clip at source resolution.
        config (SamplerConfig): The downsampling factor, crop size, and
            crop mode.
        rng (Optional[numpy.random.Generator]): Used by random crops.
        offset (Optional[Tuple[int, int]]): An explicit ``(top, left)``
            that overrides the crop mode.

    Returns:
        VideoClip: The clip at working resolution. Its frame rate,
            stride, and source are unchanged.

    Raises:
        GeometryError: If the downsampled frames are smaller than the
            crop.

    """
    if config.crop_mode not in CROP_MODES:
        raise ContractError(
            'Unknown crop mode {!r}.'.format(config.crop_mode))

    frames = downsample(clip.frames, config.downsample)
    size = frames.shape[2:]
    if size[0] < config.crop[0] or size[1] < config.crop[1]:
        raise GeometryError(
            '{}x{} frames downsampled by {} are {}x{}, smaller than the '
            '{}x{} crop.'.format(
                clip.frames.shape[2], clip.frames.shape[3], config.downsample,
                size[0], size[1], config.crop[0], config.crop[1]))

    if offset is None:
        if config.crop_mode == 'random':
            offset = random_offset(
                size, config.crop, rng or np.random.default_rng())
        else:
            offset = center_offset(size, config.crop)

    return replace(clip, frames=np.ascontiguousarray(
        crop(frames, config.crop, offset)))


def augment_for_surrogate(clip, rng, grayscale_p=0.1, reverse_p=0.5,
                          repeat_p=0.1):
    """Apply the augmentations used when pre-training the surrogate.

    Each augmentation is drawn independently, in order: a grayscale
    conversion (BT.601 luma copied to all three channels), a reversal of
    the frame order, and the repetition of one frame over its successor.

    Args:
        clip (VideoClip): The clip to augment.
        rng (numpy.random.Generator): Source of randomness.
        grayscale_p (float): Probability of the grayscale conversion.
        reverse_p (float): Probability of the reversal.
        repeat_p (float): Probability of the repetition.

    Returns:
        VideoClip: The augmented clip. Its shape is unchanged.

    """
    frames = clip.frames

    if rng.random() < grayscale_p:
        gray = kornia.color.rgb_to_grayscale(torch.from_numpy(frames))
        frames = gray.expand(-1, 3, -1, -1).numpy()

    if rng.random() < reverse_p:
        frames = frames[::-1]

    if rng.random() < repeat_p and len(frames) > 1:
        index = int(rng.integers(0, len(frames) - 1))
        frames = frames.copy()
        frames[index + 1] = frames[index]

    return replace(clip, frames=np.ascontiguousarray(frames))


def stack_clips(clips, device='cpu'):
    """Stack clips into a ``B x T x 3 x H x W`` tensor.

    Raises:
        ShapeError: If the clips differ in length or size.
    """
    if len({clip.frames.shape for clip in clips}) != 1:
        raise ShapeError('Clips in a batch must share one shape.')
    return torch.from_numpy(
        np.stack([clip.frames for clip in clips])).to(device)


class ClipStore(Extension):
    """Supplies clips to an application.

    Videos are listed in ``CLIPS_PATHS``. Each is decoded at
    ``CLIPS_FPS``, cut into clips, and downsampled once when loaded;
    crops are taken each time a clip is drawn.
    """

    DEFAULT_SETTINGS = {
        'CLIPS_PATHS': (),
        'CLIPS_FPS': 17,
        'CLIPS_LENGTH': 8,
        'CLIPS_STRIDE_POLICY': 'fixed',
        'CLIPS_STRIDE': 3,
        'CLIPS_STRIDES': (1, 2, 3),
        'CLIPS_DOWNSAMPLE': 4,
        'CLIPS_CROP': (224, 224),
        'CLIPS_CROP_ALIGNMENT': 'clip',
        'AUGMENT_GRAYSCALE_P': 0.1,
        'AUGMENT_REVERSE_P': 0.5,
        'AUGMENT_REPEAT_P': 0.1,
    }

    def __init__(self, app=None):
        """Initialize the store."""
        self._sequence_offsets = {}
        super().__init__(app)

    def validate_settings(self, settings):
        """Return problems with the clip settings."""
        problems = []
        if settings['CLIPS_STRIDE_POLICY'] not in STRIDE_POLICIES:
            problems.append('CLIPS_STRIDE_POLICY must be one of {}'.format(
                ', '.join(STRIDE_POLICIES)))
        if settings['CLIPS_CROP_ALIGNMENT'] not in CROP_ALIGNMENTS:
            problems.append('CLIPS_CROP_ALIGNMENT must be one of {}'.format(
                ', '.join(CROP_ALIGNMENTS)))
        for key in ('CLIPS_LENGTH', 'CLIPS_DOWNSAMPLE'):
            if not isinstance(settings[key], int) or settings[key] < 1:
                problems.append('{} must be a positive integer'.format(key))
        if settings['CLIPS_STRIDE'] not in STRIDES:
            problems.append('CLIPS_STRIDE must be one of {}'.format(STRIDES))
        strides = settings['CLIPS_STRIDES']
        if not strides or any(stride not in STRIDES for stride in strides):
            problems.append('CLIPS_STRIDES must be drawn from {}'.format(
                STRIDES))
        if not settings['CLIPS_FPS'] > 0:
            problems.append('CLIPS_FPS must be positive')
        crop_size = settings['CLIPS_CROP']
        if (len(crop_size) != 2
                or any(side <= 0 or side % 16 for side in crop_size)):
            problems.append(
                'CLIPS_CROP must be two positive multiples of 16')
        for key in ('AUGMENT_GRAYSCALE_P', 'AUGMENT_REVERSE_P',
                    'AUGMENT_REPEAT_P'):
            if not 0 <= settings[key] <= 1:
                problems.append('{} must be a probability'.format(key))
        for path in settings['CLIPS_PATHS']:
            if not os.path.exists(path):
                problems.append('CLIPS_PATHS: {} does not exist'.format(path))
        return problems

    def sampler_config(self, *, train=False):
        """Return the sampler configuration for the app's settings."""
        return SamplerConfig.from_settings(self.app.settings, train=train)

    def load(self, *, train=False, rng=None):
        """Load every configured video and cut it into clips.

        Training clips are downsampled but left uncropped; use
        :meth:`draw` to crop them. Evaluation clips are center-cropped.

        Returns:
            List[VideoClip]: The clips of every video, in order.

        """
        config = self.sampler_config(train=train)
        rng = rng or np.random.default_rng(self.app.settings['SEED'])
        clips = []
        for path in self.app.settings['CLIPS_PATHS']:
            video = load_video(path, self.app.settings['CLIPS_FPS'])
            for clip in sample_clips(video, config, rng):
                if train:
                    clips.append(replace(clip, frames=downsample(
                        clip.frames, config.downsample)))
                else:
                    clips.append(preprocess(clip, config))
        self.app.logger.info('clips.loaded', extra={
            'clips': len(clips), 'train': train})
        return clips

    def draw(self, clip, rng):
        """Crop a downsampled training clip to working resolution."""
        config = replace(self.sampler_config(train=True), downsample=1)
        offset = None
        if config.crop_alignment == 'sequence':
            source = clip.source_id.split('#', 1)[0]
            if source not in self._sequence_offsets:
                self._sequence_offsets[source] = random_offset(
                    clip.size, config.crop, rng)
            offset = self._sequence_offsets[source]
        return preprocess(clip, config, rng, offset)

    def augment(self, clip, rng):
        """Apply the surrogate augmentations with the app's settings."""
        settings = self.app.settings
        return augment_for_surrogate(
            clip, rng,
            grayscale_p=settings['AUGMENT_GRAYSCALE_P'],
            reverse_p=settings['AUGMENT_REVERSE_P'],
            repeat_p=settings['AUGMENT_REPEAT_P'],
        )


class ClipConsumer:
    """Produces training batches for a fixed number of steps.

    Each message is a ``dict`` with the ``step`` number, the ``seed``
    that derives every random draw made for the step, and the cropped
    ``clips``. Draws depend only on the seed and the step, so a run is
    reproducible no matter how messages are scheduled.

    Args:
        store (ClipStore): The store that crops clips.
        clips (Optional[List[VideoClip]]): Downsampled training clips.
            When omitted they are loaded from the store on the first
            read.
        batch_size (int): Clips per batch.
        steps (int): Number of batches to produce.
        seed (int): The run's seed.
        start (int): The first step, for resumed runs.
    """

    def __init__(self, store, clips=None, batch_size=8, steps=1, seed=0,
                 start=0):
        """Initialize the consumer."""
        if clips is not None and not clips:
            raise EmptyInputError('There are no clips to train on.')
        self.store = store
        self.clips = clips
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.step = start

    async def read(self):
        """Return the next batch.

        Raises:
            vidctl.exceptions.Abort: Once every step has been produced.
            EmptyInputError: If the store has no clips.
        """
        if self.step >= self.steps:
            raise Abort('consumer.exhausted')

        if self.clips is None:
            self.clips = self.store.load(
                train=True, rng=np.random.default_rng(self.seed))
            if not self.clips:
                raise EmptyInputError('There are no clips to train on.')

        step = self.step
        self.step += 1

        rng = np.random.default_rng([self.seed, step])
        indices = rng.choice(
            len(self.clips), self.batch_size,
            replace=len(self.clips) < self.batch_size)
        clips = [self.store.draw(self.clips[i], rng) for i in indices]
        return {'step': step, 'seed': self.seed, 'clips': clips}


def batch_rng(message, stream):
    """Return a generator for one random stream of a batch.

    Args:
        message (dict): A message produced by :class:`ClipConsumer`.
        stream (int): Distinguishes independent uses within a step.
    """
    return np.random.default_rng([message['seed'], message['step'], stream])


def macroblocks(clip):
    """Return the ``(rows, columns)`` of a clip's macroblock grid."""
    height, width = clip.size
    return math.ceil(height / MACROBLOCK), math.ceil(width / MACROBLOCK)
