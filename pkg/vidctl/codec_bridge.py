"""The bridge to the H.264 encoder.

Clips are converted to planar YUV 4:2:0, piped into an encoder process
together with their quantization parameter maps, and the elementary
stream that comes back is parsed for per-frame sizes and decoded with an
independent decoder.

Two encoders are supported. :class:`SidecarEncoder` drives an x264 build
that reads a macroblock QP map per frame from a sidecar file.
:class:`FfmpegEncoder` drives a stock ffmpeg with libx264; it handles
uniform maps and the two-pass average bitrate baseline.
"""

import abc
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
import io
import logging
import os
import shutil
import subprocess
import tempfile

import av
import numpy as np

from .bandwidth import bandwidth_from_filesizes
from .bitstream import parse_access_units
from .clipstore import MACROBLOCK, VideoClip, macroblocks
from .exceptions import BridgeError, ContractError, ShapeError
from .extensions import Extension

__all__ = (
    'CodecBridge',
    'CodedClip',
    'FfmpegEncoder',
    'GopStructure',
    'QpMap',
    'SidecarEncoder',
    'encode_decode',
    'probe_gop',
    'read_qp_sidecar',
    'rgb_to_yuv420',
    'two_pass_abr',
    'write_qp_sidecar',
    'yuv420_to_rgb',
)

logger = logging.getLogger(__name__)

QP_MIN = 0
QP_MAX = 51
ANCHORS = ('I', 'P')

# Every 8th frame is an IDR, scene cuts don't add keyframes, and the
# B-frame count doesn't adapt: the same GOP for every clip.
X264_FIXED_GOP = (
    'keyint={gop}:min-keyint={gop}:scenecut=0:b-adapt=0:bframes=3')
# I and B frames use the same QP as P frames.
X264_FLAT_QP = 'ipratio=1.0:pbratio=1.0'


@dataclass(frozen=True)
class QpMap:
    """Per-macroblock quantization parameters for a clip.

    Attributes:
        values (numpy.ndarray): ``T x h x w`` integers in [0, 51].
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ShapeError(
                'A QP map must be T x h x w, got {}.'.format(values.shape))
        if not np.issubdtype(values.dtype, np.integer):
            if not np.array_equal(values, np.round(values)):
                raise ContractError('QP values must be integers.')
        if values.size and (values.min() < QP_MIN or values.max() > QP_MAX):
            raise ContractError(
                'QP values must lie in [{}, {}].'.format(QP_MIN, QP_MAX))
        object.__setattr__(self, 'values', values.astype(np.int64))

    @classmethod
    def uniform(cls, qp, frames, height, width):
        """Return a map with the same QP for every macroblock."""
        return cls(np.full((frames, height, width), qp, dtype=np.int64))

    @property
    def shape(self):
        """``T x h x w``."""
        return self.values.shape

    @property
    def is_uniform(self):
        """Whether every macroblock of every frame has the same QP."""
        return bool((self.values == self.values.flat[0]).all())

    def __eq__(self, other):
        if not isinstance(other, QpMap):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.values.shape, self.values.tobytes()))


@dataclass(frozen=True)
class GopStructure:
    """The picture types of a clip and the frames each one refers to.

    Attributes:
        picture_types (Tuple[str, ...]): ``I``, ``P``, or ``B`` per frame,
            in display order.
        reference_map (Tuple[Tuple[int, ...], ...]): Reference frame
            indices per frame. I frames have none, P frames refer to the
            nearest earlier I or P frame, and B frames to the nearest
            earlier and later I or P frames.
    """

    picture_types: tuple
    reference_map: tuple

    @classmethod
    def from_picture_types(cls, picture_types):
        """Derive the reference map for a sequence of picture types.

        Args:
            picture_types (Iterable[str]): ``I``, ``P``, or ``B`` per frame.

        Raises:
            BridgeError: If the types don't form a valid closed GOP.
        """
        picture_types = tuple(picture_types)
        if not picture_types or picture_types[0] != 'I':
            raise BridgeError(
                'A GOP must open with an I frame, got {}.'.format(
                    ''.join(picture_types)))
        unknown = set(picture_types) - {'I', 'P', 'B'}
        if unknown:
            raise BridgeError(
                'Unknown picture types {}.'.format(sorted(unknown)))

        anchors = [t for t, kind in enumerate(picture_types)
                   if kind in ANCHORS]
        references = []
        for t, kind in enumerate(picture_types):
            if kind == 'I':
                references.append(())
                continue
            previous = [a for a in anchors if a < t]
            following = [a for a in anchors if a > t]
            if kind == 'P':
                references.append((previous[-1],))
            elif not following:
                raise BridgeError(
                    'B frame {} has no later reference in {}.'.format(
                        t, ''.join(picture_types)))
            else:
                references.append((previous[-1], following[0]))

        return cls(picture_types, tuple(references))

    @property
    def pattern(self):
        """Return the picture types as a string such as ``IBBBPBBP``."""
        return ''.join(self.picture_types)

    def __len__(self):
        return len(self.picture_types)


@dataclass(frozen=True)
class CodedClip:
    """A clip after a round trip through the encoder and decoder.

    Attributes:
        frames_hat (numpy.ndarray): Decoded ``T x 3 x H x W`` frames.
        file_sizes (numpy.ndarray): Bytes per frame, in display order.
        picture_types (Tuple[str, ...]): Per frame, in display order.
        fps (float): Frame rate of the source video.
        temporal_stride (int): Stride of the source clip.
        bitstream (bytes): The elementary stream.
    """

    frames_hat: np.ndarray
    file_sizes: np.ndarray
    picture_types: tuple
    fps: float
    temporal_stride: int
    bitstream: bytes = b''

    @property
    def total_bitrate(self):
        """Return the clip's bandwidth in bit/s."""
        return bandwidth_from_filesizes(
            self.file_sizes, self.fps, len(self.file_sizes),
            self.temporal_stride)


def _rate(clip):
    """Return the clip's playback rate as a fraction ffmpeg understands."""
    rate = Fraction(clip.fps).limit_denominator(1001) / clip.temporal_stride
    return '{}/{}'.format(rate.numerator, rate.denominator)


def rgb_to_yuv420(frames):
    """Convert RGB frames to planar YUV 4:2:0 bytes.

    Full-range BT.601 is used and chroma is averaged over 2x2 blocks.

    Args:
        frames (numpy.ndarray): ``T x 3 x H x W`` in [0, 1] with even
            ``H`` and ``W``.

    Returns:
        bytes: ``T`` frames of Y, U, and V planes.

    """
    if frames.shape[2] % 2 or frames.shape[3] % 2:
        raise ShapeError('YUV 4:2:0 needs even frame dimensions.')

    rgb = np.clip(frames.astype(np.float64), 0, 1) * 255
    r, g, b = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = 128 - 0.168736 * r - 0.331264 * g + 0.5 * b
    v = 128 + 0.5 * r - 0.418688 * g - 0.081312 * b

    def subsample(plane):
        t, h, w = plane.shape
        return plane.reshape(t, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def quantize(plane):
        return np.clip(np.round(plane), 0, 255).astype(np.uint8)

    y, u, v = quantize(y), quantize(subsample(u)), quantize(subsample(v))
    return b''.join(
        y[t].tobytes() + u[t].tobytes() + v[t].tobytes()
        for t in range(len(frames)))


def yuv420_to_rgb(y, u, v):
    """Convert full-range BT.601 YUV 4:2:0 planes to RGB frames.

    Args:
        y (numpy.ndarray): ``T x H x W`` luma.
        u (numpy.ndarray): ``T x H/2 x W/2`` blue-difference chroma.
        v (numpy.ndarray): ``T x H/2 x W/2`` red-difference chroma.

    Returns:
        numpy.ndarray: ``T x 3 x H x W`` float32 in [0, 1].

    """
    y = y.astype(np.float64)
    u = u.astype(np.float64).repeat(2, axis=1).repeat(2, axis=2) - 128
    v = v.astype(np.float64).repeat(2, axis=1).repeat(2, axis=2) - 128
    r = y + 1.402 * v
    g = y - 0.344136 * u - 0.714136 * v
    b = y + 1.772 * u
    rgb = np.stack([r, g, b], axis=1) / 255
    return np.clip(rgb, 0, 1).astype(np.float32)


def write_qp_sidecar(qp, path):
    """Write a QP map in the sidecar format.

    Each frame is ``h`` lines of ``w`` space-separated integers; frames
    are separated by a blank line.
    """
    with open(path, 'w') as f:
        for frame in qp.values:
            for row in frame:
                f.write(' '.join(str(value) for value in row) + '\n')
            f.write('\n')


def read_qp_sidecar(path):
    """Read a QP map written by :func:`write_qp_sidecar`."""
    with open(path) as f:
        blocks = f.read().strip().split('\n\n')
    return QpMap(np.array([
        [[int(value) for value in line.split()]
         for line in block.splitlines()]
        for block in blocks
    ]))


def _run(command, *, stdin=None, timeout=None):
    """Run an encoder process.

    Raises:
        BridgeError: If the process can't start, fails, or times out.
    """
    logger.debug('encoder.started', extra={'command': command})
    try:
        process = subprocess.run(
            command, input=stdin, capture_output=True, timeout=timeout)
    except FileNotFoundError as e:
        raise BridgeError(
            '{} is not installed.'.format(command[0]), command) from e
    except subprocess.TimeoutExpired as e:
        raise BridgeError(
            'The encoder timed out after {} s.'.format(timeout), command,
            (e.stderr or b'').decode(errors='replace')) from e

    if process.returncode:
        raise BridgeError(
            'The encoder exited with status {}.'.format(process.returncode),
            command, process.stderr.decode(errors='replace'))
    return process


@lru_cache(maxsize=None)
def encoder_version(command):
    """Return the first line an encoder prints about its version.

    Args:
        command (Tuple[str, ...]): The command that prints the version.
    """
    output = _run(list(command), timeout=30).stdout.decode(errors='replace')
    return output.strip().splitlines()[0] if output.strip() else 'unknown'


class Encoder(abc.ABC):
    """Turns YUV frames and a QP map into an H.264 elementary stream."""

    @abc.abstractmethod
    def encode(self, clip, qp, workdir):
        """Encode a clip.

        Args:
            clip (VideoClip): The frames to encode.
            qp (QpMap): One QP per macroblock per frame.
            workdir (str): A directory for intermediate files.

        Returns:
            bytes: The Annex-B elementary stream.

        """

    @property
    @abc.abstractmethod
    def version(self):
        """The encoder's version string."""


@dataclass(frozen=True)
class SidecarEncoder(Encoder):
    """An x264 build that reads per-macroblock QPs from a sidecar file.

    The binary is run as::

        ENCODER --width W --height H --fps RATE --gop N --preset P
                --qp-file MAP --output OUT

    with raw YUV 4:2:0 frames on its standard input.
    """

    path: str
    gop: int = 8
    preset: str = 'medium'
    timeout: float = 300

    def encode(self, clip, qp, workdir):
        """Encode with the QP map written to a sidecar file."""
        qp_file = os.path.join(workdir, 'qp.txt')
        output = os.path.join(workdir, 'out.264')
        write_qp_sidecar(qp, qp_file)
        height, width = clip.size
        command = [
            self.path,
            '--width', str(width),
            '--height', str(height),
            '--fps', _rate(clip),
            '--gop', str(self.gop),
            '--preset', self.preset,
            '--qp-file', qp_file,
            '--output', output,
        ]
        _run(command, stdin=rgb_to_yuv420(clip.frames), timeout=self.timeout)
        with open(output, 'rb') as f:
            return f.read()

    @property
    def version(self):
        """The output of ``--version``."""
        return encoder_version((self.path, '--version'))


@dataclass(frozen=True)
class FfmpegEncoder(Encoder):
    """A stock ffmpeg with libx264.

    Only uniform QP maps can be encoded. The same binary runs the
    two-pass average bitrate encodes used as a baseline.
    """

    path: str = 'ffmpeg'
    gop: int = 8
    preset: str = 'medium'
    timeout: float = 300

    def _command(self, clip, *options):
        height, width = clip.size
        return [
            self.path, '-hide_banner', '-loglevel', 'error', '-y',
            '-f', 'rawvideo', '-pix_fmt', 'yuv420p',
            '-s:v', '{}x{}'.format(width, height),
            '-r', _rate(clip),
            '-i', 'pipe:0',
            '-c:v', 'libx264', '-preset', self.preset,
            '-color_range', 'pc',
            *options,
        ]

    def encode(self, clip, qp, workdir):
        """Encode at the map's single QP.

        Raises:
            ContractError: If the QP map isn't uniform.
        """
        if not qp.is_uniform:
            raise ContractError(
                'ffmpeg encodes uniform QP maps only; set '
                'CODEC_ENCODER_PATH to an encoder that reads QP maps.')
        output = os.path.join(workdir, 'out.264')
        params = '{}:{}'.format(X264_FIXED_GOP.format(gop=self.gop),
                                X264_FLAT_QP)
        command = self._command(
            clip, '-qp', str(int(qp.values.flat[0])),
            '-x264-params', params, '-f', 'h264', output)
        _run(command, stdin=rgb_to_yuv420(clip.frames), timeout=self.timeout)
        with open(output, 'rb') as f:
            return f.read()

    def encode_abr(self, clip, bitrate, workdir):
        """Encode a clip at an average bitrate with two passes.

        Args:
            clip (VideoClip): The frames to encode.
            bitrate (float): The target in bit/s.
            workdir (str): A directory for the pass log and output.

        Returns:
            bytes: The elementary stream of the second pass.

        """
        yuv = rgb_to_yuv420(clip.frames)
        log = os.path.join(workdir, 'pass')
        output = os.path.join(workdir, 'out.264')
        params = X264_FIXED_GOP.format(gop=self.gop)
        common = ('-b:v', str(int(round(bitrate))), '-x264-params', params,
                  '-passlogfile', log)
        _run(self._command(clip, *common, '-pass', '1', '-f', 'null',
                           os.devnull),
             stdin=yuv, timeout=self.timeout)
        _run(self._command(clip, *common, '-pass', '2', '-f', 'h264', output),
             stdin=yuv, timeout=self.timeout)
        with open(output, 'rb') as f:
            return f.read()

    @property
    def version(self):
        """The output of ``-version``."""
        return encoder_version((self.path, '-version'))


def decode_h264(bitstream):
    """Decode an elementary stream with libavcodec.

    Returns:
        numpy.ndarray: ``T x 3 x H x W`` float32 frames in display
            order.

    Raises:
        BridgeError: If the stream can't be decoded.

    """
    planes = ([], [], [])
    try:
        with av.open(io.BytesIO(bitstream), format='h264') as container:
            for frame in container.decode(video=0):
                for target, plane in zip(planes, frame.planes):
                    data = np.frombuffer(plane, dtype=np.uint8)
                    data = data.reshape(plane.height, plane.line_size)
                    target.append(data[:, :plane.width])
    except av.error.FFmpegError as e:
        raise BridgeError('The stream could not be decoded: {}'.format(e)) \
            from e

    if not planes[0]:
        raise BridgeError('The stream decoded to no frames.')
    return yuv420_to_rgb(*(np.stack(plane) for plane in planes))


def _check_geometry(clip, qp):
    expected = (clip.length, *macroblocks(clip))
    if qp.shape != expected:
        raise ShapeError('The QP map is {}, the clip needs {}.'.format(
            qp.shape, expected))


def _coded_clip(clip, bitstream):
    units = sorted(parse_access_units(bitstream),
                   key=lambda unit: unit.display_key)
    frames_hat = decode_h264(bitstream)
    if len(units) != clip.length or len(frames_hat) != clip.length:
        raise BridgeError(
            'Encoded {} frames, the stream holds {} and decodes to '
            '{}.'.format(clip.length, len(units), len(frames_hat)))
    if frames_hat.shape != clip.frames.shape:
        raise BridgeError('Decoded frames are {}, expected {}.'.format(
            frames_hat.shape, clip.frames.shape))

    return CodedClip(
        frames_hat=frames_hat,
        file_sizes=np.array([unit.size for unit in units], dtype=np.int64),
        picture_types=tuple(unit.picture_type for unit in units),
        fps=clip.fps,
        temporal_stride=clip.temporal_stride,
        bitstream=bitstream,
    )


def encode_decode(clip, qp, encoder, tmpdir=None):
    """Encode a clip with a QP map, then parse and decode the stream.

    Args:
        clip (VideoClip): The clip to encode.
        qp (QpMap): One QP per macroblock per frame.
        encoder (Encoder): The encoder to run.
        tmpdir (Optional[str]): Where to put intermediate files.

    Returns:
        CodedClip: The decoded frames and per-frame sizes.

    Raises:
        ShapeError: If the map doesn't match the clip's macroblocks.
        BridgeError: If encoding, parsing, or decoding fails.

    """
    _check_geometry(clip, qp)
    with tempfile.TemporaryDirectory(prefix='vidctl-', dir=tmpdir) as workdir:
        bitstream = encoder.encode(clip, qp, workdir)
    return _coded_clip(clip, bitstream)


def two_pass_abr(clip, bitrate, encoder, tmpdir=None):
    """Encode a clip with two-pass average bitrate control.

    Args:
        clip (VideoClip): The clip to encode.
        bitrate (float): The target in bit/s.
        encoder (FfmpegEncoder): The encoder to run.
        tmpdir (Optional[str]): Where to put intermediate files.

    Returns:
        CodedClip: The decoded frames and per-frame sizes.

    """
    if not bitrate > 0:
        raise ContractError('The target bitrate must be positive.')
    with tempfile.TemporaryDirectory(prefix='vidctl-', dir=tmpdir) as workdir:
        bitstream = encoder.encode_abr(clip, bitrate, workdir)
    return _coded_clip(clip, bitstream)


def _probe_clip(frames, height, width):
    """Return a deterministic clip with texture and motion."""
    rng = np.random.default_rng(0)
    texture = rng.random((3, height, width + frames * 2), dtype=np.float32)
    return VideoClip(
        frames=np.stack([texture[:, :, 2 * t:2 * t + width]
                         for t in range(frames)]),
        fps=17.0,
        temporal_stride=1,
        source_id='gop',
    )


@lru_cache(maxsize=None)
def probe_gop(encoder, frames=8, height=64, width=64, qp=30):
    """Find the GOP an encoder produces for clips of a given length.

    A synthetic clip is encoded at a uniform QP and the picture types of
    the stream are read back. Results are cached per encoder and size.

    Returns:
        GopStructure: The picture types and reference map.

    Raises:
        BridgeError: If the encoder fails or its GOP is invalid.

    """
    clip = _probe_clip(frames, height, width)
    qp_map = QpMap.uniform(qp, frames, height // MACROBLOCK,
                           width // MACROBLOCK)
    coded = encode_decode(clip, qp_map, encoder)
    gop = GopStructure.from_picture_types(coded.picture_types)
    logger.info('gop.probed', extra={'pattern': gop.pattern})
    return gop


class CodecBridge(Extension):
    """Gives an application access to the configured encoders."""

    DEFAULT_SETTINGS = {
        'CODEC_ENCODER_PATH': None,
        'CODEC_FFMPEG_PATH': 'ffmpeg',
        'CODEC_GOP': 8,
        'CODEC_PRESET': 'medium',
        'CODEC_TIMEOUT': 300,
        'CODEC_TMPDIR': None,
    }

    def validate_settings(self, settings):
        """Return problems with the codec settings."""
        problems = []
        if not isinstance(settings['CODEC_GOP'], int) \
                or settings['CODEC_GOP'] < 1:
            problems.append('CODEC_GOP must be a positive integer')
        if not settings['CODEC_TIMEOUT'] > 0:
            problems.append('CODEC_TIMEOUT must be positive')
        path = settings['CODEC_ENCODER_PATH']
        if path is not None and shutil.which(path) is None:
            problems.append(
                'CODEC_ENCODER_PATH: {} is not an executable'.format(path))
        if shutil.which(settings['CODEC_FFMPEG_PATH']) is None:
            problems.append('CODEC_FFMPEG_PATH: {} is not an executable'
                            .format(settings['CODEC_FFMPEG_PATH']))
        tmpdir = settings['CODEC_TMPDIR']
        if tmpdir is not None and not os.path.isdir(tmpdir):
            problems.append(
                'CODEC_TMPDIR: {} is not a directory'.format(tmpdir))
        return problems

    def _options(self):
        settings = self.app.settings
        return {
            'gop': settings['CODEC_GOP'],
            'preset': settings['CODEC_PRESET'],
            'timeout': settings['CODEC_TIMEOUT'],
        }

    @property
    def ffmpeg(self):
        """The stock ffmpeg encoder."""
        return FfmpegEncoder(self.app.settings['CODEC_FFMPEG_PATH'],
                             **self._options())

    @property
    def encoder(self):
        """The encoder for QP maps: the sidecar encoder when configured."""
        path = self.app.settings['CODEC_ENCODER_PATH']
        if path is None:
            return self.ffmpeg
        return SidecarEncoder(path, **self._options())

    def encode_decode(self, clip, qp):
        """Round-trip a clip through the configured encoder."""
        return encode_decode(clip, qp, self.encoder,
                             self.app.settings['CODEC_TMPDIR'])

    def two_pass_abr(self, clip, bitrate):
        """Encode a clip with two-pass ABR through ffmpeg."""
        return two_pass_abr(clip, bitrate, self.ffmpeg,
                            self.app.settings['CODEC_TMPDIR'])

    def probe_gop(self, frames, height=64, width=64):
        """Return the GOP of the configured encoder."""
        return probe_gop(self.encoder, frames, height, width)

    def versions(self):
        """Return the version of every configured encoder."""
        versions = {'ffmpeg': self.ffmpeg.version}
        if self.app.settings['CODEC_ENCODER_PATH'] is not None:
            versions['encoder'] = self.encoder.version
        return versions
