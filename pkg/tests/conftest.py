"""Test configuration."""

import asyncio
import shutil

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from vidctl import Application
from vidctl.clipstore import VideoClip
from vidctl.codec_bridge import CodedClip, GopStructure
from vidctl.control import ControlConfig, ControlNetwork
from vidctl.exceptions import Abort
from vidctl.surrogate.model import SurrogateConfig

requires_ffmpeg = pytest.mark.skipif(
    shutil.which('ffmpeg') is None, reason='ffmpeg is not installed')


# Target bandwidths of the trend tests, doubling above the lowest, which
# even QP 51 overshoots.
TREND_CONDITIONS = (6800.0, 68000.0, 136000.0, 272000.0, 544000.0)


def rate_model_qp(bandwidth, epsilon=0.02):
    """Return the smallest QP whose fake rate is within the margin."""
    return int(np.clip(np.ceil(52 - bandwidth * (1 - epsilon) / 13600),
                       0, 51))


@pytest.fixture(scope='session')
def trained_control():
    """Return a tiny control network fitted to the fake encoder's rate.

    Each clip and condition is taught the QP :func:`rate_model_qp`
    chooses, so the network learns how bandwidth maps to QP.
    """
    frames = torch.stack([torch.from_numpy(make_clip(seed=i).frames)
                          for i in range(3)])
    batch = frames.repeat_interleave(len(TREND_CONDITIONS), dim=0)
    bandwidth = torch.tensor(TREND_CONDITIONS * len(frames))
    target = torch.tensor([rate_model_qp(b) for b in bandwidth.tolist()])
    target = target.view(-1, 1, 1, 1).repeat(1, frames.shape[1], 2, 2)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        control = ControlNetwork(ControlConfig(
            widths=(8, 8, 8), depths=(1, 1, 1), head_channels=16,
            condition_dim=8))
        optimizer = torch.optim.Adam(control.parameters(), lr=1e-2)
        control.train()
        for _ in range(300):
            loss = F.cross_entropy(control(batch, bandwidth), target)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    return control.eval()


class MockApplication(Application):
    """A stub application that can be used for testing.

    Args:
        **settings: Keyword arguments that will be used as settings.
    """

    def __init__(self, **settings):
        """Initialize the instance."""
        super().__init__('testing')
        self.settings = settings
        self.extensions = {}


class MockConsumer:
    """A stub consumer that can be used for testing."""

    async def read(self):
        """Return an item."""
        return {'step': 0}


class MockAbortingConsumer:
    """A stub consumer that will raise Abort after one message."""

    _run = False

    async def read(self):
        """Return an item."""
        if self._run:
            raise Abort('testing', {})

        self._run = True
        return {'step': 0}


def make_clip(frames=8, height=32, width=32, fps=17.0, stride=1, seed=0,
              source_id='clip'):
    """Return a clip of smooth gradients with a little noise."""
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width),
                         indexing='ij')
    base = np.stack([xs, ys, (xs + ys) / 2]).astype(np.float32)
    clip = np.stack([np.roll(base, t, axis=2) for t in range(frames)])
    noise = rng.normal(0, 0.02, clip.shape).astype(np.float32)
    return VideoClip(np.clip(clip + noise, 0, 1), fps, stride, source_id)


def fake_coded(clip, qp_value):
    """Return what a monotone fake encoder makes of a clip at one QP.

    Every frame costs ``(52 - qp) * 100`` bytes, so a clip of ``T``
    frames at 17 fps and stride 1 runs at ``13600 * (52 - qp)`` bit/s.
    """
    return CodedClip(
        frames_hat=clip.frames,
        file_sizes=np.full(clip.length, (52 - qp_value) * 100),
        picture_types=('I',) + ('P',) * (clip.length - 1),
        fps=clip.fps,
        temporal_stride=clip.temporal_stride,
        bitstream=b'\x00\x00\x00\x01' + bytes([qp_value]),
    )


@pytest.fixture
def loop():
    """Return a fresh event loop."""
    loop = asyncio.new_event_loop()
    yield loop
    if not loop.is_closed():
        loop.close()


@pytest.fixture
def coroutine():
    """Return a coroutine function."""
    async def _inner(*args, **kwargs):
        pass
    return _inner


@pytest.fixture
def settings():
    """Create a configuration object."""
    class Config:
        A = 1
        B = 2
        lower = 3

    return Config


@pytest.fixture
def test_app():
    """Return a test application."""
    return MockApplication()


@pytest.fixture
def test_consumer():
    """Return a test consumer."""
    return MockConsumer()


@pytest.fixture
def test_consumer_with_abort():
    """Return a test consumer."""
    return MockAbortingConsumer()


@pytest.fixture
def clip():
    """Return an 8 frame 32x32 clip."""
    return make_clip()


@pytest.fixture
def clips():
    """Return three 8 frame 32x32 clips."""
    return [make_clip(seed=i, source_id='clip{}'.format(i)) for i in range(3)]


@pytest.fixture
def gop():
    """Return the GOP x264 produces for 8 frames with 3 B frames."""
    return GopStructure.from_picture_types('IBBBPBBP')


@pytest.fixture
def tiny_surrogate_config():
    """Return a surrogate small enough to run on a CPU in a test."""
    return SurrogateConfig(
        encoder_channels=(4, 4, 4, 8),
        decoder_channels=(8, 4, 4, 4),
        condition_dim=8,
        agru_channels=8,
        agru_iterations=2,
        token_dim=8,
        heads=2,
        groups=2,
        flow='zero',
        flow_pretrained=False,
    )


@pytest.fixture
def tiny_control_config():
    """Return a control network small enough to run in a test."""
    return ControlConfig(
        widths=(8, 8, 8),
        depths=(1, 1, 1),
        head_channels=16,
        condition_dim=8,
    )


@pytest.fixture
def fake_codec(monkeypatch):
    """Replace the encoder with :func:`fake_coded`.

    QP maps are coded at their rounded mean QP.

    Returns:
        dict: Calls made to the fake, by kind.
    """
    from vidctl.codec_bridge import CodecBridge

    calls = {'encode_decode': [], 'two_pass_abr': []}

    def encode_decode(self, clip, qp):
        calls['encode_decode'].append(qp)
        return fake_coded(clip, int(round(float(qp.values.mean()))))

    def two_pass_abr(self, clip, bitrate):
        calls['two_pass_abr'].append(bitrate)
        # The smallest QP whose rate fits the target.
        qp = int(np.clip(np.ceil(52 - bitrate / 13600), 0, 51))
        return fake_coded(clip, qp)

    monkeypatch.setattr(CodecBridge, 'encode_decode', encode_decode)
    monkeypatch.setattr(CodecBridge, 'two_pass_abr', two_pass_abr)
    monkeypatch.setattr(
        CodecBridge, 'probe_gop',
        lambda self, frames, height=64, width=64:
        GopStructure.from_picture_types('IBBBPBBP'[:frames]))
    monkeypatch.setattr(CodecBridge, 'versions',
                        lambda self: {'ffmpeg': 'fake'})
    return calls


@pytest.fixture(scope='session')
def fitted_stand_ins(tmp_path_factory):
    """Return stand-in archives fitted to synthetic scenes, by task."""
    from vidctl.downstream import fit_stand_in, save_stand_in

    directory = tmp_path_factory.mktemp('stand_ins')
    paths = {}
    for task in ('segmentation', 'flow'):
        path = str(directory / '{}.pt'.format(task))
        save_stand_in(path, fit_stand_in(task), task,
                      metadata={'fitted': 'synthetic'})
        paths[task] = path
    return paths


@pytest.fixture(name='make_clip')
def make_clip_fixture():
    """Return the clip factory."""
    return make_clip
