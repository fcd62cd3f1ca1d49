"""The vidctl command line.

Every command reads a flat settings file, validates the settings of the
application it builds, writes the effective settings next to its
outputs, and then runs the application.
"""

from dataclasses import dataclass, field, replace
import logging
import os
import sys
from typing import Any

from argh import ArghParser, arg

from . import __version__
from .base import Application, IterableConsumer
from .clipstore import ClipStore, load_video, preprocess, sample_clips
from .codec_bridge import CodecBridge, write_qp_sidecar
from .config import Config
from .contrib.retry import Retry
from .control import Control, infer_qp
from .evaluation import create_evaluation_app, create_sweep_app, write_csv
from .exceptions import ContractError, InvalidSettings
from .surrogate.pretrain import create_pretrain_app
from .training import create_training_app

__all__ = ('create_encode_app', 'main', 'parser')

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2

SETTINGS_FILENAME = 'settings.py'


def _configure_logging(kwargs):
    if kwargs.get('quiet'):
        # One level above warning.
        verbosity = -1
    else:
        # argparse gives None not 0.
        verbosity = kwargs.get('verbose') or 0
    logging.basicConfig(level=logging.WARNING - verbosity * 10)


def load_settings(config=None, seed=None, out=None):
    """Return the settings given on the command line.

    Args:
        config (Optional[str]): A settings file.
        seed (Optional[int]): Overrides ``SEED``.
        out (Optional[str]): Overrides ``OUTPUT_DIR``.

    Returns:
        Config: The settings.

    """
    settings = Config()
    if config:
        settings.from_pyfile(config)
    if seed is not None:
        settings['SEED'] = seed
    if out:
        settings['OUTPUT_DIR'] = out
    return settings


def _prepare(app, required=()):
    """Validate an application and record its effective settings."""
    app.validate_settings(required)
    directory = app.settings['OUTPUT_DIR']
    os.makedirs(directory, exist_ok=True)
    app.settings.to_pyfile(os.path.join(directory, SETTINGS_FILENAME))
    return app


def _start(factory, kwargs, required=(), **options):
    _configure_logging(kwargs)
    settings = load_settings(kwargs.get('config'), kwargs.get('seed'),
                             kwargs.get('out'))
    app = _prepare(factory(settings, **options), required)
    app.logger.info('command.started', extra={
        'output_dir': app.settings['OUTPUT_DIR']})
    app.run_forever()
    return app


def pretrain_surrogate(**kwargs):
    """Pre-train the surrogate on clips labeled by the encoder."""
    _start(create_pretrain_app, kwargs,
           required=('CLIPS_PATHS', 'CODEC_ENCODER_PATH'))


def train_control(**kwargs):
    """Train the control network against a pre-trained surrogate."""
    _start(create_training_app, kwargs,
           required=('CLIPS_PATHS', 'SURROGATE_CHECKPOINT',
                     'CODEC_ENCODER_PATH'))


@arg('--no-baseline', action='store_true',
     help='evaluate the control network only')
def evaluate(*, no_baseline=False, **kwargs):
    """Evaluate the control network and a baseline on the real encoder."""
    def factory(settings):
        if no_baseline:
            settings['EVAL_BASELINE'] = None
        return create_evaluation_app(settings)
    _start(factory, kwargs, required=('CLIPS_PATHS', 'CONTROL_CHECKPOINT',
                                      'CODEC_ENCODER_PATH'))


def sweep_qp(**kwargs):
    """Measure bitrate, SSIM and the task metric at uniform QPs."""
    _start(create_sweep_app, kwargs, required=('CLIPS_PATHS',))


@dataclass
class EncodeState:
    """What an encode run holds."""

    clips: list = field(default_factory=list)
    model: Any = None
    segments: dict = field(default_factory=dict)
    rows: dict = field(default_factory=dict)


def create_encode_app(settings, video, bandwidth):
    """Assemble the application that codes a video for a bandwidth.

    The video is cut into consecutive windows of ``CLIPS_LENGTH`` frames
    at stride 1 and brought to working resolution. The control network
    chooses each window's QP map, and the encoder codes it. When the run
    ends, ``OUTPUT_DIR`` holds the concatenated bitstream, one QP sidecar
    per window, and a report of every window's bitrate and QPs.

    Args:
        settings (Mapping): Settings for the application.
        video (str): The source video or image directory.
        bandwidth (float): The target in bit/s.

    Returns:
        Application: The assembled application.

    Raises:
        InvalidSettings: If the bandwidth isn't positive.

    """
    if bandwidth is None or not bandwidth > 0:
        raise InvalidSettings(['--bandwidth must be a positive bit rate'])

    app = Application('vidctl.encode', settings)
    store = ClipStore(app)
    bridge = CodecBridge(app)
    control = Control(app)
    Retry(app)

    state = app.state = EncodeState()

    def windows():
        for index in range(len(state.clips)):
            yield {'window': index}

    app.consumer = IterableConsumer(windows())

    @app.startup
    async def load(app):
        config = replace(store.sampler_config(), stride_policy='fixed',
                         stride=1)
        source = await app.run_blocking(
            load_video, video, app.settings['CLIPS_FPS'])
        state.clips = [preprocess(clip, config)
                       for clip in sample_clips(source, config)]
        state.model = control.load()
        os.makedirs(os.path.join(app.settings['OUTPUT_DIR'], 'qp'),
                    exist_ok=True)
        app.logger.info('encode.started', extra={
            'video': video, 'windows': len(state.clips),
            'bandwidth': bandwidth})

    @app.message_preprocessor
    async def code(app, message):
        clip = state.clips[message['window']]
        message['qp'] = infer_qp(state.model, clip, bandwidth)
        message['coded'] = await app.run_blocking(
            bridge.encode_decode, clip, message['qp'])
        return message

    async def record(app, message):
        index, qp, coded = message['window'], message['qp'], message['coded']
        clip = state.clips[index]
        state.segments[index] = coded.bitstream
        write_qp_sidecar(qp, os.path.join(
            app.settings['OUTPUT_DIR'], 'qp', '{:05d}.qp'.format(index)))
        state.rows[index] = {
            'window': index,
            'source_id': clip.source_id,
            'bitrate': coded.total_bitrate,
            'within_bandwidth': coded.total_bitrate <= bandwidth,
            'qp_mean': float(qp.values.mean()),
            'qp_min': int(qp.values.min()),
            'qp_max': int(qp.values.max()),
        }
        return [state.rows[index]]

    app.callback = record

    @app.teardown
    async def write(app):
        directory = app.settings['OUTPUT_DIR']
        with open(os.path.join(directory, 'encoded.h264'), 'wb') as f:
            for index in sorted(state.segments):
                f.write(state.segments[index])
        if state.rows:
            write_csv(os.path.join(directory, 'encode_report.csv'),
                      (state.rows[i] for i in sorted(state.rows)))

    return app


@arg('video', help='the video file or image directory to code')
@arg('-b', '--bandwidth', type=float, help='the target bandwidth in bit/s')
def encode(video, *, bandwidth=None, **kwargs):
    """Code a video with the QP maps chosen by the control network."""
    _start(create_encode_app, kwargs,
           required=('CONTROL_CHECKPOINT', 'CODEC_ENCODER_PATH'),
           video=video, bandwidth=bandwidth)


def main(argv=None):
    """Dispatch the command and return the exit code.

    Settings problems and violated pre-conditions exit with 2; any other
    failure exits with 1.
    """
    try:
        parser.dispatch(argv)
    except (InvalidSettings, ContractError) as e:
        print('vidctl: {}'.format(e), file=sys.stderr)
        return EXIT_INVALID
    except Exception:
        logger.error('command.failed', exc_info=True)
        return EXIT_FAILURE
    return EXIT_OK


# Options shared by every command.
parent = ArghParser(add_help=False)
parent.add_argument('-c', '--config', help='the settings file to read')
parent.add_argument('-s', '--seed', type=int, help='override SEED')
parent.add_argument('-o', '--out', help='override OUTPUT_DIR')

# verbose and quiet will be provided under kwargs.
chatter = parent.add_mutually_exclusive_group()
chatter.add_argument('--verbose', '-v', action='count', help='verbose mode')
chatter.add_argument('--quiet', '-q', action='count', help='quiet mode')

parser = ArghParser(prog='vidctl')
parser.add_argument('--version', action='version', version=__version__)
parser.add_commands(
    [pretrain_surrogate, train_control, evaluate, sweep_qp, encode],
    func_kwargs={'parents': [parent]},
)
