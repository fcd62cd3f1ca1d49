"""Test the bridge to the external encoder."""

import numpy as np
import pytest

from vidctl import Application
from vidctl.codec_bridge import (
    CodecBridge,
    FfmpegEncoder,
    GopStructure,
    QpMap,
    SidecarEncoder,
    _check_geometry,
    _run,
    encode_decode,
    probe_gop,
    read_qp_sidecar,
    rgb_to_yuv420,
    two_pass_abr,
    write_qp_sidecar,
    yuv420_to_rgb,
)
from vidctl.exceptions import BridgeError, ContractError, ShapeError

from conftest import requires_ffmpeg


def test_qp_map_uniform():
    """Test QpMap.uniform."""
    qp = QpMap.uniform(30, 8, 2, 3)
    assert qp.shape == (8, 2, 3)
    assert qp.is_uniform
    assert (qp.values == 30).all()


def test_qp_map_not_uniform():
    """Test QpMap.is_uniform on a varying map."""
    values = np.full((2, 2, 2), 20)
    values[1, 1, 1] = 21
    assert not QpMap(values).is_uniform


def test_qp_map_equality():
    """Test that maps with equal values are equal and hash alike."""
    first = QpMap.uniform(10, 2, 2, 2)
    second = QpMap(np.full((2, 2, 2), 10.0))
    assert first == second
    assert hash(first) == hash(second)
    assert first != QpMap.uniform(11, 2, 2, 2)


@pytest.mark.parametrize('values, exception', (
    (np.zeros((2, 2)), ShapeError),
    (np.full((1, 2, 2), 52), ContractError),
    (np.full((1, 2, 2), -1), ContractError),
    (np.full((1, 2, 2), 10.5), ContractError),
))
def test_qp_map_invalid(values, exception):
    """Test that invalid maps are rejected."""
    with pytest.raises(exception):
        QpMap(values)


def test_gop_from_picture_types():
    """Test the reference map of a GOP with B frames."""
    gop = GopStructure.from_picture_types('IBBBPBBP')

    assert gop.pattern == 'IBBBPBBP'
    assert len(gop) == 8
    assert gop.reference_map == (
        (), (0, 4), (0, 4), (0, 4), (0,), (4, 7), (4, 7), (4,))


def test_gop_low_delay():
    """Test the reference map of a GOP without B frames."""
    gop = GopStructure.from_picture_types('IPPP')
    assert gop.reference_map == ((), (0,), (1,), (2,))


@pytest.mark.parametrize('types', ('PIPP', 'IPPB', 'IPXP', ''))
def test_gop_invalid(types):
    """Test that invalid GOPs raise BridgeError."""
    with pytest.raises(BridgeError):
        GopStructure.from_picture_types(types)


def test_qp_sidecar(tmpdir):
    """Test the sidecar file format."""
    values = np.arange(2 * 2 * 3).reshape(2, 2, 3)
    path = str(tmpdir.join('qp.txt'))

    write_qp_sidecar(QpMap(values), path)

    with open(path) as f:
        assert f.read() == '0 1 2\n3 4 5\n\n6 7 8\n9 10 11\n\n'
    assert read_qp_sidecar(path) == QpMap(values)


def test_rgb_to_yuv420_size(make_clip):
    """Test that 4:2:0 frames take 1.5 bytes per pixel."""
    clip = make_clip(frames=2, height=16, width=32)
    assert len(rgb_to_yuv420(clip.frames)) == 2 * 16 * 32 * 3 // 2


def test_rgb_to_yuv420_odd():
    """Test that odd dimensions are rejected."""
    with pytest.raises(ShapeError):
        rgb_to_yuv420(np.zeros((1, 3, 15, 16)))


def test_yuv_roundtrip_gray():
    """Test that gray survives the color conversion."""
    frames = np.full((1, 3, 4, 4), 0.5, dtype=np.float32)
    data = np.frombuffer(rgb_to_yuv420(frames), dtype=np.uint8)
    y = data[:16].reshape(1, 4, 4)
    u = data[16:20].reshape(1, 2, 2)
    v = data[20:].reshape(1, 2, 2)

    assert (np.abs(y.astype(int) - 128) <= 1).all()
    assert (u == 128).all() and (v == 128).all()
    np.testing.assert_allclose(yuv420_to_rgb(y, u, v), frames, atol=1 / 255)


def test_check_geometry(make_clip):
    """Test that QP maps must cover the clip's macroblocks."""
    clip = make_clip(height=32, width=48)
    _check_geometry(clip, QpMap.uniform(20, 8, 2, 3))

    with pytest.raises(ShapeError):
        _check_geometry(clip, QpMap.uniform(20, 8, 2, 2))
    with pytest.raises(ShapeError):
        _check_geometry(clip, QpMap.uniform(20, 4, 2, 3))


def test_ffmpeg_rejects_qp_maps(make_clip, tmpdir):
    """Test that ffmpeg only encodes uniform maps."""
    values = np.full((8, 2, 2), 20)
    values[0, 0, 0] = 30
    with pytest.raises(ContractError):
        FfmpegEncoder().encode(make_clip(), QpMap(values), str(tmpdir))


def test_two_pass_abr_bitrate(make_clip):
    """Test that the target bitrate must be positive."""
    with pytest.raises(ContractError):
        two_pass_abr(make_clip(), 0, FfmpegEncoder())


def test_run_missing_binary():
    """Test that a missing encoder raises BridgeError."""
    with pytest.raises(BridgeError) as e:
        _run(['vidctl-no-such-encoder'])
    assert e.value.command == ['vidctl-no-such-encoder']


def test_run_failure():
    """Test that a failing encoder raises BridgeError with its stderr."""
    with pytest.raises(BridgeError) as e:
        _run(['sh', '-c', 'echo broken >&2; exit 3'])
    assert 'status 3' in str(e.value)
    assert 'broken' in e.value.stderr


def test_sidecar_encoder_command(make_clip, tmpdir, monkeypatch):
    """Test the command line of the sidecar encoder."""
    commands = []

    def run(command, *, stdin=None, timeout=None):
        commands.append(command)
        output = command[command.index('--output') + 1]
        with open(output, 'wb') as f:
            f.write(b'stream')

    monkeypatch.setattr('vidctl.codec_bridge._run', run)
    encoder = SidecarEncoder('x264-qpmap', gop=8, preset='fast')
    clip = make_clip(stride=3)

    actual = encoder.encode(clip, QpMap.uniform(20, 8, 2, 2), str(tmpdir))

    assert actual == b'stream'
    command = commands[0]
    assert command[0] == 'x264-qpmap'
    assert command[command.index('--fps') + 1] == '17/3'
    assert command[command.index('--width') + 1] == '32'
    assert command[command.index('--preset') + 1] == 'fast'
    assert read_qp_sidecar(command[command.index('--qp-file') + 1]) == \
        QpMap.uniform(20, 8, 2, 2)


def _bridge(**settings):
    return CodecBridge(Application('testing', settings))


def test_codec_bridge_encoder():
    """Test that the sidecar encoder is used when configured."""
    assert isinstance(_bridge().encoder, FfmpegEncoder)
    encoder = _bridge(CODEC_ENCODER_PATH='x264-qpmap').encoder
    assert isinstance(encoder, SidecarEncoder)
    assert encoder.path == 'x264-qpmap'


@pytest.mark.parametrize('key, value', (
    ('CODEC_GOP', 0),
    ('CODEC_TIMEOUT', 0),
    ('CODEC_ENCODER_PATH', 'vidctl-no-such-encoder'),
    ('CODEC_TMPDIR', '/does/not/exist'),
))
def test_codec_bridge_validate_settings(key, value):
    """Test that invalid codec settings are reported."""
    bridge = _bridge(**{key: value})
    problems = bridge.validate_settings(bridge.app.settings)
    assert any(key in problem for problem in problems)


@requires_ffmpeg
def test_encode_decode(make_clip):
    """Test a round trip through ffmpeg."""
    clip = make_clip(frames=8, height=32, width=32)

    coded = encode_decode(clip, QpMap.uniform(20, 8, 2, 2), FfmpegEncoder())

    assert coded.frames_hat.shape == clip.frames.shape
    assert len(coded.file_sizes) == 8
    assert (coded.file_sizes > 0).all()
    assert coded.picture_types[0] == 'I'
    assert coded.total_bitrate > 0
    assert np.abs(coded.frames_hat - clip.frames).mean() < 0.1


@requires_ffmpeg
def test_bitrate_falls_with_qp(make_clip):
    """Test that a coarser quantizer costs fewer bits."""
    clip = make_clip()
    rates = [
        encode_decode(clip, QpMap.uniform(qp, 8, 2, 2),
                      FfmpegEncoder()).total_bitrate
        for qp in (10, 30, 50)
    ]
    assert rates[0] > rates[1] > rates[2]


@requires_ffmpeg
def test_probe_gop():
    """Test that the probed GOP is fixed and opens with an I frame."""
    gop = probe_gop(FfmpegEncoder(), 8, 64, 64)
    assert len(gop) == 8
    assert gop.picture_types[0] == 'I'
