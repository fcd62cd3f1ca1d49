"""Test the surrogate model."""

from dataclasses import replace

import pytest
import torch

from vidctl import Application
from vidctl.codec_bridge import GopStructure, QpMap
from vidctl.exceptions import ContractError, ShapeError
from vidctl.surrogate import (
    Surrogate,
    SurrogateConfig,
    SurrogateModel,
    load_surrogate,
    save_surrogate,
    to_one_hot,
)
from vidctl.surrogate import model as surrogate_model
from vidctl.surrogate.flow import ZeroFlow
from vidctl.surrogate.model import FileSizeHead


def _inputs(batch=2, frames=8, size=32, qp=30):
    clips = torch.rand(batch, frames, 3, size, size)
    blocks = size // 16
    return clips, to_one_hot([QpMap.uniform(qp, frames, blocks, blocks)]
                             * batch)


def test_surrogate_output(tiny_surrogate_config, gop):
    """Test the shapes and ranges of the predictions."""
    torch.manual_seed(0)
    model = SurrogateModel(tiny_surrogate_config)
    clips, qp = _inputs()

    output = model(clips, qp, gop)

    assert tuple(output.frames.shape) == (2, 8, 3, 32, 32)
    assert tuple(output.log_file_sizes.shape) == (2, 8)
    assert ((output.frames >= 0) & (output.frames <= 1)).all()
    assert torch.isfinite(output.log_file_sizes).all()


def test_surrogate_gradients_reach_qp(tiny_surrogate_config, gop):
    """Test that the QP input is differentiable."""
    torch.manual_seed(0)
    model = SurrogateModel(tiny_surrogate_config)
    clips, qp = _inputs(batch=1)
    qp.requires_grad_(True)

    output = model(clips, qp, gop)
    (output.frames.mean() + output.log_file_sizes.sum()).backward()

    assert qp.grad is not None
    assert qp.grad.abs().sum() > 0


def test_surrogate_low_delay(tiny_surrogate_config):
    """Test a GOP without B frames."""
    model = SurrogateModel(tiny_surrogate_config)
    clips, qp = _inputs(batch=1, frames=4)
    output = model(clips, qp, GopStructure.from_picture_types('IPPP'))
    assert tuple(output.log_file_sizes.shape) == (1, 4)


class CountingFlow(ZeroFlow):
    """Reports no motion and counts the frame pairs it was asked about."""

    def __init__(self):
        super().__init__()
        self.calls = 0

    def forward(self, target, reference):
        self.calls += 1
        return super().forward(target, reference)


def test_surrogate_flow_once_per_pair(tiny_surrogate_config, gop,
                                      monkeypatch):
    """Test that flow is estimated once and aligned every iteration."""
    aligned = []
    original = surrogate_model.align_features

    def align(*args, **kwargs):
        aligned.append(kwargs['flow'])
        return original(*args, **kwargs)

    monkeypatch.setattr(surrogate_model, 'align_features', align)
    flow = CountingFlow()
    model = SurrogateModel(tiny_surrogate_config, flow_estimator=flow)
    clips, qp = _inputs(batch=1)

    model(clips, qp, gop)

    pairs = sum(len(references) for references in gop.reference_map)
    assert pairs
    assert flow.calls == pairs
    assert len(aligned) == pairs * tiny_surrogate_config.agru_iterations


def test_surrogate_residual3d(tiny_surrogate_config, gop):
    """Test the bottleneck of 3D residual blocks."""
    torch.manual_seed(0)
    config = replace(tiny_surrogate_config, bottleneck='residual3d')
    model = SurrogateModel(config, flow_estimator=CountingFlow())
    clips, qp = _inputs(batch=2)
    qp.requires_grad_(True)

    output = model(clips, qp, gop)
    (output.frames.mean() + output.log_file_sizes.sum()).backward()

    assert model.flow is None
    assert not hasattr(model, 'gru')
    assert len(model.residual) == 3
    assert tuple(output.frames.shape) == (2, 8, 3, 32, 32)
    assert tuple(output.log_file_sizes.shape) == (2, 8)
    assert qp.grad.abs().sum() > 0


def test_surrogate_residual3d_checkpoint(tiny_surrogate_config, gop, tmpdir):
    """Test that the bottleneck choice is saved with the model."""
    config = replace(tiny_surrogate_config, bottleneck='residual3d')
    path = str(tmpdir.join('surrogate.pt'))
    save_surrogate(path, SurrogateModel(config))

    loaded, _ = load_surrogate(path)

    assert loaded.config.bottleneck == 'residual3d'
    assert loaded.flow is None


@pytest.mark.parametrize('size, qp_blocks, frames', (
    (24, 1, 8),
    (32, 1, 8),
    (32, 2, 4),
))
def test_surrogate_shape_errors(tiny_surrogate_config, gop, size, qp_blocks,
                                frames):
    """Test that clips, QPs, and the GOP must agree."""
    model = SurrogateModel(tiny_surrogate_config)
    clips = torch.rand(1, frames, 3, size, size)
    qp = to_one_hot([QpMap.uniform(30, frames, qp_blocks, qp_blocks)])
    with pytest.raises(ShapeError):
        model(clips, qp, gop)


def test_file_size_head_unknown_type():
    """Test that unknown picture types are rejected."""
    head = FileSizeHead(8, token_dim=8, heads=2)
    with pytest.raises(ContractError):
        head(torch.randn(1, 8, 2, 2), ['S'])


@pytest.mark.parametrize('kwargs', (
    {'encoder_channels': (4, 4, 8)},
    {'token_dim': 10, 'heads': 4},
    {'agru_iterations': 0},
    {'bottleneck': 'lstm'},
))
def test_surrogate_config_invalid(kwargs):
    """Test that invalid sizes are rejected."""
    with pytest.raises(ContractError):
        SurrogateConfig(**kwargs)


def test_surrogate_config_settings(tiny_surrogate_config):
    """Test that configurations survive a trip through settings."""
    settings = tiny_surrogate_config.to_settings()
    assert settings['SURROGATE_AGRU_CHANNELS'] == 8
    assert SurrogateConfig.from_settings(settings) == tiny_surrogate_config


def test_save_load_surrogate(tiny_surrogate_config, gop, tmpdir):
    """Test that a loaded surrogate predicts what the saved one did."""
    torch.manual_seed(0)
    model = SurrogateModel(tiny_surrogate_config).eval()
    path = str(tmpdir.join('models', 'surrogate.pt'))
    clips, qp = _inputs(batch=1)

    save_surrogate(path, model, metadata={'step': 3})
    loaded, metadata = load_surrogate(path)
    replaced, _ = load_surrogate(path, flow_estimator=ZeroFlow())

    assert metadata == {'step': 3}
    assert loaded.config == tiny_surrogate_config
    with torch.no_grad():
        expected = model(clips, qp, gop)
        for other in (loaded.eval(), replaced.eval()):
            actual = other(clips, qp, gop)
            torch.testing.assert_close(actual.frames, expected.frames)
            torch.testing.assert_close(actual.log_file_sizes,
                                       expected.log_file_sizes)


def _surrogate(config, **settings):
    return Surrogate(Application('testing', {**config.to_settings(),
                                             **settings}))


def test_surrogate_extension_build(tiny_surrogate_config, tmpdir):
    """Test that the extension builds or loads the configured model."""
    surrogate = _surrogate(tiny_surrogate_config)
    assert surrogate.app.extensions['surrogate'] is surrogate
    built = surrogate.build()
    assert built.config == tiny_surrogate_config

    path = str(tmpdir.join('surrogate.pt'))
    save_surrogate(path, built)
    loaded = _surrogate(tiny_surrogate_config,
                        SURROGATE_CHECKPOINT=path).build()
    for name, value in built.state_dict().items():
        torch.testing.assert_close(loaded.state_dict()[name], value)


@pytest.mark.parametrize('key, value', (
    ('SURROGATE_FLOW', 'farneback'),
    ('SURROGATE_AGRU_ITERATIONS', 0),
    ('SURROGATE_BOTTLENECK', 'lstm'),
    ('PRETRAIN_STEPS', 0),
    ('PRETRAIN_LR', 0),
    ('PRETRAIN_QP_SHARED_P', 2),
    ('LOSS_SSIM', -1),
    ('SURROGATE_CHECKPOINT', '/does/not/exist.pt'),
))
def test_surrogate_validate_settings(tiny_surrogate_config, key, value):
    """Test that invalid surrogate settings are reported."""
    surrogate = _surrogate(tiny_surrogate_config, **{key: value})
    problems = surrogate.validate_settings(surrogate.app.settings)
    assert any(key in problem or 'SURROGATE_*' in problem
               for problem in problems)
