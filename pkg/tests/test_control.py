"""Test the control network."""

from dataclasses import replace

import numpy as np
import pytest
import torch
from torch import nn

from vidctl import Application
from vidctl.codec_bridge import QpMap
from vidctl.control import (
    BandwidthEmbedding,
    ConditionalResBlock3d,
    Control,
    ControlConfig,
    ControlNetwork,
    ema_update,
    gumbel_sample,
    infer_qp,
    load_control,
    parameter_count,
    save_control,
    temperature,
)
from vidctl.exceptions import ContractError, ShapeError


@pytest.mark.parametrize('step, expected', (
    (0, 2.0),
    (50, 1.05),
    (100, 0.1),
    (150, 0.1),
))
def test_temperature(step, expected):
    """Test the cosine temperature schedule."""
    assert temperature(step, 100) == pytest.approx(expected)


def test_temperature_no_steps():
    """Test that an empty schedule sits at the final temperature."""
    assert temperature(0, 0, start=2.0, end=0.5) == 0.5


def test_gumbel_sample_soft():
    """Test that relaxed samples are distributions over the levels."""
    logits = torch.randn(2, 52, 8, 2, 2)
    sample = gumbel_sample(logits, tau=1.0)
    assert sample.shape == logits.shape
    torch.testing.assert_close(sample.sum(dim=1), torch.ones(2, 8, 2, 2))


def test_gumbel_sample_hard():
    """Test that hard samples are one-hot with a relaxed gradient."""
    logits = torch.randn(1, 52, 8, 2, 2, requires_grad=True)
    weights = torch.randn(1, 52, 8, 2, 2)

    sample = gumbel_sample(logits, tau=0.5, hard=True)
    (sample * weights).sum().backward()

    assert ((sample == 0) | (sample == 1)).all()
    assert (sample.sum(dim=1) == 1).all()
    assert logits.grad.abs().sum() > 0


def test_gumbel_sample_reproducible():
    """Test that a seeded generator reproduces the noise."""
    logits = torch.zeros(1, 52, 2, 1, 1)
    first = gumbel_sample(logits, 1.0,
                          generator=torch.Generator().manual_seed(3))
    second = gumbel_sample(logits, 1.0,
                           generator=torch.Generator().manual_seed(3))
    torch.testing.assert_close(first, second)


def test_gumbel_sample_follows_logits():
    """Test that a dominant level is always drawn."""
    logits = torch.zeros(4, 52, 8, 2, 2)
    logits[:, 17] = 100
    sample = gumbel_sample(logits, tau=0.1, hard=True)
    assert (sample.argmax(dim=1) == 17).all()


@pytest.mark.parametrize('tau', (0, -1.0))
def test_gumbel_sample_temperature(tau):
    """Test that the temperature must be positive."""
    with pytest.raises(ContractError):
        gumbel_sample(torch.zeros(1, 52, 1, 1, 1), tau)


def test_ema_update():
    """Test two updates of a shadow towards a constant."""
    live = {'weight': torch.ones(3), 'steps': torch.tensor(5)}
    shadow = {'weight': torch.zeros(3), 'steps': torch.tensor(0)}

    ema_update(live, shadow, decay=0.99)
    ema_update(live, shadow, decay=0.99)

    torch.testing.assert_close(shadow['weight'], torch.full((3,), 0.0199))
    assert shadow['steps'].item() == 5


def test_ema_update_modules():
    """Test that modules update their state in place."""
    live = nn.Linear(2, 2)
    shadow = nn.Linear(2, 2)
    ema_update(live, shadow, decay=0.0)
    torch.testing.assert_close(shadow.weight, live.weight)


@pytest.mark.parametrize('shadow', (
    {'other': torch.zeros(3)},
    {'weight': torch.zeros(4)},
))
def test_ema_update_mismatch(shadow):
    """Test that the shadow must hold the live tensors."""
    with pytest.raises(ContractError):
        ema_update({'weight': torch.ones(3)}, shadow)


def test_bandwidth_embedding_standardize():
    """Test that the training range maps to [-1, 1]."""
    embedding = BandwidthEmbedding(8, low=30000, high=900000)
    actual = embedding.standardize(torch.tensor([30000.0, 900000.0]))
    torch.testing.assert_close(actual, torch.tensor([-1.0, 1.0]))
    assert tuple(embedding(torch.tensor([1e5, 2e5])).shape) == (2, 8, 1, 1, 1)


def test_bandwidth_embedding_positive():
    """Test that bandwidths must be positive."""
    with pytest.raises(ContractError):
        BandwidthEmbedding(8).standardize(torch.tensor([0.0]))


def test_control_network_logits(tiny_control_config):
    """Test that logits cover every macroblock of every frame."""
    model = ControlNetwork(tiny_control_config)
    logits = model(torch.rand(2, 8, 3, 32, 48), torch.tensor([5e4, 5e5]))
    assert tuple(logits.shape) == (2, 52, 8, 2, 3)


@pytest.mark.parametrize('clips, bandwidth', (
    (torch.rand(1, 8, 3, 24, 32), [1e5]),
    (torch.rand(8, 3, 32, 32), [1e5]),
    (torch.rand(1, 8, 3, 32, 32), [1e5, 2e5]),
))
def test_control_network_shape_errors(tiny_control_config, clips, bandwidth):
    """Test that misshapen inputs are rejected."""
    model = ControlNetwork(tiny_control_config)
    with pytest.raises(ShapeError):
        model(clips, torch.tensor(bandwidth))


def test_conditional_res_block_layout():
    """Test the depthwise then pointwise layout of the head blocks."""
    block = ConditionalResBlock3d(8, 8, groups=2)

    assert block.depthwise.kernel_size == (3, 3, 3)
    assert block.depthwise.groups == 8
    assert block.conv2.kernel_size == (1, 1, 1)
    assert [name for name, _ in block.named_children()] == [
        'depthwise', 'norm1', 'conv2', 'norm2']


def test_conditional_res_block_identity():
    """Test that a silenced branch leaves a leaky ReLU of the input."""
    block = ConditionalResBlock3d(8, 8, groups=2)
    nn.init.zeros_(block.norm2.weight)
    nn.init.zeros_(block.norm2.bias)
    x = torch.randn(2, 8, 2, 4, 4)

    actual = block(x, torch.randn(2, 8, 1, 1, 1))

    torch.testing.assert_close(actual, torch.where(x > 0, x, 0.2 * x))


def test_control_network_parameter_budget(tiny_control_config):
    """Test that oversized networks are rejected."""
    with pytest.raises(ContractError):
        ControlNetwork(replace(tiny_control_config, max_parameters=100))


def test_control_network_default_budget():
    """Test that the default network fits its budget."""
    model = ControlNetwork()
    assert parameter_count(model) <= model.config.max_parameters


def test_control_network_train_freezes_batch_norm(tiny_control_config):
    """Test that backbone normalization statistics stay fixed."""
    model = ControlNetwork(tiny_control_config).train()

    norms = [m for m in model.backbone.modules()
             if isinstance(m, nn.BatchNorm3d)]
    assert norms and not any(m.training for m in norms)
    assert model.head.training


def test_control_network_parameter_groups(tiny_control_config):
    """Test that backbone and head parameters split the network."""
    model = ControlNetwork(tiny_control_config)
    backbone = {id(p) for p in model.backbone_parameters()}
    head = {id(p) for p in model.head_parameters()}
    assert not backbone & head
    assert len(backbone) + len(head) == len(list(model.parameters()))


def test_infer_qp(tiny_control_config, clip):
    """Test that inference returns a QP map for the clip."""
    model = ControlNetwork(tiny_control_config)

    qp = infer_qp(model, clip, 1e5)

    assert isinstance(qp, QpMap)
    assert qp.shape == (8, 2, 2)
    assert not model.training
    assert qp == infer_qp(model, torch.from_numpy(clip.frames), 1e5)


@pytest.mark.parametrize('kwargs', (
    {'backbone': 'resnet'},
    {'widths': (8, 8)},
    {'tau_start': 0.1, 'tau_end': 1.0},
    {'ema_decay': 1.0},
    {'bandwidth_min': 1e6},
))
def test_control_config_invalid(kwargs):
    """Test that invalid configurations are rejected."""
    with pytest.raises(ContractError):
        ControlConfig(**kwargs)


def test_save_load_control(tiny_control_config, tmpdir):
    """Test that archives hold the live and averaged networks."""
    torch.manual_seed(0)
    model = ControlNetwork(tiny_control_config)
    ema = ControlNetwork(tiny_control_config)
    path = str(tmpdir.join('control.pt'))

    save_control(path, model, ema, metadata={'step': 7})
    loaded, loaded_ema, metadata = load_control(path)

    assert metadata == {'step': 7}
    assert loaded.config == tiny_control_config
    for name, value in ema.state_dict().items():
        torch.testing.assert_close(loaded_ema.state_dict()[name], value)
    for name, value in model.state_dict().items():
        torch.testing.assert_close(loaded.state_dict()[name], value)


def test_load_control_without_ema(tiny_control_config, tmpdir):
    """Test that archives without an EMA copy load."""
    path = str(tmpdir.join('control.pt'))
    save_control(path, ControlNetwork(tiny_control_config))
    _, ema, _ = load_control(path)
    assert ema is None


def _control(config, **settings):
    return Control(Application('testing', {**config.to_settings(),
                                           **settings}))


def test_control_extension_build(tiny_control_config):
    """Test that the EMA copy starts equal to the live network."""
    control = _control(tiny_control_config)
    model, ema = control.build()

    assert control.app.extensions['control'] is control
    assert model is not ema
    for name, value in model.state_dict().items():
        torch.testing.assert_close(ema.state_dict()[name], value)


@pytest.mark.parametrize('use_ema', (True, False))
def test_control_extension_load(tiny_control_config, tmpdir, use_ema):
    """Test that EVAL_USE_EMA picks the network used for inference."""
    model = ControlNetwork(tiny_control_config)
    ema = ControlNetwork(tiny_control_config)
    path = str(tmpdir.join('control.pt'))
    save_control(path, model, ema)
    control = _control(tiny_control_config, CONTROL_CHECKPOINT=path,
                       EVAL_USE_EMA=use_ema)

    loaded = control.load()

    expected = ema if use_ema else model
    assert not loaded.training
    torch.testing.assert_close(loaded.logits.weight, expected.logits.weight)


def test_control_extension_load_requires_checkpoint(tiny_control_config):
    """Test that loading needs a checkpoint."""
    with pytest.raises(ContractError):
        _control(tiny_control_config).load()


@pytest.mark.parametrize('key, value', (
    ('CONTROL_BACKBONE', 'resnet'),
    ('CONTROL_EMA_DECAY', 2),
    ('CONTROL_CHECKPOINT', '/does/not/exist.pt'),
))
def test_control_validate_settings(tiny_control_config, key, value):
    """Test that invalid control settings are reported."""
    control = _control(tiny_control_config, **{key: value})
    problems = control.validate_settings(control.app.settings)
    assert any(key in problem or 'CONTROL_*' in problem
               for problem in problems)


def test_infer_qp_values_in_range(tiny_control_config, make_clip):
    """Test that chosen QPs are valid levels."""
    qp = infer_qp(ControlNetwork(tiny_control_config), make_clip(), 3e5)
    assert np.all((qp.values >= 0) & (qp.values <= 51))
