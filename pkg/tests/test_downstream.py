"""Test the frozen downstream models."""

import pytest
import torch

from vidctl import Application
from vidctl.downstream import (
    Downstream,
    DownstreamModel,
    SegmentationStandIn,
    _load_weights,
    fit_stand_in,
    load_adapter,
    load_stand_in,
    predict,
    pseudo_label,
    save_stand_in,
    stand_in,
    synthetic_scenes,
    task_metric,
)
from vidctl.exceptions import ContractError, ShapeError


def _model(task='segmentation', seed=0):
    return DownstreamModel(task, stand_in(task, 8, seed), 8)


def test_stand_in_seeded():
    """Test that stand-ins depend on their seed alone."""
    state = torch.get_rng_state()

    first = stand_in('segmentation', seed=1)
    second = stand_in('segmentation', seed=1)
    other = stand_in('segmentation', seed=2)

    assert torch.equal(torch.get_rng_state(), state)
    weight = first.layers[0].weight
    assert torch.equal(weight, second.layers[0].weight)
    assert not torch.equal(weight, other.layers[0].weight)


def test_stand_in_unknown_task():
    """Test that unknown tasks are rejected."""
    with pytest.raises(ContractError):
        stand_in('depth')


def test_downstream_model_frozen():
    """Test that downstream models can't be trained."""
    model = _model()
    assert model.frozen
    assert not model.network.training


@pytest.mark.parametrize('task, clips, expected', (
    ('segmentation', torch.rand(8, 3, 32, 32), (8, 8, 32, 32)),
    ('segmentation', torch.rand(2, 8, 3, 32, 32), (2, 8, 8, 32, 32)),
    ('flow', torch.rand(8, 3, 32, 32), (2, 7, 32, 32)),
    ('flow', torch.rand(2, 8, 3, 32, 32), (2, 2, 7, 32, 32)),
))
def test_predict_shapes(task, clips, expected):
    """Test the prediction layout of each task."""
    assert tuple(predict(_model(task), clips).shape) == expected


@pytest.mark.parametrize('task, clips', (
    ('segmentation', torch.rand(3, 32, 32)),
    ('segmentation', torch.rand(1, 8, 1, 32, 32)),
    ('flow', torch.rand(1, 1, 3, 32, 32)),
))
def test_predict_shape_errors(task, clips):
    """Test that misshapen clips are rejected."""
    with pytest.raises(ShapeError):
        predict(_model(task), clips)


def test_predict_gradients_reach_pixels():
    """Test that gradients reach the clips but not the model."""
    model = _model()
    clips = torch.rand(1, 2, 3, 16, 16, requires_grad=True)

    model(clips).sum().backward()

    assert clips.grad is not None and clips.grad.abs().sum() > 0
    assert all(p.grad is None for p in model.network.parameters())


def test_pseudo_label():
    """Test that pseudo labels are detached predictions."""
    model = _model('flow')
    clips = torch.rand(1, 4, 3, 16, 16, requires_grad=True)

    label = pseudo_label(model, clips)

    assert not label.requires_grad
    torch.testing.assert_close(label, predict(model, clips).detach())


def test_segmentation_metric():
    """Test that segmentation scores the agreeing pixels."""
    pseudo = torch.zeros(2, 1, 1, 4)
    pseudo[0] = 1
    prediction = pseudo.clone()
    prediction[1, 0, 0, 3] = 2

    assert task_metric(prediction, pseudo, 'segmentation') == \
        pytest.approx(75)
    assert task_metric(pseudo, pseudo, 'segmentation') == 100


@pytest.mark.parametrize('rule, expected', (('or', 75), ('and', 25)))
def test_flow_metric(rule, expected):
    """Test the outlier rules on four vectors."""
    pseudo = torch.tensor([[100.0, 100.0, 1.0, 1.0], [0, 0, 0, 0]])
    error = torch.tensor([[4.0, 6.0, 0.1, 0.01], [0, 0, 0, 0]])
    pseudo = pseudo.view(2, 1, 1, 4)
    prediction = pseudo + error.view(2, 1, 1, 4)

    actual = task_metric(prediction, pseudo, 'flow', rule)

    assert actual == pytest.approx(expected)


@pytest.mark.parametrize('task, rule, exception', (
    ('depth', 'or', ContractError),
    ('flow', 'xor', ContractError),
))
def test_task_metric_invalid(task, rule, exception):
    """Test that unknown tasks and rules are rejected."""
    with pytest.raises(exception):
        task_metric(torch.zeros(2, 1, 1, 1), torch.zeros(2, 1, 1, 1), task,
                    rule)


def test_task_metric_shape():
    """Test that predictions must match the pseudo labels."""
    with pytest.raises(ShapeError):
        task_metric(torch.zeros(2, 1, 1, 1), torch.zeros(2, 1, 1, 2),
                    'flow')


def test_load_adapter_unknown(tmpdir):
    """Test that unknown adapters are rejected."""
    with pytest.raises(ContractError):
        load_adapter('vgg16', str(tmpdir.join('weights.pt')))


def _weights(**changes):
    state = SegmentationStandIn(4).state_dict()
    for key, value in changes.items():
        if value is None:
            del state[key]
        else:
            state[key] = value
    return state


@pytest.mark.parametrize('changes', (
    {'layers.0.bias': None},
    {'layers.0.bias': torch.zeros(3)},
    {'head.weight': torch.zeros(1)},
))
def test_load_weights_mismatch(changes):
    """Test that partial or foreign weights are rejected."""
    with pytest.raises(ContractError):
        _load_weights(SegmentationStandIn(4), _weights(**changes))


def test_load_weights_optional():
    """Test that keys under optional prefixes are ignored."""
    state = _weights(**{'aux_classifier.weight': torch.zeros(1)})
    network = SegmentationStandIn(4)

    _load_weights(network, state, optional=('aux_classifier.',))

    torch.testing.assert_close(network.layers[0].weight,
                               state['layers.0.weight'])


@pytest.mark.parametrize('adapter', ('deeplabv3_resnet50', 'raft_large'))
def test_load_adapter_incomplete(adapter, tmpdir):
    """Test that an archive without the model's weights is rejected."""
    path = str(tmpdir.join('weights.pt'))
    torch.save({'state_dict': {}}, path)

    with pytest.raises(ContractError):
        load_adapter(adapter, path, classes=4)


def test_downstream_model_unknown_task():
    """Test that unknown tasks are rejected."""
    with pytest.raises(ContractError):
        DownstreamModel('depth', torch.nn.Identity())


def _downstream(**settings):
    return Downstream(Application('testing', settings))


@pytest.mark.parametrize('task', ('segmentation', 'flow'))
def test_downstream_build(task):
    """Test that the extension builds a frozen stand-in."""
    downstream = _downstream(DOWNSTREAM_TASK=task)
    model = downstream.build()
    assert downstream.app.extensions['downstream'] is downstream
    assert model.task == task
    assert model.frozen


def test_downstream_metric():
    """Test that the extension scores with the configured rule."""
    pseudo = torch.full((2, 1, 1, 1), 100.0)
    prediction = pseudo + 4
    assert _downstream(DOWNSTREAM_TASK='flow').metric(
        prediction, pseudo) == 100
    assert _downstream(DOWNSTREAM_TASK='flow', F1_RULE='and').metric(
        prediction, pseudo) == 0


@pytest.mark.parametrize('settings, expected', (
    ({'DOWNSTREAM_TASK': 'depth'}, 'DOWNSTREAM_TASK'),
    ({'F1_RULE': 'xor'}, 'F1_RULE'),
    ({'DOWNSTREAM_CLASSES': 1}, 'DOWNSTREAM_CLASSES'),
    ({'DOWNSTREAM_ADAPTER': 'raft_large'}, 'is for flow'),
    ({'DOWNSTREAM_ADAPTER': 'deeplabv3_resnet50'},
     'requires DOWNSTREAM_CHECKPOINT'),
    ({'DOWNSTREAM_CHECKPOINT': '/does/not/exist.pt'},
     'requires DOWNSTREAM_ADAPTER'),
))
def test_downstream_validate_settings(settings, expected):
    """Test that invalid downstream settings are reported."""
    downstream = _downstream(**settings)
    problems = downstream.validate_settings(downstream.app.settings)
    assert any(expected in problem for problem in problems)


def test_downstream_validate_stand_in_adapter(fitted_stand_ins):
    """Test that stand-in archives are accepted for either task."""
    for task, path in fitted_stand_ins.items():
        downstream = _downstream(DOWNSTREAM_TASK=task,
                                 DOWNSTREAM_ADAPTER='stand_in',
                                 DOWNSTREAM_CHECKPOINT=path)
        assert downstream.validate_settings(downstream.app.settings) == []


@pytest.mark.parametrize('task', ('segmentation', 'flow'))
def test_synthetic_scenes_seeded(task):
    """Test that synthetic scenes depend on the generator alone."""
    first, target = synthetic_scenes(task, 2, torch.Generator().manual_seed(3))
    second, again = synthetic_scenes(task, 2, torch.Generator().manual_seed(3))
    torch.testing.assert_close(first, second)
    torch.testing.assert_close(target, again)


def test_synthetic_scenes_segmentation():
    """Test the layout and range of segmentation scenes."""
    frames, labels = synthetic_scenes(
        'segmentation', 4, torch.Generator().manual_seed(0), size=32,
        classes=5)
    assert tuple(frames.shape) == (4, 3, 32, 32)
    assert tuple(labels.shape) == (4, 32, 32)
    assert 0 <= frames.min() and frames.max() <= 1
    assert 0 <= labels.min() and labels.max() < 5


def test_synthetic_scenes_flow():
    """Test that the second frame is the first shifted by the flow."""
    (first, second), flow = synthetic_scenes(
        'flow', 4, torch.Generator().manual_seed(0))
    for i in range(4):
        dx, dy = int(flow[i, 0, 0, 0]), int(flow[i, 1, 0, 0])
        torch.testing.assert_close(
            second[i], torch.roll(first[i], (dy, dx), dims=(-2, -1)))
    assert flow.abs().max() <= 2


def test_synthetic_scenes_unknown_task():
    """Test that unknown tasks are rejected."""
    with pytest.raises(ContractError):
        synthetic_scenes('depth', 1, torch.Generator())


def test_fitted_segmentation_beats_seeded(fitted_stand_ins):
    """Test that fitting teaches the stand-in the scene classes."""
    frames, labels = synthetic_scenes(
        'segmentation', 8, torch.Generator().manual_seed(1234))
    fitted = load_stand_in(fitted_stand_ins['segmentation'])

    with torch.no_grad():
        accuracy = (fitted(frames).argmax(1) == labels).float().mean()
        seeded = (stand_in('segmentation')(frames).argmax(1) == labels)

    assert accuracy > seeded.float().mean()
    assert accuracy >= 0.7


def test_fitted_flow_beats_seeded(fitted_stand_ins):
    """Test that fitting lowers the stand-in's endpoint error."""
    (first, second), flow = synthetic_scenes(
        'flow', 8, torch.Generator().manual_seed(1234))
    fitted = load_stand_in(fitted_stand_ins['flow'])

    with torch.no_grad():
        error = (fitted(first, second) - flow).abs().mean()
        seeded = (stand_in('flow')(first, second) - flow).abs().mean()

    assert error < seeded


def test_fit_stand_in_reproducible():
    """Test that fitting is determined by the seed."""
    first = fit_stand_in('segmentation', steps=2, batch_size=2)
    second = fit_stand_in('segmentation', steps=2, batch_size=2)
    torch.testing.assert_close(first.state_dict(), second.state_dict())
    assert not first.training


@pytest.mark.parametrize('task', ('segmentation', 'flow'))
def test_downstream_build_stand_in_archive(task, fitted_stand_ins):
    """Test that the extension loads a fitted stand-in archive."""
    path = fitted_stand_ins[task]
    model = _downstream(DOWNSTREAM_TASK=task, DOWNSTREAM_ADAPTER='stand_in',
                        DOWNSTREAM_CHECKPOINT=path).build()

    expected = load_stand_in(path).state_dict()
    torch.testing.assert_close(model.network.state_dict(), expected)
    assert model.frozen


def test_load_stand_in_task_mismatch(fitted_stand_ins):
    """Test that an archive for another task is rejected."""
    with pytest.raises(ContractError):
        load_adapter('stand_in', fitted_stand_ins['flow'],
                     task='segmentation')


def test_load_stand_in_classes_mismatch(tmpdir):
    """Test that an archive with other classes is rejected."""
    path = str(tmpdir.join('stand_in.pt'))
    save_stand_in(path, stand_in('segmentation', 4), 'segmentation', 4)

    assert load_stand_in(path, 'segmentation', 4).layers[-1].out_channels \
        == 4
    with pytest.raises(ContractError):
        load_stand_in(path, 'segmentation', 8)


def test_load_stand_in_wrong_kind(tmpdir):
    """Test that other checkpoints aren't loaded as stand-ins."""
    path = str(tmpdir.join('weights.pt'))
    torch.save({'state_dict': stand_in('flow').state_dict()}, path)
    with pytest.raises(ContractError):
        load_stand_in(path)
