"""Test evaluation on the encoder and uniform QP sweeps."""

import csv
import math
import os

import numpy as np
import pytest
import torch

from conftest import TREND_CONDITIONS, fake_coded, rate_model_qp
from vidctl.codec_bridge import CodecBridge
from vidctl.control import ControlNetwork, infer_qp
from vidctl.exceptions import BridgeError, ContractError, EmptyInputError
from vidctl.evaluation import (
    EvalProtocol,
    EvalRecord,
    Report,
    acc_bw,
    bisect_uniform_qp,
    create_evaluation_app,
    create_sweep_app,
    metric_with_drops,
    validate_surrogate,
)
from vidctl.surrogate import SurrogateModel, save_surrogate
from vidctl.surrogate.model import SurrogateOutput
from vidctl.training import bandwidth_loss

PROTOCOL = EvalProtocol((6800.0, 136000.0, 816000.0))


def _record(realized, condition=100000.0, metric=90.0, failed=False):
    return EvalRecord('clip', condition, realized, metric, failed=failed)


@pytest.mark.parametrize('realized, expected', (
    (101000.0, (0, 100, 100)),
    (100000.0, (100, 100, 100)),
    (106000.0, (0, 0, 0)),
))
def test_acc_bw(realized, expected):
    """Test the tolerance thresholds."""
    records = [_record(realized)]
    actual = tuple(acc_bw(records, t) for t in (0.0, 0.02, 0.05))
    assert actual == expected


def test_acc_bw_fraction():
    """Test that accuracy counts the clips within the tolerance."""
    records = [_record(90000.0), _record(110000.0), _record(95000.0),
               _record(float('nan'), failed=True)]
    assert acc_bw(records, 0.0) == 50


@pytest.mark.parametrize('task, surviving, expected', (
    ('segmentation', 90.0, 45.0),
    ('flow', 10.0, 55.0),
))
def test_metric_with_drops(task, surviving, expected):
    """Test that a dropped clip scores the worst value."""
    records = [_record(90000.0, metric=surviving),
               _record(120000.0, metric=surviving)]
    assert metric_with_drops(records, 0.0, task) == pytest.approx(expected)


def test_metric_with_drops_no_drops():
    """Test that without drops the metric is the plain mean."""
    records = [_record(90000.0, metric=80.0), _record(90000.0, metric=60.0)]
    assert metric_with_drops(records, 0.0, 'segmentation') == 70


def test_aggregates_empty():
    """Test that there is nothing to aggregate without records."""
    with pytest.raises(EmptyInputError):
        acc_bw([], 0.0)
    with pytest.raises(EmptyInputError):
        metric_with_drops([], 0.0, 'flow')


def test_metric_with_drops_unknown_task():
    """Test that an unknown task is rejected."""
    with pytest.raises(ContractError):
        metric_with_drops([_record(1.0)], 0.0, 'depth')


def test_failed_record_dropped():
    """Test that a failed clip is dropped at every tolerance."""
    record = _record(float('nan'), failed=True)
    assert record.dropped(0.0) and record.dropped(1.0)
    assert record.metric_at(0.05, 'flow') == 100


@pytest.mark.parametrize('kwargs', (
    {'conditions': ()},
    {'conditions': (0.0, 1.0)},
    {'conditions': (2.0, 1.0)},
    {'conditions': (1.0,), 'tolerances': (-0.01,)},
))
def test_eval_protocol_invalid(kwargs):
    """Test that invalid protocols are rejected."""
    with pytest.raises(ContractError):
        EvalProtocol(**kwargs)


def test_eval_protocol_log_spaced():
    """Test the default grid of conditions."""
    protocol = EvalProtocol.log_spaced()
    assert len(protocol.conditions) == 10
    assert protocol.conditions[0] == pytest.approx(30000)
    assert protocol.conditions[-1] == pytest.approx(900000)
    ratios = np.diff(np.log10(protocol.conditions))
    np.testing.assert_allclose(ratios, ratios[0])
    assert protocol.tolerances == (0.0, 0.02, 0.05)


def test_report_rows():
    """Test one row per condition and tolerance with records."""
    report = Report('abr', 'segmentation', PROTOCOL, [
        EvalRecord('a', 6800.0, 13600.0, 100.0, strategy='abr'),
        EvalRecord('a', 136000.0, 136000.0, 100.0, strategy='abr'),
    ])

    rows = report.rows()

    assert len(rows) == 6
    assert {row['condition'] for row in rows} == {6800.0, 136000.0}
    assert rows[0] == {'strategy': 'abr', 'condition': 6800.0,
                       'tolerance': 0.0, 'acc_bw': 0.0, 'metric': 0.0}
    assert report.overall(0.0) == (50.0, 50.0)


def _counting(calls):
    def code(clip, qp):
        calls.append(int(qp.values.flat[0]))
        return fake_coded(clip, int(qp.values.flat[0]))
    return code


@pytest.mark.parametrize('bandwidth, expected, searched', (
    (136000.0, 42, [25, 38, 45, 41, 43, 42]),
    (816000.0, 0, [25, 12, 5, 2, 0]),
    (6800.0, 51, [25, 38, 45, 48, 50, 51]),
))
def test_bisect_uniform_qp(clip, bandwidth, expected, searched):
    """Test the search for the smallest QP within the bandwidth."""
    calls = []

    qp, coded = bisect_uniform_qp(clip, bandwidth, _counting(calls))

    assert qp == expected
    assert calls == searched
    assert coded.file_sizes[0] == (52 - expected) * 100


def _settings(tmpdir, **settings):
    return {'OUTPUT_DIR': str(tmpdir), 'RETRY_DELAY': 0, **settings}


@pytest.mark.parametrize('strategy', ('abr', 'bisection'))
def test_evaluate_baselines(strategy, clips, fake_codec, loop, tmpdir):
    """Test the baselines against a fake codec."""
    app = create_evaluation_app(_settings(tmpdir), clips,
                                strategies=(strategy,), protocol=PROTOCOL)

    app.run_forever(loop=loop)

    report = app.state.reports[strategy]
    assert len(report.records) == 9
    # Even QP 51 overshoots the lowest condition.
    assert [acc_bw(report.at(c), 0.0) for c in PROTOCOL.conditions] == \
        [0, 100, 100]
    assert report.overall(0.0) == pytest.approx((200 / 3, 200 / 3))
    if strategy == 'bisection':
        assert {r.qp_mean for r in report.at(136000.0)} == {42.0}
        assert not fake_codec['two_pass_abr']
    else:
        assert fake_codec['two_pass_abr'] == list(PROTOCOL.conditions) * 3


def test_evaluate_control(tiny_control_config, clips, fake_codec, loop,
                          tmpdir):
    """Test evaluating a control network against a fake codec."""
    control = ControlNetwork(tiny_control_config)
    app = create_evaluation_app(_settings(tmpdir), clips,
                                strategies=('control',), control=control,
                                protocol=PROTOCOL)

    app.run_forever(loop=loop)

    records = app.state.reports['control'].records
    assert len(records) == 9
    assert len(fake_codec['encode_decode']) == 9
    assert all(0 <= r.qp_mean <= 51 for r in records)
    assert {r.clip_id for r in records} == {'clip0', 'clip1', 'clip2'}


def test_evaluation_writes_reports(clips, fake_codec, loop, tmpdir):
    """Test the files written with the default protocol."""
    app = create_evaluation_app(_settings(tmpdir), clips[:1],
                                strategies=('abr',))

    app.run_forever(loop=loop)

    with open(os.path.join(str(tmpdir), 'evaluation_summary.csv')) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 10 * 3
    assert set(rows[0]) == {'strategy', 'condition', 'tolerance', 'acc_bw',
                            'metric'}
    with open(os.path.join(str(tmpdir), 'evaluation_records.csv')) as f:
        assert len(list(csv.DictReader(f))) == 10
    assert os.path.exists(os.path.join(str(tmpdir), 'acc_bw.png'))


@pytest.mark.parametrize('threshold, attempts', ((0, 1), (2, 3)))
def test_evaluation_records_failures(clips, fake_codec, monkeypatch, loop,
                                     tmpdir, threshold, attempts):
    """Test that encodes that keep failing count as dropped clips."""
    calls = []

    def two_pass_abr(self, clip, bitrate):
        calls.append(bitrate)
        raise BridgeError('ffmpeg exited with status 1.')

    monkeypatch.setattr(CodecBridge, 'two_pass_abr', two_pass_abr)
    app = create_evaluation_app(
        _settings(tmpdir, RETRY_THRESHOLD=threshold), clips[:2],
        strategies=('abr',), protocol=PROTOCOL)

    app.run_forever(loop=loop)

    records = app.state.reports['abr'].records
    assert len(records) == 6
    assert all(r.failed and math.isnan(r.realized) for r in records)
    assert len(calls) == 6 * attempts
    assert acc_bw(records, 0.05) == 0


def test_evaluation_no_clips(fake_codec, loop, tmpdir):
    """Test that evaluating nothing is an error."""
    app = create_evaluation_app(_settings(tmpdir), [],
                                strategies=('abr',), protocol=PROTOCOL)
    with pytest.raises(EmptyInputError):
        app.run_forever(loop=loop)


def _perfect_surrogate(clips, qp, gop):
    """Predict exactly what the fake codec produces."""
    value = qp.argmax(dim=1)[0, 0, 0, 0].item()
    sizes = torch.full((1, clips.shape[1]), (52.0 - value) * 100,
                       dtype=torch.float64)
    return SurrogateOutput(clips, torch.log10(sizes))


def test_validate_surrogate(clips, gop):
    """Test that a perfect surrogate has no error."""
    calls = []

    rows = validate_surrogate(_perfect_surrogate, clips[:2],
                              _counting(calls), gop, qps=(10, 40))

    assert [row['qp'] for row in rows] == [10, 40, 'mean']
    assert calls == [10, 10, 40, 40]
    for row in rows:
        assert row['ssim'] == pytest.approx(1, abs=1e-4)
        assert row['l1'] == pytest.approx(0)
        assert row['size_error'] == pytest.approx(0, abs=1e-6)


def test_validate_surrogate_model(tiny_surrogate_config, clips, gop):
    """Test the mean row of a real surrogate."""
    model = SurrogateModel(tiny_surrogate_config)
    rows = validate_surrogate(model, clips[:1], _counting([]), gop,
                              qps=(20, 30))

    assert not model.training
    for key in ('ssim', 'l1', 'size_error'):
        assert rows[-1][key] == pytest.approx(
            (rows[0][key] + rows[1][key]) / 2)
    assert rows[0]['l1'] > 0


def test_validate_surrogate_no_clips(gop):
    """Test that validating on nothing is an error."""
    with pytest.raises(EmptyInputError):
        validate_surrogate(_perfect_surrogate, [], None, gop)


def test_sweep(tiny_surrogate_config, clips, fake_codec, loop, tmpdir):
    """Test a sweep over two QPs with surrogate validation."""
    path = str(tmpdir.join('surrogate.pt'))
    save_surrogate(path, SurrogateModel(tiny_surrogate_config))
    settings = _settings(tmpdir, SWEEP_QPS=(30, 10),
                         SURROGATE_CHECKPOINT=path,
                         **tiny_surrogate_config.to_settings())
    app = create_sweep_app(settings, clips)

    app.run_forever(loop=loop)

    points = app.state.points
    assert [p.qp for p in points] == [10, 30]
    assert [p.bitrate for p in points] == pytest.approx([571200, 299200])
    assert all(p.metric == pytest.approx(100) for p in points)
    assert all(p.ssim == pytest.approx(1, abs=1e-4) for p in points)
    assert all(math.isfinite(p.surrogate_l1) for p in points)
    with open(os.path.join(str(tmpdir), 'sweep.csv')) as f:
        assert len(list(csv.DictReader(f))) == 2
    assert os.path.exists(os.path.join(str(tmpdir), 'sweep.png'))


def test_sweep_without_surrogate(clips, fake_codec, loop, tmpdir):
    """Test that surrogate columns stay empty without a checkpoint."""
    app = create_sweep_app(_settings(tmpdir, SWEEP_QPS=(51,)), clips[:1])

    app.run_forever(loop=loop)

    point, = app.state.points
    assert point.bitrate == pytest.approx(13600)
    assert math.isnan(point.surrogate_ssim)


def test_trained_control_qp_falls_with_bandwidth(trained_control, clips):
    """Test that doubling the bandwidth never raises the mean QP."""
    doubling = TREND_CONDITIONS[1:]
    for clip in clips:
        means = [infer_qp(trained_control, clip, b).values.mean()
                 for b in doubling]
        assert all(after <= before
                   for before, after in zip(means, means[1:]))
        assert means[-1] < means[0]


def test_trained_control_follows_rate_model(trained_control, clips):
    """Test that the fitted network picks the rate model's QP."""
    for clip in clips:
        for bandwidth in TREND_CONDITIONS:
            qp = infer_qp(trained_control, clip, bandwidth)
            assert round(float(qp.values.mean())) == rate_model_qp(bandwidth)


def test_trained_control_bandwidth_loss_trend(trained_control, clips,
                                              fake_codec, loop, tmpdir):
    """Test that lowering the bandwidth never lowers the coded loss."""
    app = create_evaluation_app(
        _settings(tmpdir), clips, strategies=('control',),
        control=trained_control, protocol=EvalProtocol(TREND_CONDITIONS))

    app.run_forever(loop=loop)

    report = app.state.reports['control']
    losses = [
        bandwidth_loss(torch.tensor([r.realized for r in report.at(c)]),
                       c).mean().item()
        for c in TREND_CONDITIONS
    ]
    assert all(lower >= higher for lower, higher in zip(losses, losses[1:]))
    # Only the lowest target is out of the encoder's reach.
    assert losses[0] > 0
    assert losses[1:] == [0.0] * 4


def test_trained_control_against_bisection(trained_control, clips,
                                           fake_codec, loop, tmpdir):
    """Test that the fitted network keeps as many clips as bisection."""
    protocol = EvalProtocol(TREND_CONDITIONS, (0.0,))
    app = create_evaluation_app(
        _settings(tmpdir), clips, strategies=('control', 'bisection'),
        control=trained_control, protocol=protocol)

    app.run_forever(loop=loop)

    control = app.state.reports['control']
    bisection = app.state.reports['bisection']
    assert control.overall(0.0)[0] >= bisection.overall(0.0)[0]
    assert control.overall(0.0)[0] == 80
    # A single encode lands where bisection needs several.
    assert len(fake_codec['encode_decode']) > 2 * len(control.records)
