"""Validating codec control on the real encoder.

Every clip is coded once per target bandwidth by a strategy: the control
network, two-pass ABR, or a uniform QP found by bisection. A coded clip
whose bitrate exceeds the target by more than a tolerance is dropped
and scores the worst possible task metric. Reports aggregate the
bandwidth condition accuracy and the task metric per condition and
tolerance.
"""

import csv
from dataclasses import dataclass, field
import math
import os
from typing import Any

from matplotlib.figure import Figure
import numpy as np
import torch

from .base import Application, IterableConsumer
from .clipstore import ClipStore, macroblocks
from .codec_bridge import QP_MAX, QP_MIN, CodecBridge, QpMap
from .contrib.retry import Retry
from .control import Control, infer_qp
from .downstream import Downstream, predict, pseudo_label
from .exceptions import Abort, BridgeError, ContractError, EmptyInputError
from .extensions import Extension
from .surrogate import Surrogate
from .surrogate.losses import ssim_loss
from .surrogate.qp import to_one_hot

__all__ = (
    'DROP_VALUES',
    'EvalProtocol',
    'EvalRecord',
    'Evaluation',
    'Report',
    'STRATEGIES',
    'SweepPoint',
    'acc_bw',
    'bisect_uniform_qp',
    'create_evaluation_app',
    'create_sweep_app',
    'evaluate_baseline_abr',
    'evaluate_baseline_bisection',
    'evaluate_control',
    'metric_with_drops',
    'sweep_uniform_qp',
    'validate_surrogate',
)

STRATEGIES = ('control', 'abr', 'bisection')

# The metric a dropped clip scores: no correct pixel, every flow vector
# an outlier.
DROP_VALUES = {'segmentation': 0.0, 'flow': 100.0}


@dataclass(frozen=True)
class EvalProtocol:
    """Target bandwidths and drop tolerances.

    Attributes:
        conditions (Tuple[float, ...]): Ascending bandwidths in bit/s.
        tolerances (Tuple[float, ...]): Relative overshoot allowed before
            a clip is dropped.
    """

    conditions: tuple
    tolerances: tuple = (0.0, 0.02, 0.05)

    def __post_init__(self):
        if not self.conditions or min(self.conditions) <= 0:
            raise ContractError('Conditions must be positive bandwidths.')
        if list(self.conditions) != sorted(self.conditions):
            raise ContractError('Conditions must be sorted ascending.')
        if any(tolerance < 0 for tolerance in self.tolerances):
            raise ContractError('Tolerances cannot be negative.')

    @classmethod
    def log_spaced(cls, low=30000.0, high=900000.0, count=10,
                   tolerances=(0.0, 0.02, 0.05)):
        """Return ``count`` conditions equally spaced in log10."""
        conditions = np.logspace(math.log10(low), math.log10(high), count)
        return cls(tuple(float(c) for c in conditions), tuple(tolerances))


@dataclass(frozen=True)
class EvalRecord:
    """The outcome of coding one clip for one condition.

    Attributes:
        clip_id (str): The clip's source id.
        condition (float): The target bandwidth in bit/s.
        realized (float): The coded clip's bandwidth in bit/s; NaN when
            coding failed.
        metric (float): The task metric against the pseudo label; NaN
            when coding failed.
        failed (bool): Whether coding failed.
        strategy (str): Who chose the coding parameters.
        qp_mean (float): Mean QP, when known.
    """

    clip_id: str
    condition: float
    realized: float
    metric: float
    failed: bool = False
    strategy: str = 'control'
    qp_mean: float = float('nan')

    def dropped(self, tolerance):
        """Whether the clip is dropped at a tolerance."""
        return self.failed or self.realized > self.condition * (1 + tolerance)

    def metric_at(self, tolerance, task):
        """The metric, or the drop value when the clip is dropped."""
        if self.dropped(tolerance):
            return DROP_VALUES[task]
        return self.metric


def _nonempty(records):
    records = list(records)
    if not records:
        raise EmptyInputError('There are no records to aggregate.')
    return records


def acc_bw(records, tolerance):
    """Return the percentage of clips within the bandwidth tolerance.

    Raises:
        EmptyInputError: If there are no records.
    """
    records = _nonempty(records)
    kept = [not record.dropped(tolerance) for record in records]
    return 100 * sum(kept) / len(kept)


def metric_with_drops(records, tolerance, task):
    """Return the mean task metric with dropped clips at the drop value.

    Raises:
        EmptyInputError: If there are no records.
    """
    if task not in DROP_VALUES:
        raise ContractError('Unknown task {!r}.'.format(task))
    records = _nonempty(records)
    return float(np.mean([record.metric_at(tolerance, task)
                          for record in records]))


@dataclass
class Report:
    """The records of one strategy and their aggregates."""

    strategy: str
    task: str
    protocol: EvalProtocol
    records: list = field(default_factory=list)

    def at(self, condition):
        """Return the records of one condition."""
        return [r for r in self.records if r.condition == condition]

    def rows(self):
        """Return one row per condition and tolerance.

        Conditions without records are left out.
        """
        rows = []
        for condition in self.protocol.conditions:
            records = self.at(condition)
            if not records:
                continue
            for tolerance in self.protocol.tolerances:
                rows.append({
                    'strategy': self.strategy,
                    'condition': condition,
                    'tolerance': tolerance,
                    'acc_bw': acc_bw(records, tolerance),
                    'metric': metric_with_drops(records, tolerance,
                                                self.task),
                })
        return rows

    def overall(self, tolerance):
        """Return ``(acc_bw, metric)`` over every record."""
        return (acc_bw(self.records, tolerance),
                metric_with_drops(self.records, tolerance, self.task))


def bisect_uniform_qp(clip, bandwidth, code, iterations=6):
    """Find the smallest uniform QP whose bitrate is within a bandwidth.

    Bitrate falls as QP rises, so the search keeps the lowest QP seen
    that fits. When none fits, the clip is coded at QP 51.

    Args:
        clip (VideoClip): The clip.
        bandwidth (float): The target in bit/s.
        code (Callable[[VideoClip, QpMap], CodedClip]): Encodes and
            decodes.
        iterations (int): Encodes spent searching.

    Returns:
        Tuple[int, CodedClip]: The QP and the coded clip.

    """
    shape = (clip.length, *macroblocks(clip))
    coded = {}

    def encode(qp):
        if qp not in coded:
            coded[qp] = code(clip, QpMap.uniform(qp, *shape))
        return coded[qp]

    low, high = QP_MIN, QP_MAX
    best = None
    for _ in range(iterations):
        if low > high:
            break
        middle = (low + high) // 2
        if encode(middle).total_bitrate <= bandwidth:
            best = middle
            high = middle - 1
        else:
            low = middle + 1
    if best is None:
        best = QP_MAX
    return best, encode(best)


def _frames(array, device):
    return torch.as_tensor(np.asarray(array), dtype=torch.float32,
                           device=device)


class Evaluation(Extension):
    """Settings of evaluation and sweeps."""

    DEFAULT_SETTINGS = {
        'EVAL_CONDITIONS': 10,
        'EVAL_TOLERANCES': (0.0, 0.02, 0.05),
        'EVAL_BASELINE': 'abr',
        'EVAL_BISECTION_ITERATIONS': 6,
        'SWEEP_QPS': tuple(range(0, QP_MAX, 2)) + (QP_MAX,),
    }

    def validate_settings(self, settings):
        """Return problems with the evaluation settings."""
        problems = []
        if not isinstance(settings['EVAL_CONDITIONS'], int) \
                or settings['EVAL_CONDITIONS'] < 1:
            problems.append('EVAL_CONDITIONS must be a positive integer')
        if any(t < 0 for t in settings['EVAL_TOLERANCES']):
            problems.append('EVAL_TOLERANCES cannot be negative')
        baseline = settings['EVAL_BASELINE']
        if baseline is not None and baseline not in STRATEGIES[1:]:
            problems.append('EVAL_BASELINE must be one of {} or None'.format(
                ', '.join(STRATEGIES[1:])))
        if settings['EVAL_BISECTION_ITERATIONS'] < 1:
            problems.append('EVAL_BISECTION_ITERATIONS must be positive')
        qps = settings['SWEEP_QPS']
        if not qps or any(not QP_MIN <= qp <= QP_MAX for qp in qps):
            problems.append('SWEEP_QPS must be QPs in [{}, {}]'.format(
                QP_MIN, QP_MAX))
        return problems

    @property
    def protocol(self):
        """The configured conditions and tolerances."""
        settings = self.app.settings
        return EvalProtocol.log_spaced(
            settings['BANDWIDTH_MIN'], settings['BANDWIDTH_MAX'],
            settings['EVAL_CONDITIONS'], settings['EVAL_TOLERANCES'])

    @property
    def strategies(self):
        """The control network, then the configured baseline, if any."""
        baseline = self.app.settings['EVAL_BASELINE']
        return ('control',) if baseline is None else ('control', baseline)


@dataclass
class EvaluationState:
    """What an evaluation run holds."""

    clips: Any = None
    control: Any = None
    downstream: Any = None
    protocol: Any = None
    strategies: tuple = ()
    pseudo: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)


def create_evaluation_app(settings=None, clips=None, *, strategies=None,
                          control=None, downstream=None, protocol=None):
    """Assemble the evaluation application.

    Each message is one (strategy, clip, condition) job. A preprocessor
    codes the clip on the real encoder; the callback scores the decoded
    clip against the downstream model's prediction on the raw clip.
    Encodes that keep failing are recorded as failed clips, which count
    as dropped. Reports and plots are written to ``OUTPUT_DIR`` when the
    run ends.

    Args:
        settings (Optional[Mapping]): Settings for the application.
        clips (Optional[List[VideoClip]]): Evaluation clips. Loaded from
            ``CLIPS_PATHS`` when omitted.
        strategies (Optional[Sequence[str]]): Defaults to the control
            network and ``EVAL_BASELINE``.
        control (Optional[ControlNetwork]): Used instead of loading
            ``CONTROL_CHECKPOINT``.
        downstream (Optional[DownstreamModel]): Used instead of building
            the configured model.
        protocol (Optional[EvalProtocol]): Overrides the configured
            conditions and tolerances.

    Returns:
        Application: The assembled application.

    """
    app = Application('vidctl.evaluate', settings)
    store = ClipStore(app)
    bridge = CodecBridge(app)
    control_extension = Control(app)
    downstream_extension = Downstream(app)
    evaluation = Evaluation(app)
    Retry(app)

    state = app.state = EvaluationState(
        clips=clips, control=control, downstream=downstream,
        protocol=protocol or evaluation.protocol,
        strategies=tuple(strategies or evaluation.strategies),
    )

    def jobs():
        for strategy in state.strategies:
            for index in range(len(state.clips)):
                for condition in state.protocol.conditions:
                    yield {'strategy': strategy, 'clip': index,
                           'condition': condition}

    app.consumer = IterableConsumer(jobs())

    @app.startup
    async def load(app):
        if state.clips is None:
            state.clips = await app.run_blocking(store.load)
        if not state.clips:
            raise EmptyInputError('There are no clips to evaluate.')
        if state.downstream is None:
            state.downstream = downstream_extension.build()
        if 'control' in state.strategies and state.control is None:
            state.control = control_extension.load()
        for strategy in state.strategies:
            state.reports[strategy] = Report(
                strategy, state.downstream.task, state.protocol)

    def code(strategy, clip, condition):
        if strategy == 'control':
            qp = infer_qp(state.control, clip, condition)
            return qp, bridge.encode_decode(clip, qp)
        if strategy == 'abr':
            return None, bridge.two_pass_abr(clip, condition)
        qp, coded = bisect_uniform_qp(
            clip, condition, bridge.encode_decode,
            app.settings['EVAL_BISECTION_ITERATIONS'])
        return QpMap.uniform(qp, clip.length, *macroblocks(clip)), coded

    @app.message_preprocessor
    async def encode(app, message):
        clip = state.clips[message['clip']]
        message['qp'], message['coded'] = await app.run_blocking(
            code, message['strategy'], clip, message['condition'])
        return message

    async def score(app, message):
        device = app.settings['DEVICE']
        index = message['clip']
        clip = state.clips[index]
        coded = message['coded']
        if index not in state.pseudo:
            state.pseudo[index] = pseudo_label(
                state.downstream, _frames(clip.frames, device))
        with torch.no_grad():
            prediction = predict(state.downstream,
                                 _frames(coded.frames_hat, device))
        qp = message['qp']
        record = EvalRecord(
            clip_id=clip.source_id,
            condition=message['condition'],
            realized=coded.total_bitrate,
            metric=downstream_extension.metric(
                prediction, state.pseudo[index]),
            strategy=message['strategy'],
            qp_mean=float('nan') if qp is None else float(qp.values.mean()),
        )
        return [record]

    app.callback = score

    @app.result_postprocessor
    async def collect(app, record):
        state.reports[record.strategy].records.append(record)
        app.logger.info('clip.evaluated', extra={
            'strategy': record.strategy,
            'clip': record.clip_id,
            'condition': record.condition,
            'realized': record.realized,
        })
        return record

    @app.error
    async def record_failure(app, message, exc):
        if not isinstance(exc, BridgeError):
            return
        clip = state.clips[message['clip']]
        state.reports[message['strategy']].records.append(EvalRecord(
            clip_id=clip.source_id,
            condition=message['condition'],
            realized=float('nan'),
            metric=float('nan'),
            failed=True,
            strategy=message['strategy'],
        ))
        app.logger.error('clip.failed', extra={
            'clip': clip.source_id, 'error': str(exc)})
        raise Abort('clip.failed', message)

    @app.teardown
    async def write(app):
        reports = [r for r in state.reports.values() if r.records]
        if reports:
            write_evaluation(reports, app.settings['OUTPUT_DIR'])

    return app


def _evaluate(strategy, clips, protocol, downstream, settings, control=None):
    app = create_evaluation_app(
        settings, clips, strategies=(strategy,), control=control,
        downstream=downstream, protocol=protocol)
    app.validate_settings()
    app.run_forever()
    return app.state.reports[strategy]


def evaluate_control(control, clips, protocol=None, downstream=None,
                     settings=None):
    """Evaluate a control network on the real encoder.

    Returns:
        Report: One record per clip and condition.
    """
    return _evaluate('control', clips, protocol, downstream, settings,
                     control)


def evaluate_baseline_abr(clips, protocol=None, downstream=None,
                          settings=None):
    """Evaluate two-pass ABR at each condition.

    Returns:
        Report: One record per clip and condition.
    """
    return _evaluate('abr', clips, protocol, downstream, settings)


def evaluate_baseline_bisection(clips, protocol=None, downstream=None,
                                settings=None):
    """Evaluate the best uniform QP found by bisection at each condition.

    Returns:
        Report: One record per clip and condition.
    """
    return _evaluate('bisection', clips, protocol, downstream, settings)


@dataclass(frozen=True)
class SweepPoint:
    """The mean outcome of coding every clip at one uniform QP."""

    qp: int
    bitrate: float
    ssim: float
    metric: float
    surrogate_ssim: float = float('nan')
    surrogate_l1: float = float('nan')
    surrogate_size_error: float = float('nan')


def surrogate_errors(surrogate, clip, qp, coded, gop, device='cpu'):
    """Compare the surrogate's prediction with the codec's output.

    Returns:
        dict: ``ssim`` of the predicted and decoded frames, ``l1``
            between them on the [0, 255] scale, and ``size_error``, the
            mean relative error of the predicted frame sizes in percent.
    """
    clips = _frames(clip.frames, device).unsqueeze(0)
    truth = _frames(coded.frames_hat, device)
    sizes = torch.as_tensor(coded.file_sizes, dtype=torch.float64)
    with torch.no_grad():
        output = surrogate(clips, to_one_hot([qp], device=device), gop)
    frames = output.frames[0].float()
    predicted_sizes = torch.pow(10.0, output.log_file_sizes[0].double().cpu())
    return {
        'ssim': 1 - ssim_loss(frames, truth).item(),
        'l1': ((frames - truth).abs().mean() * 255).item(),
        'size_error': ((predicted_sizes - sizes).abs() / sizes).mean().item()
        * 100,
    }


def validate_surrogate(surrogate, clips, code, gop, qps=range(QP_MAX + 1),
                       device='cpu'):
    """Score a surrogate at every uniform QP.

    Args:
        surrogate (SurrogateModel): The surrogate, or any callable with
            its signature.
        clips (Sequence[VideoClip]): Validation clips.
        code (Callable[[VideoClip, QpMap], CodedClip]): Encodes and
            decodes.
        gop (vidctl.codec_bridge.GopStructure): The encoder's GOP.
        qps (Iterable[int]): The QPs to validate.

    Returns:
        List[dict]: One row per QP with ``qp``, ``ssim``, ``l1`` and
            ``size_error``, followed by a row averaging them with ``qp``
            set to ``'mean'``.

    """
    if not clips:
        raise EmptyInputError('There are no clips to validate on.')
    if isinstance(surrogate, torch.nn.Module):
        surrogate.eval()
    rows = []
    for qp in qps:
        errors = []
        for clip in clips:
            qp_map = QpMap.uniform(qp, clip.length, *macroblocks(clip))
            coded = code(clip, qp_map)
            errors.append(surrogate_errors(surrogate, clip, qp_map, coded,
                                           gop, device))
        rows.append({'qp': qp, **{
            key: float(np.mean([e[key] for e in errors]))
            for key in ('ssim', 'l1', 'size_error')}})
    rows.append({'qp': 'mean', **{
        key: float(np.mean([row[key] for row in rows]))
        for key in ('ssim', 'l1', 'size_error')}})
    return rows


@dataclass
class SweepState:
    """What a sweep holds."""

    clips: Any = None
    downstream: Any = None
    surrogate: Any = None
    gop: Any = None
    pseudo: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    points: list = field(default_factory=list)


def create_sweep_app(settings=None, clips=None, *, downstream=None):
    """Assemble the uniform QP sweep application.

    Each message is one (QP, clip) job. Every clip is coded at every QP
    of ``SWEEP_QPS``; the decoded clip is scored for SSIM against the raw
    clip and for the task metric against the pseudo label. When
    ``SURROGATE_CHECKPOINT`` is set, the surrogate is validated on the
    same encodes. Curves are written to ``OUTPUT_DIR`` when the run ends.

    Returns:
        Application: The assembled application.

    """
    app = Application('vidctl.sweep', settings)
    store = ClipStore(app)
    bridge = CodecBridge(app)
    surrogate_extension = Surrogate(app)
    downstream_extension = Downstream(app)
    Evaluation(app)
    Retry(app)

    state = app.state = SweepState(clips=clips, downstream=downstream)

    def jobs():
        for qp in app.settings['SWEEP_QPS']:
            for index in range(len(state.clips)):
                yield {'qp': qp, 'clip': index}

    app.consumer = IterableConsumer(jobs())

    @app.startup
    async def load(app):
        if state.clips is None:
            state.clips = await app.run_blocking(store.load)
        if not state.clips:
            raise EmptyInputError('There are no clips to sweep.')
        if state.downstream is None:
            state.downstream = downstream_extension.build()
        if app.settings['SURROGATE_CHECKPOINT'] is not None:
            state.surrogate = surrogate_extension.build().eval()
            clip = state.clips[0]
            state.gop = await app.run_blocking(
                bridge.probe_gop, clip.length, *clip.size)

    @app.message_preprocessor
    async def encode(app, message):
        clip = state.clips[message['clip']]
        message['qp_map'] = QpMap.uniform(message['qp'], clip.length,
                                          *macroblocks(clip))
        message['coded'] = await app.run_blocking(
            bridge.encode_decode, clip, message['qp_map'])
        return message

    async def score(app, message):
        device = app.settings['DEVICE']
        index = message['clip']
        clip = state.clips[index]
        coded = message['coded']
        raw = _frames(clip.frames, device)
        decoded = _frames(coded.frames_hat, device)
        if index not in state.pseudo:
            state.pseudo[index] = pseudo_label(state.downstream, raw)
        with torch.no_grad():
            prediction = predict(state.downstream, decoded)
        result = {
            'qp': message['qp'],
            'bitrate': coded.total_bitrate,
            'ssim': 1 - ssim_loss(decoded, raw).item(),
            'metric': downstream_extension.metric(
                prediction, state.pseudo[index]),
        }
        if state.surrogate is not None:
            errors = surrogate_errors(state.surrogate, clip,
                                      message['qp_map'], coded, state.gop,
                                      device)
            result.update(('surrogate_' + key, value)
                          for key, value in errors.items())
        return [result]

    app.callback = score

    @app.result_postprocessor
    async def collect(app, result):
        state.results.setdefault(result['qp'], []).append(result)
        return result

    @app.teardown
    async def write(app):
        state.points = _sweep_points(state.results)
        if state.points:
            write_sweep(state.points, app.settings['OUTPUT_DIR'])

    return app


def _sweep_points(results):
    points = []
    for qp in sorted(results):
        rows = results[qp]
        means = {
            key: float(np.mean([row[key] for row in rows]))
            for key in rows[0] if key != 'qp'
        }
        points.append(SweepPoint(qp=qp, **means))
    return points


def sweep_uniform_qp(clips, downstream=None, qps=None, settings=None):
    """Code clips at uniform QPs and measure what is lost.

    Returns:
        List[SweepPoint]: One point per QP, ascending.
    """
    settings = dict(settings or {})
    if qps is not None:
        settings['SWEEP_QPS'] = tuple(qps)
    app = create_sweep_app(settings, clips, downstream=downstream)
    app.validate_settings()
    app.run_forever()
    return app.state.points


def write_csv(path, rows, fieldnames=None):
    """Write dictionaries as a delimited table."""
    rows = list(rows)
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def write_evaluation(reports, directory):
    """Write records, the aggregate grid, and the plots of reports."""
    write_csv(
        os.path.join(directory, 'evaluation_records.csv'),
        ({'strategy': r.strategy, 'clip_id': r.clip_id,
          'condition': r.condition, 'realized': r.realized,
          'metric': r.metric, 'failed': r.failed, 'qp_mean': r.qp_mean}
         for report in reports for r in report.records),
        ['strategy', 'clip_id', 'condition', 'realized', 'metric', 'failed',
         'qp_mean'],
    )
    rows = [row for report in reports for row in report.rows()]
    write_csv(os.path.join(directory, 'evaluation_summary.csv'), rows,
              ['strategy', 'condition', 'tolerance', 'acc_bw', 'metric'])
    plot_acc_bw(rows, os.path.join(directory, 'acc_bw.png'))


def write_sweep(points, directory):
    """Write the curve table and the rate-distortion plot of a sweep."""
    columns = [f for f in SweepPoint.__dataclass_fields__]
    write_csv(os.path.join(directory, 'sweep.csv'),
              ({c: getattr(p, c) for c in columns} for p in points), columns)
    plot_rate_distortion(points, os.path.join(directory, 'sweep.png'))


def plot_acc_bw(rows, path):
    """Plot bandwidth condition accuracy against the condition."""
    figure = Figure(figsize=(6, 4))
    axes = figure.add_subplot()
    curves = {}
    for row in rows:
        key = (row['strategy'], row['tolerance'])
        curves.setdefault(key, []).append((row['condition'], row['acc_bw']))
    for (strategy, tolerance), points in sorted(curves.items()):
        x, y = zip(*points)
        axes.plot(x, y, marker='o',
                  label='{} Δ{:g}%'.format(strategy, tolerance * 100))
    axes.set_xscale('log')
    axes.set_xlabel('Bandwidth condition (bit/s)')
    axes.set_ylabel('Bandwidth condition accuracy (%)')
    axes.legend()
    figure.savefig(path, bbox_inches='tight')


def plot_rate_distortion(points, path):
    """Plot the task metric and SSIM against the bitrate."""
    figure = Figure(figsize=(10, 4))
    metric_axes, ssim_axes = figure.subplots(1, 2)
    bitrate = [p.bitrate for p in points]
    metric_axes.plot(bitrate, [p.metric for p in points], marker='o')
    metric_axes.set_ylabel('Task metric (%)')
    ssim_axes.plot(bitrate, [p.ssim for p in points], marker='o')
    ssim_axes.set_ylabel('SSIM')
    for axes in (metric_axes, ssim_axes):
        axes.set_xscale('log')
        axes.set_xlabel('Bitrate (bit/s)')
    figure.savefig(path, bbox_inches='tight')
