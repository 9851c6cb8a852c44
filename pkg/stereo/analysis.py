"""
Parameter / FLOPs accounting and the per-stage wall-clock profiler.

``count_params`` walks the module tree; ``count_flops`` traces layer shapes
for a given input size without running any kernels. FLOPs are reported as
2 x MACs; normalization, activation, resize, softmax and elementwise work is
counted separately at one op per element.
"""
import csv
import io
import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from . import tensor_ops as ops
from .exceptions import ConfigurationError
from .model import STAGES, LightStereo

logger = logging.getLogger(__name__)

# Published totals per variant: params in millions, FLOPs in billions,
# per-stage runtime in milliseconds.
PUBLISHED_REFERENCE = {
    'S': {'params_m': 3.44, 'flops_g': 22.71,
          'runtime_ms': {'feature_extraction': 10.39, 'cost': 1.98, 'cost_aggregation': 3.98,
                         'disparity_regression': 1.48}},
    'M': {'params_m': 7.64, 'flops_g': 36.36,
          'runtime_ms': {'feature_extraction': 10.39, 'cost': 1.98, 'cost_aggregation': 9.59,
                         'disparity_regression': 1.49}},
    'L': {'params_m': 24.29, 'flops_g': 91.85,
          'runtime_ms': {'feature_extraction': 10.39, 'cost': 1.98, 'cost_aggregation': 23.64,
                         'disparity_regression': 1.49}},
}

CSV_HEADER = ('name', 'stage', 'params', 'macs', 'flops')

_STAGE_BY_PREFIX = {'backbone': 'feature_extraction', 'aggregator': 'cost_aggregation'}


@dataclass
class LayerRecord:
    name: str
    stage: str
    params: int = 0
    macs: int = 0
    elementwise: int = 0

    @property
    def flops(self):
        return 2 * self.macs


class Tracer:
    """Collects one LayerRecord per traced layer under the current ``stage``."""

    def __init__(self, stage=''):
        self.stage = stage
        self.records: List[LayerRecord] = []

    def record(self, name, params=0, macs=0, elementwise=0):
        self.records.append(LayerRecord(name, self.stage, int(params), int(macs), int(elementwise)))


@dataclass
class ComplexityReport:
    records: List[LayerRecord] = field(default_factory=list)

    @property
    def params(self):
        return sum(r.params for r in self.records)

    @property
    def macs(self):
        return sum(r.macs for r in self.records)

    @property
    def flops(self):
        return 2 * self.macs

    @property
    def elementwise(self):
        return sum(r.elementwise for r in self.records)

    def stage_totals(self) -> Dict[str, LayerRecord]:
        totals = {}
        for r in self.records:
            t = totals.setdefault(r.stage, LayerRecord(r.stage, r.stage))
            t.params += r.params
            t.macs += r.macs
            t.elementwise += r.elementwise
        return totals

    def write_csv(self, handle):
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(CSV_HEADER)
        for r in self.records:
            writer.writerow((r.name, r.stage, r.params, r.macs, r.flops))

    def to_csv(self):
        buffer = io.StringIO()
        self.write_csv(buffer)
        return buffer.getvalue()

    def format_table(self, layers=False):
        """Aligned text table: per-stage totals (and every layer when ``layers``), then the grand total."""
        rows = []
        if layers:
            rows += [(r.name, r.stage, r.params, r.macs, r.flops, r.elementwise) for r in self.records]
            rows.append(None)
        for stage, t in self.stage_totals().items():
            rows.append((stage, stage, t.params, t.macs, t.flops, t.elementwise))
        rows.append(None)
        rows.append(('total', '', self.params, self.macs, self.flops, self.elementwise))

        header = ('name', 'stage', 'params', 'macs', 'flops', 'elementwise')
        body = [tuple(f'{v:,}' if isinstance(v, int) else v for v in row) if row else None for row in rows]
        widths = [max(len(header[i]), *(len(row[i]) for row in body if row)) for i in range(len(header))]

        def line(cells):
            left = [cells[0].ljust(widths[0]), cells[1].ljust(widths[1])]
            right = [c.rjust(w) for c, w in zip(cells[2:], widths[2:])]
            return '  '.join(left + right).rstrip()

        rule = '-' * (sum(widths) + 2 * (len(widths) - 1))
        out = [line(header), rule]
        out += [line(row) if row else rule for row in body]
        return '\n'.join(out)


def count_params(model):
    """One record per module that owns parameters; exact element counts."""
    report = ComplexityReport()
    for prefix, module in model.modules():
        own = sum(int(p.size) for p in module._params.values())
        if not own:
            continue
        name = prefix.rstrip('.') or type(model).__name__
        stage = _STAGE_BY_PREFIX.get(name.split('.')[0], '') if isinstance(model, LightStereo) else ''
        report.records.append(LayerRecord(name, stage, params=own))
    return report


def count_flops(model, input_h, input_w, max_disparity=None):
    """Trace the network for one (input_h, input_w) pair; MACs per layer plus params."""
    if input_h % 32 or input_w % 32:
        raise ConfigurationError(f'input size {input_h}x{input_w} must be divisible by 32')
    if isinstance(model, LightStereo):
        if max_disparity is not None and max_disparity != model.max_disparity:
            raise ConfigurationError(
                f'model was built for max disparity {model.max_disparity}, not {max_disparity}'
            )
        tracer = Tracer()
        model.trace(tracer, input_h, input_w)
    else:
        tracer = Tracer()
        if hasattr(model, 'trace'):
            model.trace(tracer, (1, model.in_channels, input_h, input_w), type(model).__name__)
    report = ComplexityReport(tracer.records)
    logger.debug('traced %d layers: %.3f GFLOPs, %d params', len(report.records), report.flops / 1e9, report.params)
    return report


def reference_ratios(variant, report):
    """Computed / published ratios for params and FLOPs, or None for unpublished variants."""
    ref = PUBLISHED_REFERENCE.get(variant)
    if ref is None:
        return None
    return {
        'params': report.params / (ref['params_m'] * 1e6),
        'flops': report.flops / (ref['flops_g'] * 1e9),
    }


@dataclass
class ProfileReport:
    stages: Dict[str, float]
    total: float
    repeats: int
    warmup: int
    threads: int

    def format_table(self):
        lines = [f'threads={self.threads} warmup={self.warmup} repeats={self.repeats}']
        width = max(len(s) for s in STAGES)
        for stage in STAGES:
            lines.append(f'{stage.ljust(width)}  {self.stages[stage] * 1e3:10.2f} ms')
        lines.append(f'{"total".ljust(width)}  {self.total * 1e3:10.2f} ms')
        return '\n'.join(lines)


def _timed_pass(model, left, right):
    height, width = left.shape[2:]
    marks = [time.perf_counter()]
    left_pyramid, right_pyramid = model.extract(left, right)
    marks.append(time.perf_counter())
    volume = model.cost(left_pyramid.f4, right_pyramid.f4)
    marks.append(time.perf_counter())
    costs = model.aggregate(volume, left_pyramid)
    marks.append(time.perf_counter())
    model.regress(costs, height, width)
    marks.append(time.perf_counter())
    return [b - a for a, b in zip(marks, marks[1:])], marks[-1] - marks[0]


def profile(model: LightStereo, input_h, input_w, repeats=10, warmup=3, seed=0):
    """Median wall-clock seconds per pipeline stage over ``repeats`` timed passes."""
    if repeats < 1:
        raise ConfigurationError(f'repeats must be >= 1, got {repeats}')
    if warmup < 3:
        raise ConfigurationError(f'at least 3 warmup passes are required, got {warmup}')
    if input_h % 32 or input_w % 32:
        raise ConfigurationError(f'input size {input_h}x{input_w} must be divisible by 32')
    rng = np.random.default_rng(seed)
    left = rng.standard_normal((1, 3, input_h, input_w)).astype(np.float32)
    right = rng.standard_normal((1, 3, input_h, input_w)).astype(np.float32)
    model.eval()
    for _ in range(warmup):
        _timed_pass(model, left, right)
    per_stage = {stage: [] for stage in STAGES}
    totals = []
    for _ in range(repeats):
        times, total = _timed_pass(model, left, right)
        for stage, t in zip(STAGES, times):
            per_stage[stage].append(t)
        totals.append(total)
    report = ProfileReport(
        stages={stage: statistics.median(ts) for stage, ts in per_stage.items()},
        total=statistics.median(totals),
        repeats=repeats,
        warmup=warmup,
        threads=ops.get_num_threads(),
    )
    logger.debug('profile %dx%d: %s', input_h, input_w, report.stages)
    return report
