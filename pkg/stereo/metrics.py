"""Disparity error metrics over valid pixels."""
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .exceptions import ConfigurationError, EmptyMaskError
from .regression import DisparityMap

DEFAULT_THRESHOLDS = (1.0, 2.0, 3.0)


@dataclass
class MetricsRecord:
    epe: float
    bad: Dict[float, float] = field(default_factory=dict)
    d1: float = 0.0
    valid_pixels: int = 0

    @property
    def bad_1(self):
        return self.bad[1.0]

    @property
    def bad_2(self):
        return self.bad[2.0]

    @property
    def bad_3(self):
        return self.bad[3.0]

    def as_rows(self):
        rows = [('epe', self.epe)]
        rows += [(f'bad_{t:g}', v) for t, v in sorted(self.bad.items())]
        rows += [('d1', self.d1), ('valid_pixels', self.valid_pixels)]
        return rows


def absolute_errors(pred: DisparityMap, gt: DisparityMap):
    """|pred - gt| and gt over the intersection of both validity masks."""
    if pred.shape != gt.shape:
        raise ConfigurationError(f'prediction {pred.shape} and ground truth {gt.shape} differ in shape')
    mask = pred.valid & gt.valid & np.isfinite(pred.values) & np.isfinite(gt.values)
    if not mask.any():
        raise EmptyMaskError('no valid pixels to evaluate')
    p = pred.values[mask].astype(np.float64)
    g = gt.values[mask].astype(np.float64)
    return np.abs(p - g), g


def compute_metrics(pred: DisparityMap, gt: DisparityMap, thresholds=DEFAULT_THRESHOLDS):
    """
    EPE, bad-tau rates and KITTI D1 (error > 3 px and > 5% of gt).

    Rates are fractions in [0, 1].
    """
    err, g = absolute_errors(pred, gt)
    thresholds = sorted({float(t) for t in (*DEFAULT_THRESHOLDS, *thresholds)})
    return MetricsRecord(
        epe=float(err.mean()),
        bad={t: float((err > t).mean()) for t in thresholds},
        d1=float(((err > 3.0) & (err > 0.05 * np.abs(g))).mean()),
        valid_pixels=int(err.size),
    )
