"""Keypoint accuracy measures: MAE, PCKh (normalized by cube size), inlier MAE, and FNR.

All three error measures share one form, sum(phi * delta) / sum(psi):

    ======  =====  =====  =====
            delta   phi    psi
    ======  =====  =====  =====
    MAE       d      1      1
    PCKh      1      c      1
    MAEc      d      c      c
    ======  =====  =====  =====

with ``c = 1`` iff ``d / sqrt(A) <= eps`` and A the hull area of the vertex's cube.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput

DEFAULT_EPSILON = 0.5


@dataclass(frozen=True)
class MetricSample:
    d: float
    hull_area: float
    epsilon: float = DEFAULT_EPSILON

    @property
    def c(self) -> bool:
        return self.d / math.sqrt(self.hull_area) <= self.epsilon

    @classmethod
    def from_points(cls, predicted, truth, hull_area, epsilon=DEFAULT_EPSILON):
        (u, v), (uh, vh) = predicted, truth
        return cls(math.hypot(u - uh, v - vh), hull_area, epsilon)


@dataclass(frozen=True)
class MetricReport:
    mae: float
    pckh: float
    maec: float | None
    fnr_missed: int
    fnr_total: int
    epsilon: float
    n: int

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "pckh": self.pckh,
            "maec": self.maec,
            "fnrMissed": self.fnr_missed,
            "fnrTotal": self.fnr_total,
            "epsilon": self.epsilon,
            "n": self.n,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def format_row(self, label="all") -> str:
        maec = "n/a" if self.maec is None else f"{self.maec:.1f}"
        return (
            f"{label:>12}  MAE {self.mae:.1f} px  PCKh@{self.epsilon:g} {100 * self.pckh:.1f}%  "
            f"MAEc@{self.epsilon:g} {maec} px  FNR {self.fnr_missed}/{self.fnr_total}"
        )


def phi_delta_ratio(delta, phi, psi):
    return float(np.dot(phi, delta) / np.sum(psi))


def correct_flags(d, hull_area, epsilon=DEFAULT_EPSILON):
    d = np.asarray(d, dtype=float)
    return (d / np.sqrt(np.asarray(hull_area, dtype=float)) <= epsilon).astype(float)


def aggregate(samples, detections=None) -> MetricReport:
    """Combine per-vertex samples (detected cubes only) with per-cube detection flags."""
    samples = list(samples)
    if not samples:
        raise EmptyInput("no metric samples")
    d = np.array([s.d for s in samples])
    area = np.array([s.hull_area for s in samples])
    eps = samples[0].epsilon
    if any(s.epsilon != eps for s in samples):
        raise ValueError("samples mix different thresholds")
    c = correct_flags(d, area, eps)
    ones = np.ones_like(d)
    mae = phi_delta_ratio(d, ones, ones)
    pckh = phi_delta_ratio(ones, c, ones)
    maec = phi_delta_ratio(d, c, c) if c.sum() > 0 else None
    missed, total = fnr(detections) if detections is not None else (0, 0)
    return MetricReport(mae, pckh, maec, missed, total, eps, len(samples))


def fnr(detections) -> tuple[int, int]:
    detections = [bool(x) for x in detections]
    if not detections:
        raise EmptyInput("no detections to score")
    return detections.count(False), len(detections)


def report_from_dict(d: dict) -> MetricReport:
    return MetricReport(d["mae"], d["pckh"], d["maec"], d["fnrMissed"], d["fnrTotal"], d["epsilon"], d["n"])

