"""Belief maps: ground-truth construction, the per-stage L2 loss, and soft-argmax decoding.

Maps are stored as arrays indexed ``[row, col]`` = ``[v_cell, u_cell]``.  A cell
``(a, b)`` in the public API means ``(u_cell, v_cell)``; its center sits at image
pixel ``(8a + 3.5, 8b + 3.5)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NoDetection, OutOfFrame, ShapeError
from .geometry import IMAGE_SIZE

GRID = 50
STRIDE = 8
OFFSET = 3.5
SIGMA_IMAGE = 3.4
NUM_VERTICES = 7
NUM_STAGES = 6
DEFAULT_BETA = 0.5
DETECTION_THRESHOLD = 0.2

BMAP_MAGIC = b"BMAP"
BMAP_VERSION = 1

_CENTERS = STRIDE * np.arange(GRID) + OFFSET


def cell_center(a, b):
    return STRIDE * a + OFFSET, STRIDE * b + OFFSET


def image_to_cell(u, v):
    return (u - OFFSET) / STRIDE, (v - OFFSET) / STRIDE


def make_ground_truth_maps(vertices, sigma_image: float = SIGMA_IMAGE, image_size=IMAGE_SIZE) -> np.ndarray:
    """One unnormalized Gaussian map per vertex, shape (p, 50, 50), peak 1 on a cell center."""
    verts = np.atleast_2d(np.asarray(vertices, dtype=float))
    w, h = image_size
    if np.any(verts[:, 0] < 0) or np.any(verts[:, 0] >= w) or np.any(verts[:, 1] < 0) or np.any(verts[:, 1] >= h):
        raise OutOfFrame("vertex outside the image frame")
    # separable: exp(-(du^2 + dv^2) / 2s^2) = gu * gv, evaluated in image pixels
    gu = np.exp(-((_CENTERS[None, :] - verts[:, :1]) ** 2) / (2 * sigma_image**2))
    gv = np.exp(-((_CENTERS[None, :] - verts[:, 1:]) ** 2) / (2 * sigma_image**2))
    return gv[:, :, None] * gu[:, None, :]


def stage_loss(predicted, truth, reading: str = "pixel") -> float:
    """Loss of one stage against the ground-truth maps.

    ``reading="pixel"`` sums the magnitude of every per-pixel difference (the
    locked default).  ``reading="frobenius"`` sums one Frobenius norm per map.
    """
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape or predicted.ndim != 3:
        raise ShapeError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    diff = predicted - truth
    if reading == "pixel":
        return float(np.abs(diff).sum())
    if reading == "frobenius":
        return float(np.sqrt((diff**2).sum(axis=(1, 2))).sum())
    raise ValueError(f"unknown reading {reading!r}")


def total_loss(stages, truth, reading: str = "pixel") -> float:
    """Intermediate supervision: the stage losses summed over all t stages."""
    stages = np.asarray(stages, dtype=float)
    if stages.ndim != 4:
        raise ShapeError(f"expected (t, p, h, w) stack, got {stages.shape}")
    return sum(stage_loss(s, truth, reading) for s in stages)


def _raw_soft_argmax(grid, beta):
    grid = np.asarray(grid, dtype=float)
    if grid.shape != (GRID, GRID):
        raise ShapeError(f"expected ({GRID}, {GRID}) map, got {grid.shape}")
    peak = grid.max()
    if not peak > 0:
        raise NoDetection("belief map is empty")
    with np.errstate(divide="ignore"):
        logits = beta * np.log(np.clip(grid, 0, None) / peak)
    w = np.exp(logits)
    w /= w.sum()
    return (w.sum(axis=0) * _CENTERS).sum(), (w.sum(axis=1) * _CENTERS).sum()


def soft_argmax(grid, beta: float = DEFAULT_BETA, debias=None, sigma_image: float = SIGMA_IMAGE):
    """Decode one map to an image point (u, v).

    Cell weights are the softmax of ``beta * log(grid / max(grid))``, i.e.
    proportional to ``(grid / max) ** beta``; empty cells get zero weight.
    ``debias`` maps the weighted mean back through the Gaussian kernel's own
    response, removing the pull toward the frame center near the border and the
    grid-sampling bias.  By default it is on whenever the tempered kernel is
    smooth enough to invert (``beta`` up to about 2.9).
    """
    return tuple(float(x) for x in decode_maps([grid], beta, debias, sigma_image)[0])


def decode_maps(maps, beta: float = DEFAULT_BETA, debias=None, sigma_image: float = SIGMA_IMAGE) -> np.ndarray:
    raw = np.array([_raw_soft_argmax(m, beta) for m in maps], dtype=float).reshape(-1, 2)
    if debias is None:
        debias = sigma_image / np.sqrt(beta) >= STRIDE / 4
    if debias:
        raw[:, 0] = _invert_kernel_mean(raw[:, 0], beta, sigma_image, IMAGE_SIZE[0])
        raw[:, 1] = _invert_kernel_mean(raw[:, 1], beta, sigma_image, IMAGE_SIZE[1])
    return raw


def _kernel_mean(x, beta, sigma):
    """Soft-argmax, along one axis, of exact ground-truth maps centered at each x."""
    logw = -beta * (_CENTERS[None, :] - x[:, None]) ** 2 / (2 * sigma**2)
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    return (w * _CENTERS).sum(axis=1) / w.sum(axis=1)


def _invert_kernel_mean(m, beta, sigma, size, iters=60):
    # the kernel mean is strictly increasing in x, so bisection finds the unique preimage
    lo = np.full(len(m), -size / 2)
    hi = np.full(len(m), 1.5 * size)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = _kernel_mean(mid, beta, sigma) < m
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return np.clip(0.5 * (lo + hi), 0.0, size)


def detection_confidence(maps) -> float:
    maps = np.asarray(maps, dtype=float)
    return float(maps.reshape(len(maps), -1).max(axis=1).mean())


def is_detected(confidence: float, threshold: float = DETECTION_THRESHOLD) -> bool:
    return confidence >= threshold


# ---------------------------------------------------------------------------
# binary stack files: header {magic, version, t, p, h, w}, float32 cells


def write_stack(path, stack):
    stack = np.asarray(stack, dtype="<f4")
    if stack.ndim != 4:
        raise ShapeError(f"expected (t, p, h, w), got {stack.shape}")
    with open(path, "wb") as fh:
        fh.write(BMAP_MAGIC + struct.pack("<5I", BMAP_VERSION, *stack.shape))
        fh.write(np.ascontiguousarray(stack).tobytes())


def read_stack(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != BMAP_MAGIC:
        raise FormatError(f"{path}: not a belief-map file")
    version, t, p, h, w = struct.unpack("<5I", raw[4:24])
    if version != BMAP_VERSION:
        raise FormatError(f"{path}: version {version} != {BMAP_VERSION}")
    body = raw[24:]
    if len(body) != 4 * t * p * h * w:
        raise FormatError(f"{path}: truncated body")
    return np.frombuffer(body, dtype="<f4").reshape(t, p, h, w).copy()


# ---------------------------------------------------------------------------
# synthetic detector used for metric evaluation on simulated scenes


@dataclass
class DetectorNoise:
    """Stand-in for the image network: perturbs where each vertex's peak lands."""

    jitter_px: float = 1.5
    occluded_jitter_px: float = 6.0
    occluded_peak: float = 0.6
    miss_level: float = 0.1
    miss_prob: float = 0.02


def synthetic_final_stage(projected, rng, noise: DetectorNoise | None = None) -> np.ndarray:
    """Final-stage maps for the 7 visible vertices of one projected cuboid."""
    noise = noise or DetectorNoise()
    verts = projected.visible_vertices()
    occ = projected.visible_occluded()
    if rng.random() < noise.miss_prob:
        return noise.miss_level * rng.random((NUM_VERTICES, GRID, GRID))
    sigma = np.where(occ, noise.occluded_jitter_px, noise.jitter_px)
    shifted = verts + rng.normal(size=verts.shape) * sigma[:, None]
    w, h = IMAGE_SIZE
    shifted = np.clip(shifted, 0, [w - 1e-6, h - 1e-6])
    maps = make_ground_truth_maps(shifted)
    return maps * np.where(occ, noise.occluded_peak, 1.0)[:, None, None]
