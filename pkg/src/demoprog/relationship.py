"""Pairwise relationship inference from projected cube vertices.

A small classifier sees the 7 visible vertices of two cubes (28 normalized
coordinates) and scores Above / Left / None; running it on every ordered pair
builds the scene's state tensor.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import shapely

from .errors import ConfigError, DiagonalError, IncompleteDetection, TooFewObjects
from .geometry import (
    ABOVE,
    IMAGE_SIZE,
    LEFT,
    NONE,
    REL_NAMES,
    SceneGenConfig,
    convex_hull,
    ground_truth_relations,
    project_scene,
    randomize_scene,
)
from .neural import Head, NetSpec, TrainConfig, forward, softmax, train

FEATURES = 28
THRESHOLD = 0.5


def _normalize(points, image_size):
    w, h = image_size
    return np.asarray(points, dtype=float) / np.array([w, h], dtype=float)


def vertex_features(va, vb, image_size=IMAGE_SIZE) -> np.ndarray:
    """28 features from two (7, 2) pixel arrays, already in canonical order."""
    va, vb = np.asarray(va, dtype=float), np.asarray(vb, dtype=float)
    if va.shape != (7, 2) or vb.shape != (7, 2) or not (np.isfinite(va).all() and np.isfinite(vb).all()):
        raise IncompleteDetection("each cube needs 7 resolved vertices")
    return np.concatenate([_normalize(va, image_size).ravel(), _normalize(vb, image_size).ravel()])


def pair_features(a, b, image_size=IMAGE_SIZE) -> np.ndarray:
    return vertex_features(a.visible_vertices(), b.visible_vertices(), image_size)


@dataclass(frozen=True)
class PairObservation:
    """Features of one ordered pair plus what augmentation needs to know about occlusion."""

    features: np.ndarray  # (28,)
    occluded: np.ndarray  # (14,) bool
    occluder_hulls: tuple  # 14 entries: (k, 2) normalized hull outline or None


def observe_pair(projections, i, j, image_size=IMAGE_SIZE) -> PairObservation:
    feats = pair_features(projections[i], projections[j], image_size)
    occluded, hulls = [], []
    for p in (projections[i], projections[j]):
        occ = p.visible_occluded()
        who = np.asarray(p.occluder)[p.visible_order()]
        occluded.extend(bool(o) for o in occ)
        for o, k in zip(occ, who):
            if o and k >= 0:
                hull = convex_hull(projections[k].vertices)
                hulls.append(_normalize(np.asarray(hull.exterior.coords), image_size))
            else:
                hulls.append(None)
    return PairObservation(feats, np.array(occluded), tuple(hulls))


@dataclass(frozen=True)
class AugConfig:
    independent_sigma: float = 1e-3
    structured_sigma: float = 5e-4
    confusion_prob: float = 0.01
    occlusion_prob: float = 0.5
    independent: bool = True
    structured: bool = True
    confusion: bool = True
    occlusion: bool = True

    def __post_init__(self):
        for p in (self.confusion_prob, self.occlusion_prob):
            if not 0 <= p <= 1:
                raise ConfigError("augmentation probabilities must lie in [0, 1]")
        if self.independent_sigma < 0 or self.structured_sigma < 0:
            raise ConfigError("noise sigmas must be non-negative")

    def to_dict(self):
        return asdict(self)


NO_AUG = AugConfig(independent=False, structured=False, confusion=False, occlusion=False)


def sample_in_polygon(outline, rng, max_tries=10000):
    """Uniform point inside a convex outline by rejection from its bounding box."""
    poly = shapely.Polygon(outline)
    lo, hi = outline.min(axis=0), outline.max(axis=0)
    for _ in range(max_tries):
        p = rng.uniform(lo, hi)
        if shapely.contains_xy(poly, p[0], p[1]):
            return p
    return np.asarray(poly.representative_point().coords[0])


def augment(obs: PairObservation, rng, config: AugConfig = AugConfig()) -> np.ndarray:
    """One noisy copy of the pair's features (occlusion, confusion, then Gaussian noise)."""
    v = obs.features.reshape(14, 2).copy()
    if config.occlusion and config.occlusion_prob > 0:
        for k in np.flatnonzero(obs.occluded):
            if obs.occluder_hulls[k] is not None and rng.random() < config.occlusion_prob:
                v[k] = sample_in_polygon(obs.occluder_hulls[k], rng)
    if config.confusion and config.confusion_prob > 0:
        src = v.copy()
        for k in range(14):
            if rng.random() < config.confusion_prob:
                base = 7 * (k // 7)
                other = base + (k - base + 1 + int(rng.integers(6))) % 7
                v[k] = src[other]
    if config.structured and config.structured_sigma > 0:
        v[:7] += rng.normal(0, config.structured_sigma, 2)
        v[7:] += rng.normal(0, config.structured_sigma, 2)
    if config.independent and config.independent_sigma > 0:
        v += rng.normal(0, config.independent_sigma, v.shape)
    return v.ravel()


def geometric_label(scene, i, j) -> int:
    if i == j:
        raise DiagonalError("a cube has no relation to itself")
    rel = ground_truth_relations(scene)[i, j]
    return int(np.argmax(rel))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class PairDataset:
    X: np.ndarray  # (m, 28)
    y: np.ndarray  # (m,) labels over (Above, Left, None)
    scene_id: np.ndarray
    aug_tag: str = "none"

    def __len__(self):
        return len(self.y)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(
                {"features": [round(float(f), 7) for f in x], "label": REL_NAMES[int(l)], "sceneId": int(s), "augTag": self.aug_tag}
            )
            + "\n"
            for x, l, s in zip(self.X, self.y, self.scene_id)
        )

    @classmethod
    def from_jsonl(cls, text: str):
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        X = np.array([r["features"] for r in rows], dtype=np.float32).reshape(-1, FEATURES)
        y = np.array([REL_NAMES.index(r["label"]) for r in rows], dtype=np.int64)
        s = np.array([r["sceneId"] for r in rows], dtype=np.int64)
        return cls(X, y, s, rows[0]["augTag"] if rows else "none")


def scene_pairs(seed: int, index: int, scene_config: SceneGenConfig | None = None):
    """(observations, labels) for every ordered pair of one generated scene."""
    rng = np.random.default_rng([seed, index])
    scene, camera = randomize_scene(rng, scene_config)
    proj = project_scene(scene, camera)
    labels = ground_truth_relations(scene).argmax(axis=2)
    obs, lab = [], []
    for i in range(scene.n):
        for j in range(scene.n):
            if i != j:
                obs.append(observe_pair(proj, i, j))
                lab.append(int(labels[i, j]))
    return obs, lab


def generate_pair_dataset(n_pairs: int, seed: int, aug: AugConfig = NO_AUG, scene_config=None, tag=None) -> PairDataset:
    """At least ``n_pairs`` labelled pairs from seeded scenes, each augmented once.

    Scene ``k`` depends only on (seed, k) and its augmentation only on (seed, k, 1),
    so the result does not depend on how the work is scheduled.
    """
    if n_pairs < 1:
        raise ConfigError("n_pairs must be positive")
    scene_config = scene_config or SceneGenConfig(n_min=2, n_max=6)
    X, y, sid = [], [], []
    k = 0
    while len(y) < n_pairs:
        obs, lab = scene_pairs(seed, k, scene_config)
        rng = np.random.default_rng([seed, k, 1])
        for o, l in zip(obs, lab):
            X.append(augment(o, rng, aug))
            y.append(l)
            sid.append(k)
        k += 1
    return PairDataset(np.array(X, dtype=np.float32), np.array(y), np.array(sid), tag or _aug_tag(aug))


def _aug_tag(aug: AugConfig) -> str:
    on = [name for name in ("independent", "structured", "confusion", "occlusion") if getattr(aug, name)]
    return "+".join(on) or "none"


# Occlusion-heavy test conditions: detectors often put hidden vertices on the occluder.
OCCLUSION_HEAVY = AugConfig(
    independent_sigma=1.0 / IMAGE_SIZE[0], occlusion_prob=0.7, structured=False, confusion=False
)


def occlusion_test_config(n_max=6) -> SceneGenConfig:
    return SceneGenConfig(n_min=3, n_max=n_max, mix={"mixed": 1.0, "row": 0.5, "pyramid": 0.5})


# ---------------------------------------------------------------------------
# classifier


def rel_net_spec(hidden_layers: int = 3, width: int = 100) -> NetSpec:
    return NetSpec(FEATURES, (width,) * hidden_layers, (Head(3, "softmax_ce"),))


def train_rel_net(data: PairDataset, config: TrainConfig, hidden_layers=3, width=100):
    spec = rel_net_spec(hidden_layers, width)
    return train(spec, data.X, [data.y], config)


def rel_probabilities(params, X) -> np.ndarray:
    """(m, 2) probabilities of (Above, Left)."""
    return softmax(forward(params, np.asarray(X, dtype=np.float32))[0])[:, :2]


def net_scorer(params):
    def score(pairs, features):
        return rel_probabilities(params, features)

    return score


def oracle_scorer(scene):
    """Scorer that reads the answer off the geometry instead of the vertices."""
    gt = ground_truth_relations(scene)

    def score(pairs, features):
        return np.array([gt[i, j, :2] for i, j in pairs], dtype=float).reshape(-1, 2)

    return score


def ordered_pairs(n):
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def build_state(projections, scorer, image_size=IMAGE_SIZE, pyramid_scorer=None) -> np.ndarray:
    """Score every ordered pair; returns an (n, n, 3) float tensor with zero diagonal.

    ``scorer(pairs, features)`` returns (m, 2) Above/Left scores.  If
    ``pyramid_scorer`` is given, its Above scores replace the primary ones for
    pairs whose lower cube has a Left neighbour (candidate pyramid supports).
    """
    n = len(projections)
    if n < 2:
        raise TooFewObjects("need at least two cubes")
    pairs = ordered_pairs(n)
    feats = np.stack([pair_features(projections[i], projections[j], image_size) for i, j in pairs])
    scores = np.asarray(scorer(pairs, feats), dtype=float)
    state = np.zeros((n, n, 3))
    for (i, j), s in zip(pairs, scores):
        state[i, j, ABOVE], state[i, j, LEFT] = s
    if pyramid_scorer is not None:
        adjacent = (state[:, :, LEFT] >= THRESHOLD) | (state[:, :, LEFT] >= THRESHOLD).T
        cand = [k for k, (i, j) in enumerate(pairs) if adjacent[j].any()]
        if cand:
            alt = np.asarray(pyramid_scorer([pairs[k] for k in cand], feats[cand]), dtype=float)
            for k, s in zip(cand, alt):
                i, j = pairs[k]
                state[i, j, ABOVE] = s[0]
    off = ~np.eye(n, dtype=bool)
    state[:, :, NONE] = np.where(off, np.clip(1 - state[:, :, :2].max(axis=2), 0, 1), 0)
    return state


def threshold_state(scores, tau: float = THRESHOLD) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    n = s.shape[0]
    out = np.zeros((n, n, 3), dtype=np.uint8)
    out[:, :, :2] = s[:, :, :2] >= tau
    out[:, :, NONE] = 1 - out[:, :, :2].max(axis=2)
    out[np.arange(n), np.arange(n)] = 0
    return out


def eval_rel(scores, labels, tau: float = THRESHOLD):
    """(FPR, FNR): unrelated pairs scored as related, related pairs whose true
    relation scores below ``tau``."""
    scores = np.asarray(scores, dtype=float).reshape(-1, 2)
    labels = np.asarray(labels)
    none = labels == NONE
    fpr = float((scores[none].max(axis=1) >= tau).mean()) if none.any() else 0.0
    rel = ~none
    fnr = float((scores[rel, labels[rel]] < tau).mean()) if rel.any() else 0.0
    return fpr, fnr


def pair_accuracy(scores, labels, tau: float = THRESHOLD) -> float:
    """Fraction of pairs whose thresholded (Above, Left) bits equal the label's."""
    scores = np.asarray(scores, dtype=float).reshape(-1, 2)
    labels = np.asarray(labels)
    want = np.zeros_like(scores, dtype=bool)
    rel = labels != NONE
    want[np.flatnonzero(rel), labels[rel]] = True
    return float(np.all((scores >= tau) == want, axis=1).mean())
