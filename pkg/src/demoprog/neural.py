"""Small dense networks with hand-written backprop, enough to train the pipeline's three nets."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError

LOSSES = ("mse", "softmax_ce")
DNET_MAGIC = b"DNET"
DNET_VERSION = 1


@dataclass(frozen=True)
class Head:
    dim: int
    loss: str = "mse"


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden: tuple
    heads: tuple
    pathing: str = "independent"  # or "shared"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        heads = tuple(h if isinstance(h, Head) else Head(**h) for h in self.heads)
        object.__setattr__(self, "heads", heads)
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("layer widths must be >= 1")
        if not heads or any(h.dim < 1 or h.loss not in LOSSES for h in heads):
            raise ConfigError(f"bad heads {heads}")
        if self.pathing not in ("independent", "shared"):
            raise ConfigError(f"unknown pathing {self.pathing!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["heads"] = [asdict(h) for h in self.heads]
        return d

    @classmethod
    def from_dict(cls, d) -> "NetSpec":
        return cls(d["input_dim"], tuple(d["hidden"]), tuple(Head(**h) for h in d["heads"]), d["pathing"])

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def layer_shapes(self) -> list[list[tuple[int, int]]]:
        """Per path, the (fan_in, fan_out) of each dense layer."""
        dims = [self.input_dim, *self.hidden]
        trunk = list(zip(dims[:-1], dims[1:]))
        if self.pathing == "independent":
            return [trunk + [(dims[-1], h.dim)] for h in self.heads]
        return [trunk] + [[(dims[-1], h.dim)] for h in self.heads]


@dataclass
class Params:
    spec: NetSpec
    paths: list  # list of paths, each a list of (W, b) with W shaped (fan_in, fan_out)

    def arrays(self) -> list[np.ndarray]:
        return [a for path in self.paths for layer in path for a in layer]

    def copy(self) -> "Params":
        return Params(self.spec, [[(W.copy(), b.copy()) for W, b in p] for p in self.paths])

    @property
    def spec_hash(self) -> str:
        return self.spec.digest()

    def astype(self, dtype) -> "Params":
        return Params(self.spec, [[(W.astype(dtype), b.astype(dtype)) for W, b in p] for p in self.paths])


def init_params(spec: NetSpec, seed: int, dtype=np.float32) -> Params:
    """He-normal weights (variance 2 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    paths = []
    for path in spec.layer_shapes():
        layers = []
        for fan_in, fan_out in path:
            W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)).astype(dtype)
            layers.append((W, np.zeros(fan_out, dtype=dtype)))
        paths.append(layers)
    return Params(spec, paths)


def _run_path(layers, x, relu_last, cache):
    for k, (W, b) in enumerate(layers):
        with np.errstate(invalid="ignore", over="ignore"):
            z = x @ W + b  # non-finite values are reported by the caller
        last = k == len(layers) - 1
        a = z if (last and not relu_last) else np.maximum(z, 0)
        cache.append((x, z, last and not relu_last))
        x = a
    return x


def _forward(params: Params, X, keep_cache=False):
    spec = params.spec
    X = np.asarray(X, dtype=params.paths[0][0][0].dtype)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"expected (batch, {spec.input_dim}) input, got {X.shape}")
    caches, outs = [], []
    if spec.pathing == "independent":
        for path in params.paths:
            cache = []
            outs.append(_run_path(path, X, False, cache))
            caches.append(cache)
    else:
        trunk_cache = []
        h = _run_path(params.paths[0], X, True, trunk_cache) if params.paths[0] else X
        caches.append(trunk_cache)
        for path in params.paths[1:]:
            cache = []
            outs.append(_run_path(path, h, False, cache))
            caches.append(cache)
    for o in outs:
        if not np.all(np.isfinite(o)):
            raise NumericError("non-finite activations")
    return (outs, caches) if keep_cache else outs


def forward(params: Params, X) -> list[np.ndarray]:
    """Raw per-head outputs (logits for cross-entropy heads)."""
    return _forward(params, X)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_target(head: Head, out, t):
    t = np.asarray(t)
    if head.loss == "softmax_ce" and t.ndim == 1:
        one = np.zeros_like(out)
        one[np.arange(len(t)), t.astype(int)] = 1
        return one
    t = t.astype(out.dtype)
    if t.shape != out.shape:
        raise ShapeError(f"target shape {t.shape} != output shape {out.shape}")
    return t


def head_loss(head: Head, out, target):
    """Loss value and its gradient with respect to the head's raw output.

    MSE is the mean of squared errors over batch and output dims; cross-entropy
    is averaged over the batch.
    """
    t = _as_target(head, out, target)
    B = out.shape[0]
    if head.loss == "mse":
        diff = out - t
        return float((diff**2).mean()), 2 * diff / diff.size
    p = softmax(out)
    logp = out - out.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    return float(-(t * logp).sum() / B), (p - t) / B


def loss(spec: NetSpec, outputs, targets) -> float:
    return sum(head_loss(h, o, t)[0] for h, o, t in zip(spec.heads, outputs, targets))


def _backprop_path(layers, cache, grad, grads_out):
    """Walk a path backwards; returns gradient wrt the path input."""
    for (W, b), (x, z, linear) in zip(reversed(layers), reversed(cache)):
        if not linear:
            grad = grad * (z > 0)
        grads_out.append((x.T @ grad, grad.sum(axis=0)))
        grad = grad @ W.T
    grads_out.reverse()
    return grad


def gradient(params: Params, X, targets):
    """Loss and Params-shaped gradients of the summed head losses on one batch."""
    spec = params.spec
    outs, caches = _forward(params, X, keep_cache=True)
    total = 0.0
    dout = []
    for h, o, t in zip(spec.heads, outs, targets):
        value, g = head_loss(h, o, t)
        total += value
        dout.append(g)
    grad_paths = []
    if spec.pathing == "independent":
        for layers, cache, g in zip(params.paths, caches, dout):
            gl = []
            _backprop_path(layers, cache, g, gl)
            grad_paths.append(gl)
    else:
        dh = 0
        head_grads = []
        for layers, cache, g in zip(params.paths[1:], caches[1:], dout):
            gl = []
            dh = dh + _backprop_path(layers, cache, g, gl)
            head_grads.append(gl)
        trunk = []
        if params.paths[0]:
            _backprop_path(params.paths[0], caches[0], dh, trunk)
        grad_paths = [trunk] + head_grads
    if not np.isfinite(total):
        raise NumericError("non-finite loss")
    return total, Params(spec, grad_paths)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 64
    epochs: int = 100
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # or "sgd"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled, Adam only
    train_fraction: float = 1.0
    dtype: str = "float32"

    def validate(self):
        if not 0 < self.train_fraction <= 1:
            raise ConfigError(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ConfigError("batch_size, epochs and learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def split_indices(n: int, train_fraction: float, seed: int):
    """Deterministic (train, held-out) index split."""
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    k = int(round(train_fraction * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


class Adam:
    def __init__(self, arrays, lr, betas, eps, weight_decay=0.0):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.wd = weight_decay
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.wd:
                a *= 1 - self.lr * self.wd
            a -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, arrays, grads):
        for a, g in zip(arrays, grads):
            a -= self.lr * g


@dataclass
class History:
    epochs: list = field(default_factory=list)

    def column(self, key):
        return [row[key] for row in self.epochs]


def train(spec: NetSpec, X, targets, config: TrainConfig, metric=None, params: Params | None = None):
    """Fit ``spec`` to (X, targets) on the seeded train split.

    ``targets`` holds one array per head.  ``metric(params)`` (optional) is called
    after every epoch and its dict merged into that epoch's history row.
    Returns ``(params, history, (train_idx, held_idx))``.
    """
    config.validate()
    X = np.asarray(X)
    targets = [np.asarray(t) for t in targets]
    if len(targets) != len(spec.heads):
        raise ConfigError("one target array per head required")
    train_idx, held_idx = split_indices(len(X), config.train_fraction, config.seed)
    if len(train_idx) == 0:
        raise ConfigError("empty training split")
    dtype = np.dtype(config.dtype)
    params = (params.copy() if params is not None else init_params(spec, config.seed, dtype)).astype(dtype)
    Xt = X[train_idx].astype(dtype)
    Tt = [t[train_idx] for t in targets]
    arrays = params.arrays()
    if config.optimizer == "adam":
        opt = Adam(arrays, config.learning_rate, config.betas, config.eps, config.weight_decay)
    else:
        opt = SGD(config.learning_rate)
    rng = np.random.default_rng([config.seed, 0xBA7C])
    history = History()
    for epoch in range(config.epochs):
        order = rng.permutation(len(Xt))
        running, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            value, grads = gradient(params, Xt[idx], [t[idx] for t in Tt])
            opt.step(arrays, grads.arrays())
            running += value * len(idx)
            seen += len(idx)
        row = {"epoch": epoch + 1, "loss": running / seen}
        if metric is not None:
            row.update(metric(params))
        history.epochs.append(row)
    return params, history, (train_idx, held_idx)


def head_accuracy(outputs, targets) -> float:
    """Argmax agreement for a single softmax head."""
    t = np.asarray(targets)
    labels = t if t.ndim == 1 else t.argmax(axis=1)
    return float((outputs.argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------------------
# weight files: {magic, version u32, descriptor length u32, descriptor JSON, float32 params}


def save_params(path, params: Params, meta: dict | None = None):
    desc = json.dumps({"spec": params.spec.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DNET_MAGIC + struct.pack("<II", DNET_VERSION, len(desc)) + desc)
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_params(path, expect_spec: NetSpec | None = None):
    """Returns (params, meta); spec or version mismatches raise FormatError."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != DNET_MAGIC:
        raise FormatError(f"{path}: not a weight file")
    version, n = struct.unpack("<II", raw[4:12])
    if version != DNET_VERSION:
        raise FormatError(f"{path}: weight file version {version} != {DNET_VERSION}")
    try:
        desc = json.loads(raw[12 : 12 + n])
        spec = NetSpec.from_dict(desc["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad descriptor ({exc})") from exc
    if expect_spec is not None and spec != expect_spec:
        raise FormatError(f"{path}: network spec does not match the expected one")
    body = np.frombuffer(raw[12 + n :], dtype="<f4")
    offset = 0
    paths = []
    for path_shapes in spec.layer_shapes():
        layers = []
        for fan_in, fan_out in path_shapes:
            size = fan_in * fan_out
            if offset + size + fan_out > len(body):
                raise FormatError(f"{path}: truncated parameters")
            W = body[offset : offset + size].reshape(fan_in, fan_out).astype(np.float32)
            offset += size
            b = body[offset : offset + fan_out].astype(np.float32)
            offset += fan_out
            layers.append((W, b))
        paths.append(layers)
    if offset != len(body):
        raise FormatError(f"{path}: trailing bytes after parameters")
    return Params(spec, paths), desc.get("meta", {})
