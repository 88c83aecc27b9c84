"""Program synthesis from binary goal states.

A goal is an ``(n, n, 3)`` binary tensor over (Above, Left, None).  A program is
an ordered list of pick-and-place steps that rebuilds the goal from a flat table.

Placement convention shared with the simulator: an Above step onto a cube ``t``
that has a right-hand Left neighbour ``r`` (both tops free) straddles the two,
which is how pyramid tops are placed with a single step.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InvalidGoal, ShapeError
from .geometry import ABOVE, LEFT, NONE, PALETTE
from .neural import Head, NetSpec, TrainConfig, forward, train

REL_STEP_NAMES = ("Above", "Left")


@dataclass(frozen=True)
class Step:
    pick: int | None
    place: int | None
    rel: int = ABOVE

    def __post_init__(self):
        if self.pick is not None and self.pick == self.place:
            raise ValueError("a step cannot place an object relative to itself")
        if self.rel not in (ABOVE, LEFT):
            raise ValueError(f"bad step relation {self.rel}")

    @property
    def unused(self) -> bool:
        return self.pick is None and self.place is None


@dataclass(frozen=True)
class Program:
    n: int
    steps: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) > max(self.n - 1, 0):
            raise ValueError(f"{len(self.steps)} steps exceed the n-1 = {self.n - 1} limit")
        for s in self.steps:
            for o in (s.pick, s.place):
                if o is None or not 0 <= o < self.n:
                    raise ValueError(f"step {s} references an object outside 0..{self.n - 1}")

    def __len__(self):
        return len(self.steps)

    def goal(self) -> np.ndarray:
        """The state produced by running the program from a flat table."""
        g = np.zeros((self.n, self.n, 3), dtype=np.uint8)
        right_of = {}
        loaded = set()
        for s in self.steps:
            if s.rel == LEFT:
                g[s.pick, s.place, LEFT] = 1
                right_of[s.pick] = s.place
            else:
                g[s.pick, s.place, ABOVE] = 1
                r = right_of.get(s.place)
                if r is not None and s.place not in loaded and r not in loaded:
                    g[s.pick, r, ABOVE] = 1
                    loaded.add(r)
                loaded.add(s.place)
        return fill_none(g)

    def to_dict(self, palette=None) -> dict:
        names = list(palette) if palette is not None else list(PALETTE[: self.n])
        return {
            "n": self.n,
            "palette": names,
            "steps": [{"pick": s.pick, "place": s.place, "rel": REL_STEP_NAMES[s.rel]} for s in self.steps],
        }

    @classmethod
    def from_dict(cls, d) -> "Program":
        try:
            steps = [Step(s["pick"], s["place"], REL_STEP_NAMES.index(s["rel"])) for s in d["steps"]]
            return cls(int(d["n"]), tuple(steps))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"malformed program: {exc}") from exc


def save_program(path, program: Program, palette=None):
    Path(path).write_text(json.dumps(program.to_dict(palette), indent=2) + "\n")


def load_program(path) -> Program:
    try:
        return Program.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not JSON") from exc


# ---------------------------------------------------------------------------
# goal tensors


def fill_none(goal) -> np.ndarray:
    g = np.array(goal, dtype=np.uint8, copy=True)
    n = g.shape[0]
    g[:, :, NONE] = 1 - np.maximum(g[:, :, ABOVE], g[:, :, LEFT])
    g[np.arange(n), np.arange(n), :] = 0
    return g


def make_goal(n, above=(), left=()) -> np.ndarray:
    g = np.zeros((n, n, 3), dtype=np.uint8)
    for i, j in above:
        g[i, j, ABOVE] = 1
    for i, j in left:
        g[i, j, LEFT] = 1
    return fill_none(g)


def _check_goal(goal):
    goal = np.asarray(goal)
    if goal.ndim != 3 or goal.shape[0] != goal.shape[1] or goal.shape[2] != 3:
        raise ShapeError(f"goal must be (n, n, 3), got {goal.shape}")
    return goal


@dataclass(frozen=True)
class Violation:
    kind: str
    objects: tuple

    def __str__(self):
        return f"{self.kind}{self.objects}"


def _cycles(adj, min_len):
    """Canonical simple cycles of length >= min_len in a small directed graph."""
    n = len(adj)
    found = set()

    def walk(start, node, path):
        for nxt in np.flatnonzero(adj[node]):
            nxt = int(nxt)
            if nxt == start and len(path) >= min_len:
                found.add(tuple(path))
            elif nxt > start and nxt not in path:
                walk(start, nxt, path + [nxt])

    for s in range(n):
        walk(s, s, [s])
    return sorted(found)


def validate_goal(goal) -> list[Violation]:
    g = _check_goal(goal)
    n = g.shape[0]
    above = g[:, :, ABOVE].astype(bool) & ~np.eye(n, dtype=bool)
    left = g[:, :, LEFT].astype(bool) & ~np.eye(n, dtype=bool)
    out = []
    for i in range(n):
        for j in range(i + 1, n):
            if above[i, j] and above[j, i]:
                out.append(Violation("mutual-above", (i, j)))
            if left[i, j] and left[j, i]:
                out.append(Violation("mutual-left", (i, j)))
            if (above[i, j] or above[j, i]) and (left[i, j] or left[j, i]):
                out.append(Violation("conflicting-relation", (i, j)))
    out += [Violation("above-cycle", c) for c in _cycles(above, 3)]
    out += [Violation("left-cycle", c) for c in _cycles(left, 3)]
    grounded = ~above.any(axis=1)
    for i in range(n):
        sup = tuple(int(j) for j in np.flatnonzero(above[i]))
        if len(sup) > 2:
            out.append(Violation("too-many-supports", (i, *sup)))
        if len(sup) == 2 and not (left[sup[0], sup[1]] or left[sup[1], sup[0]]):
            out.append(Violation("pyramid-missing-left", (i, *sup)))
        carried = tuple(int(k) for k in np.flatnonzero(above[:, i]))
        if len(carried) > 1:
            out.append(Violation("crowded-support", (i, *carried)))
        if left[i].sum() > 1 or left[:, i].sum() > 1:
            out.append(Violation("left-branching", (i,)))
    for i, j in zip(*np.nonzero(left)):
        i, j = int(i), int(j)
        if not (grounded[i] and grounded[j]):
            out.append(Violation("elevated-left", (i, j)))
        for s in np.flatnonzero(above[:, i]):
            if not above[s, j]:
                out.append(Violation("offset-support", (int(s), i, j)))
    return out


def complete_ambiguous_goal(goal) -> np.ndarray:
    """Add the Left relation a pyramid top implies between its two supports.

    The direction cannot be recovered from the goal alone; the lower object index
    is put on the left.
    """
    g = np.array(_check_goal(goal), dtype=np.uint8, copy=True)
    for i in range(g.shape[0]):
        sup = [int(j) for j in np.flatnonzero(g[i, :, ABOVE]) if j != i]
        if len(sup) == 2:
            a, b = sorted(sup)
            if not (g[a, b, LEFT] or g[b, a, LEFT]):
                g[a, b, LEFT] = 1
    return fill_none(g)


def _components(adj):
    n = len(adj)
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in zip(*np.nonzero(adj)):
        parent[find(int(i))] = find(int(j))
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=min)


def _levels(above):
    n = len(above)
    level = [None] * n

    def lvl(i):
        if level[i] is None:
            sup = np.flatnonzero(above[i])
            level[i] = 0 if len(sup) == 0 else 1 + max(lvl(int(j)) for j in sup)
        return level[i]

    return [lvl(i) for i in range(n)]


def synthesize_program(goal) -> Program:
    """Rule-based planner: base adjacencies first, then Above steps bottom-up, per structure."""
    g = complete_ambiguous_goal(goal)
    violations = validate_goal(g)
    if violations:
        raise InvalidGoal("goal is not buildable: " + ", ".join(map(str, violations)), violations)
    n = g.shape[0]
    above = g[:, :, ABOVE].astype(bool) & ~np.eye(n, dtype=bool)
    left = g[:, :, LEFT].astype(bool) & ~np.eye(n, dtype=bool)
    level = _levels(above)
    right_of = {int(i): int(j) for i, j in zip(*np.nonzero(left))}
    left_of = {j: i for i, j in right_of.items()}
    steps = []
    for comp in _components(above | left | above.T | left.T):
        heads = sorted(o for o in comp if o in right_of and o not in left_of)
        for h in heads:
            chain = [h]
            while chain[-1] in right_of:
                chain.append(right_of[chain[-1]])
            for k in range(len(chain) - 2, -1, -1):
                steps.append(Step(chain[k], chain[k + 1], LEFT))
        for o in sorted((o for o in comp if level[o] > 0), key=lambda o: (level[o], o)):
            sup = [int(j) for j in np.flatnonzero(above[o])]
            target = sup[0] if len(sup) == 1 else next(s for s in sup if right_of.get(s) in sup)
            steps.append(Step(o, target, ABOVE))
    return Program(n, tuple(steps))


# ---------------------------------------------------------------------------
# tensor encoding: pick/place (2, n+1, n-1) with row n meaning "none", plus a
# (2, n-1) relation channel (Above, Left) that is all-zero on unused steps


def program_to_tensor(program: Program):
    n = program.n
    steps = max(n - 1, 0)
    pp = np.zeros((2, n + 1, steps), dtype=np.float32)
    rel = np.zeros((2, steps), dtype=np.float32)
    pp[:, n, :] = 1
    for k, s in enumerate(program.steps):
        pp[:, n, k] = 0
        pp[0, s.pick, k] = 1
        pp[1, s.place, k] = 1
        rel[s.rel, k] = 1
    return pp, rel


def tensor_to_program(pp, rel=None) -> Program:
    """Argmax decode; steps whose pick or place is "none" are dropped."""
    pp = np.asarray(pp)
    if pp.ndim != 3 or pp.shape[0] != 2:
        raise ShapeError(f"program tensor must be (2, n+1, n-1), got {pp.shape}")
    n = pp.shape[1] - 1
    picks = pp[0].argmax(axis=0)
    places = pp[1].argmax(axis=0)
    rels = np.zeros(pp.shape[2], dtype=int) if rel is None else np.asarray(rel).argmax(axis=0)
    steps = []
    for k in range(pp.shape[2]):
        p, q = int(picks[k]), int(places[k])
        if p == n or q == n or p == q:
            continue
        steps.append(Step(p, q, int(rels[k])))
    return Program(n, tuple(steps))


def step_table(program: Program, width: int | None = None) -> list[list[str]]:
    """Pick-by-place table of per-step bit strings ("10" = used at step 1 of 2).

    ``width`` defaults to the n-1 step slots; pass ``len(program)`` for the compact form.
    """
    n = program.n
    k = max(n - 1, 0) if width is None else width
    pp, _ = program_to_tensor(program)
    table = [["-" if i == j else "" for j in range(n)] for i in range(n)]
    for i in range(n):
        for j in range(n):
            if i != j:
                table[i][j] = "".join(str(int(pp[0, i, s] and pp[1, j, s])) for s in range(k))
    return table


def render_text(program: Program, names=None) -> str:
    names = list(names) if names is not None else list(PALETTE[: program.n])
    if not program.steps:
        return "Do nothing."
    right_of, loaded, parts = {}, set(), []
    for s in program.steps:
        if s.rel == LEFT:
            right_of[s.pick] = s.place
            parts.append(f"place the {names[s.pick]} cube left of the {names[s.place]} cube")
            continue
        r = right_of.get(s.place)
        if r is not None and s.place not in loaded and r not in loaded:
            parts.append(f"place the {names[s.pick]} cube on the {names[s.place]} cube and the {names[r]} cube")
            loaded.add(r)
        else:
            parts.append(f"place the {names[s.pick]} cube on the {names[s.place]} cube")
        loaded.add(s.place)
    text = ", then ".join(parts)
    return text[0].upper() + text[1:] + "."


# ---------------------------------------------------------------------------
# exhaustive enumeration


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [[first]] + part
        for k in range(len(part)):
            yield part[:k] + [[first] + part[k]] + part[k + 1 :]


def _block_structures(block, include_pyramids):
    """Every labelled structure over one block: stacks, then pyramids (L, R, top, chain...)."""
    for perm in itertools.permutations(block):
        yield ("stack", perm)
    if include_pyramids and len(block) >= 3:
        for perm in itertools.permutations(block):
            yield ("pyramid", perm)


def structure_relations(kind, order):
    above, left = [], []
    if kind == "stack":
        above = [(order[k + 1], order[k]) for k in range(len(order) - 1)]
    else:
        L, R, T, *chain = order
        left = [(L, R)]
        above = [(T, L), (T, R)]
        prev = T
        for c in chain:
            above.append((c, prev))
            prev = c
    return above, left


def enumerate_goals(n: int, include_pyramids: bool = False):
    """All goals over n labelled cubes with their planner programs, in a fixed order."""
    if not 2 <= n <= 7:
        raise ConfigError(f"enumeration supports 2 <= n <= 7, got {n}")
    out = []
    for partition in _set_partitions(list(range(n))):
        partition = sorted((sorted(b) for b in partition), key=lambda b: (len(b), b))
        options = [list(_block_structures(b, include_pyramids)) for b in partition]
        for combo in itertools.product(*options):
            above, left = [], []
            for kind, order in combo:
                a, l = structure_relations(kind, order)
                above += a
                left += l
            goal = make_goal(n, above, left)
            out.append((goal, synthesize_program(goal)))
    out.sort(key=lambda gp: gp[0].tobytes())
    return out


# ---------------------------------------------------------------------------
# learned program generator: goal tensor in, two independent paths out (pick,
# place + relation), trained with MSE


def goal_features(goal) -> np.ndarray:
    return np.asarray(goal, dtype=np.float32).reshape(-1)


def program_net_spec(n: int, hidden_layers: int = 4, width: int = 1024) -> NetSpec:
    steps = n - 1
    return NetSpec(
        input_dim=n * n * 3,
        hidden=(width,) * hidden_layers,
        heads=(Head((n + 1) * steps, "mse"), Head((n + 1) * steps + 2 * steps, "mse")),
        pathing="independent",
    )


def program_dataset(pairs):
    """(X, [pick targets, place+rel targets]) from enumerated (goal, program) pairs."""
    X = np.stack([goal_features(g) for g, _ in pairs])
    picks, places = [], []
    for _, p in pairs:
        pp, rel = program_to_tensor(p)
        picks.append(pp[0].reshape(-1))
        places.append(np.concatenate([pp[1].reshape(-1), rel.reshape(-1)]))
    return X, [np.stack(picks), np.stack(places)]


def _split_outputs(outs, n):
    steps = n - 1
    B = len(outs[0])
    pick = outs[0].reshape(B, n + 1, steps)
    place = outs[1][:, : (n + 1) * steps].reshape(B, n + 1, steps)
    rel = outs[1][:, (n + 1) * steps :].reshape(B, 2, steps)
    return pick, place, rel


def program_slot_accuracy(outs, targets, n) -> dict:
    """Fraction of (step, head) slots whose argmax matches, for pick and place heads."""
    pick, place, rel = _split_outputs(outs, n)
    tpick, tplace, trel = _split_outputs(targets, n)
    ok_pick = pick.argmax(axis=1) == tpick.argmax(axis=1)
    ok_place = place.argmax(axis=1) == tplace.argmax(axis=1)
    used = trel.sum(axis=1) > 0
    rel_ok = (rel.argmax(axis=1) == trel.argmax(axis=1))[used]
    return {
        "accuracy": float((ok_pick.sum() + ok_place.sum()) / (ok_pick.size + ok_place.size)),
        "pick_accuracy": float(ok_pick.mean()),
        "place_accuracy": float(ok_place.mean()),
        "rel_accuracy": float(rel_ok.mean()) if rel_ok.size else 1.0,
        "program_accuracy": float((ok_pick.all(axis=1) & ok_place.all(axis=1)).mean()),
    }


def decode_program_outputs(outs, n) -> list[Program]:
    pick, place, rel = _split_outputs(outs, n)
    return [tensor_to_program(np.stack([pick[b], place[b]]), rel[b]) for b in range(len(pick))]


def predict_programs(params, goals) -> list[Program]:
    goals = [np.asarray(g) for g in goals]
    n = goals[0].shape[0]
    X = np.stack([goal_features(g) for g in goals])
    return decode_program_outputs(forward(params, X), n)


def train_program_net(pairs, n, hidden_layers, width, config: TrainConfig, eval_every=1):
    """Train on a seeded fraction of the enumerated set; accuracy is over the whole set."""
    X, T = program_dataset(pairs)
    spec = program_net_spec(n, hidden_layers, width)
    if X.shape[1] != spec.input_dim:
        raise ConfigError("goal tensors do not match the network input size")
    counter = {"epoch": 0}

    def metric(params):
        counter["epoch"] += 1
        if counter["epoch"] % eval_every and counter["epoch"] != config.epochs:
            return {}
        return evaluate_program_net(params, X, T, n)

    return train(spec, X, T, config, metric=metric)


def evaluate_program_net(params, X, T, n, batch=1024) -> dict:
    outs = [[], []]
    for s in range(0, len(X), batch):
        o = forward(params, X[s : s + batch])
        outs[0].append(o[0])
        outs[1].append(o[1])
    return program_slot_accuracy([np.concatenate(o) for o in outs], T, n)
