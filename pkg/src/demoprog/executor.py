"""Closed-loop program execution: next-action oracle, simulated world with faults, execution net.

Actions place ``source`` onto / left of ``target``; ``target=None`` means "move to a
free spot on the table".  The oracle works purely on binary state tensors, the
world on cube poses, with ``geometry.ground_truth_relations`` deriving one from
the other.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon

from .errors import ActionRejected, ConfigError, InvalidScene, ObjectReferenceError
from .geometry import ABOVE, EDGE, LEFT, PALETTE, CuboidPose, Scene, ground_truth_relations
from .neural import Head, NetSpec, TrainConfig, forward, train
from .program import Program, Step, enumerate_goals, fill_none, program_to_tensor

N_MAX = 6
SLOT_SPACING = 3 * EDGE


@dataclass(frozen=True)
class Action:
    source: int | None = None
    target: int | None = None  # None: the table
    rel: int = ABOVE
    done: bool = False

    def __post_init__(self):
        if not self.done:
            if self.source is None:
                raise ValueError("a move needs a source")
            if self.source == self.target:
                raise ValueError("source and target must differ")

    def to_dict(self) -> dict:
        if self.done:
            return {"done": True}
        return {
            "done": False,
            "source": self.source,
            "target": "table" if self.target is None else self.target,
            "rel": ("Above", "Left")[self.rel],
        }

    def describe(self, names=None) -> str:
        if self.done:
            return "done"
        names = names or PALETTE
        if self.target is None:
            return f"move {names[self.source]} to the table"
        if self.rel == LEFT:
            return f"place {names[self.source]} left of {names[self.target]}"
        return f"place {names[self.source]} on {names[self.target]}"


DONE = Action(done=True)


@dataclass(frozen=True)
class Perturbation:
    """At ``step``, knock ``obj`` (and whatever rests on it) onto free table spots."""

    step: int
    obj: int


@dataclass(frozen=True)
class FaultConfig:
    action_failure_prob: float = 0.0
    fail_at_steps: tuple = ()
    perturbations: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.action_failure_prob <= 1.0:
            raise ConfigError("action_failure_prob must be in [0, 1]")


NO_FAULTS = FaultConfig()


# ---------------------------------------------------------------------------
# symbolic helpers on binary state tensors


def embed(goal, n):
    g = np.zeros((n, n, 3), dtype=np.uint8)
    m = goal.shape[0]
    g[:m, :m] = goal
    return fill_none(g)


def same_relations(a, b) -> bool:
    return bool(np.array_equal(np.asarray(a)[..., :2], np.asarray(b)[..., :2]))


def program_goal(program: Program, n: int | None = None):
    g = program.goal()
    return embed(g, n) if n is not None and n != program.n else g


def _closure_bottom_up(obj, goal_sup, goal_right):
    """Objects ``obj`` depends on (supports, pyramid partners), deepest first."""
    order, seen = [], set()

    def visit(o):
        if o in seen:
            return
        seen.add(o)
        for s in goal_sup[o]:
            visit(s)
        if o in goal_right:
            visit(goal_right[o])
        order.append(o)

    visit(obj)
    return order


def next_action_oracle(program: Program, state) -> Action:
    """Next action toward the program's goal from a binary state.

    Walks the program in order; the first step whose prerequisites or source are
    out of place is acted on.  Anything resting where it should not is moved to
    the table first, topmost cube first.
    """
    state = np.asarray(state)
    n = state.shape[0]
    for s in program.steps:
        if s.pick >= n or s.place >= n:
            raise ObjectReferenceError(f"step {s} mentions an object absent from the {n}-object state")
    goal = program_goal(program, n) if program.n <= n else None
    if goal is None:
        raise ObjectReferenceError(f"program for {program.n} objects, state has {n}")
    if same_relations(state, goal):
        return DONE
    above = state[:, :, ABOVE].astype(bool)
    left = state[:, :, LEFT].astype(bool)
    goal_sup = [set(np.flatnonzero(goal[o, :, ABOVE]).tolist()) for o in range(n)]
    goal_right = {int(i): int(j) for i, j in zip(*np.nonzero(goal[:, :, LEFT]))}
    step_of = {s.pick: s for s in program.steps}

    def clear(o):
        return not above[:, o].any()

    def placed_ok(o):
        if set(np.flatnonzero(above[o]).tolist()) != goal_sup[o]:
            return False
        if o in goal_right and not left[o, goal_right[o]]:
            return False
        return not any(j != goal_right.get(o) for j in np.flatnonzero(left[o]))

    def topmost(o):
        while not clear(o):
            o = int(np.flatnonzero(above[:, o])[0])
        return o

    def to_table(o):
        return Action(topmost(o), None, ABOVE)

    def perform(step: Step):
        src = step.pick
        if not clear(src):
            return to_table(src)
        targets = [step.place]
        if step.rel == ABOVE and len(goal_sup[src]) == 2:
            targets = sorted(goal_sup[src])
        for t in targets:
            if not clear(t):
                return to_table(t)
        if step.rel == ABOVE and len(targets) == 1:
            # a stray right-hand neighbour with a free top would turn this into a straddle
            for r in np.flatnonzero(left[step.place]):
                r = int(r)
                if r != src and clear(r) and goal_right.get(step.place) != r:
                    return to_table(r)
        if step.rel == LEFT:
            squatters = [int(k) for k in np.flatnonzero(left[:, step.place]) if k != src]
            if squatters:
                return to_table(squatters[0])
        return Action(src, step.place, step.rel)

    def fix(o):
        if o in step_of:
            return perform(step_of[o])
        return to_table(o)

    for step in program.steps:
        for o in _closure_bottom_up(step.pick, goal_sup, goal_right):
            if not placed_ok(o):
                return fix(o)
    for o in range(n):
        if not placed_ok(o):
            return fix(o)
    # only stray adjacencies remain
    pinned = set(goal_right) | set(goal_right.values()) | set(step_of)
    pinned |= {int(s) for o in range(n) for s in goal_sup[o]}
    for i, j in zip(*np.nonzero(left & ~goal[:, :, LEFT].astype(bool))):
        i, j = int(i), int(j)
        for o in (i, j):
            if clear(o) and o not in pinned:
                return to_table(o)
        return to_table(i if i not in goal_right and i not in step_of else j)
    return DONE


def symbolic_apply(state, action: Action):
    """Binary-state effect of an action that succeeds (used for dataset enumeration)."""
    g = np.array(state, dtype=np.uint8, copy=True)
    if action.done:
        return g
    s, t = action.source, action.target
    right = {int(i): int(j) for i, j in zip(*np.nonzero(g[:, :, LEFT])) if i != s and j != s}
    g[s, :, :2] = 0
    g[:, s, LEFT] = 0
    if t is not None:
        if action.rel == LEFT:
            g[s, t, LEFT] = 1
        else:
            r = right.get(t)
            if r is not None and not g[:, t, ABOVE].any() and not g[:, r, ABOVE].any():
                g[s, r, ABOVE] = 1
            g[s, t, ABOVE] = 1
    return fill_none(g)


# ---------------------------------------------------------------------------
# geometric world


def table_slots(spacing=SLOT_SPACING, cols=4, rows=3):
    pts = [(i * spacing, j * spacing) for i in range(-cols, cols + 1) for j in range(-rows, rows + 1)]
    return sorted(pts, key=lambda p: (round(math.hypot(*p), 9), p[1], p[0]))


def flat_scene(n: int, palette=PALETTE, color_ids=None) -> Scene:
    """n cubes in a row on the table, far enough apart to share no relations."""
    ids = list(color_ids) if color_ids is not None else list(range(n))
    cubes = [
        CuboidPose(((k - (n - 1) / 2) * SLOT_SPACING, 0.0, EDGE / 2), 0.0, EDGE, ids[k]) for k in range(n)
    ]
    return Scene(tuple(cubes), EDGE, tuple(palette))


@dataclass(frozen=True, eq=False)
class World:
    scene: Scene
    step_count: int = 0
    events: tuple = ()
    state: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "state", ground_truth_relations(self.scene))


def _free_table_pose(scene: Scene, exclude: set, edge: float):
    others = [Polygon(c.footprint()) for k, c in enumerate(scene.cuboids) if k not in exclude]
    for x, y in table_slots():
        cand = Polygon(CuboidPose((x, y, edge / 2), 0.0, edge).footprint())
        if all(cand.distance(p) >= edge for p in others):
            return (x, y, edge / 2)
    raise ActionRejected("no free spot left on the table")


def _move(scene: Scene, index: int, center, yaw) -> Scene:
    old = scene.cuboids[index]
    try:
        return scene.with_pose(index, CuboidPose(center, yaw, old.edge, old.color_id))
    except InvalidScene as exc:
        raise ActionRejected(f"placement collides: {exc}") from exc


def execute_action(scene: Scene, action: Action) -> Scene:
    """Physically carry out a move, or raise ActionRejected."""
    if action.done:
        return scene
    n = scene.n
    src, tgt = action.source, action.target
    if not 0 <= src < n or (tgt is not None and not 0 <= tgt < n):
        raise ActionRejected(f"action {action} refers to a missing object")
    state = ground_truth_relations(scene)
    if state[:, src, ABOVE].any():
        raise ActionRejected("source is not clear")
    e = scene.cuboids[src].edge
    if tgt is None:
        return _move(scene, src, _free_table_pose(scene, {src}, e), 0.0)
    t = scene.cuboids[tgt]
    if action.rel == ABOVE:
        if state[:, tgt, ABOVE].any():
            raise ActionRejected("target top is occupied")
        right = [int(r) for r in np.flatnonzero(state[tgt, :, LEFT]) if r != src]
        if right and not state[:, right[0], ABOVE].any():
            r = scene.cuboids[right[0]]
            cx, cy = (t.center[0] + r.center[0]) / 2, (t.center[1] + r.center[1]) / 2
            return _move(scene, src, (cx, cy, max(t.top, r.top) + e / 2), t.yaw)
        return _move(scene, src, (t.center[0], t.center[1], t.top + e / 2), t.yaw)
    if t.bottom > 1e-6:
        raise ActionRejected("Left placement needs a target resting on the table")
    theta = t.yaw % (math.pi / 2)
    d = (t.edge + e) / 2 * (abs(math.cos(theta)) + abs(math.sin(theta)))
    return _move(scene, src, (t.center[0] - d, t.center[1], e / 2), t.yaw)


def simulate_program(program: Program, scene: Scene | None = None) -> np.ndarray:
    """Carry out every step geometrically (no faults) and return the resulting state."""
    scene = scene or flat_scene(program.n)
    for s in program.steps:
        scene = execute_action(scene, Action(s.pick, s.place, s.rel))
    return ground_truth_relations(scene)


def _knock_over(scene: Scene, obj: int) -> Scene:
    state = ground_truth_relations(scene)
    pile = [obj]
    while True:
        up = np.flatnonzero(state[:, pile[-1], ABOVE])
        if len(up) == 0:
            break
        pile.append(int(up[0]))
    for o in reversed(pile):
        c = scene.cuboids[o]
        scene = _move(scene, o, _free_table_pose(scene, {o}, c.edge), 0.0)
    return scene


def apply_action(world: World, action: Action, rng=None, faults: FaultConfig = NO_FAULTS) -> World:
    """One world step: the action (unless it fails), then any scripted perturbation."""
    step = world.step_count
    events = []
    scene = world.scene
    if not action.done:
        draw = rng.random() if rng is not None else 1.0
        if step in faults.fail_at_steps or draw < faults.action_failure_prob:
            execute_action(scene, action)  # still rejects impossible moves
            events.append({"kind": "action-failed", "step": step})
        else:
            scene = execute_action(scene, action)
    for p in faults.perturbations:
        if p.step == step:
            scene = _knock_over(scene, p.obj)
            events.append({"kind": "perturbation", "step": step, "object": p.obj})
    return World(scene, step + 1, tuple(events))


def state_hash(state) -> str:
    return hashlib.sha256(np.ascontiguousarray(state, dtype=np.uint8).tobytes()).hexdigest()[:16]


@dataclass
class Trace:
    entries: list
    success: bool
    final_state: np.ndarray

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)

    def timeline(self, names=None) -> str:
        lines = []
        for e in self.entries:
            a = e["action"]
            if a.get("done"):
                desc = "done"
            else:
                tgt = a["target"]
                tname = "the table" if tgt == "table" else (names or PALETTE)[tgt]
                verb = "left of" if a["rel"] == "Left" else "on"
                desc = f"{(names or PALETTE)[a['source']]} {verb} {tname}"
            faults = "".join(f" [{f['kind']}]" for f in e["faultEvents"])
            lines.append(f"{e['step']:3d}  {desc}{faults}")
        lines.append("success" if self.success else "did not reach the goal")
        return "\n".join(lines)


def oracle_policy(program, state):
    return next_action_oracle(program, state)


def run_closed_loop(program: Program, world: World, policy=oracle_policy, faults=NO_FAULTS, max_steps=50, rng=None):
    """Query ``policy(program, state)`` and act until it says done or ``max_steps`` pass."""
    if max_steps < 1:
        raise ConfigError("max_steps must be >= 1")
    goal = program_goal(program, world.scene.n)
    entries = []
    for _ in range(max_steps):
        action = policy(program, world.state)
        before = world.step_count
        try:
            world = apply_action(world, action, rng, faults)
            events = list(world.events)
        except ActionRejected as exc:
            events = [{"kind": "rejected", "step": before, "reason": str(exc)}]
            world = World(world.scene, before + 1, tuple(events))
        entries.append(
            {"step": before, "action": action.to_dict(), "stateTensorHash": state_hash(world.state), "faultEvents": events}
        )
        if action.done:
            break
    return Trace(entries, same_relations(world.state, goal), world.state)


# ---------------------------------------------------------------------------
# execution-network dataset and encoding (objects padded to N_MAX)


def exec_features(program: Program, state, n_max: int = N_MAX) -> np.ndarray:
    padded = Program(n_max, program.steps)
    pp, rel = program_to_tensor(padded)
    st = np.zeros((n_max, n_max, 3), dtype=np.float32)
    n = np.asarray(state).shape[0]
    st[:n, :n] = state
    return np.concatenate([pp.reshape(-1), rel.reshape(-1), st.reshape(-1)])


def action_width(n_max: int = N_MAX) -> int:
    return n_max + (n_max + 1) + 2 + 1


def encode_action(action: Action, n_max: int = N_MAX) -> np.ndarray:
    v = np.zeros(action_width(n_max), dtype=np.float32)
    if action.done:
        v[-1] = 1
        return v
    v[action.source] = 1
    v[n_max + (n_max if action.target is None else action.target)] = 1
    v[2 * n_max + 1 + action.rel] = 1
    return v


def decode_action(vec, n: int, n_max: int = N_MAX) -> Action:
    vec = np.asarray(vec)
    if vec[-1] > 0.5:
        return DONE
    src = int(np.argmax(vec[:n]))
    tgt_scores = np.concatenate([vec[n_max : n_max + n], vec[2 * n_max : 2 * n_max + 1]])
    tgt_scores[src] = -np.inf
    tgt = int(np.argmax(tgt_scores))
    rel = int(np.argmax(vec[2 * n_max + 1 : 2 * n_max + 3]))
    return Action(src, None if tgt == n else tgt, rel)


def action_match(pred, target, n_max: int = N_MAX) -> np.ndarray:
    """Per-record agreement of every argmax field (and the done flag) with the oracle."""
    pred, target = np.atleast_2d(pred), np.atleast_2d(target)
    done_t = target[:, -1] > 0.5
    done_p = pred[:, -1] > 0.5
    sl = [slice(0, n_max), slice(n_max, 2 * n_max + 1), slice(2 * n_max + 1, 2 * n_max + 3)]
    fields = np.all([pred[:, s].argmax(1) == target[:, s].argmax(1) for s in sl], axis=0)
    return np.where(done_t, done_p, ~done_p & fields)


@dataclass
class ExecDataset:
    X: np.ndarray
    Y: np.ndarray
    n_objects: np.ndarray
    kind: np.ndarray  # 0 on-path, 1 displaced

    def __len__(self):
        return len(self.X)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.X, self.Y, self.n_objects, self.kind):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def _random_displacement(state, rng):
    n = state.shape[0]
    clear = [o for o in range(n) if not state[:, o, ABOVE].any()]
    src = clear[int(rng.integers(len(clear)))]
    dests = [None] + [o for o in clear if o != src]
    tgt = dests[int(rng.integers(len(dests)))]
    return symbolic_apply(state, Action(src, tgt, ABOVE))


def enumerate_exec_dataset(n_range=(2, 6), seed: int = 0, n_max: int = N_MAX, records=False):
    """Every stack goal for n in n_range, each on-path state of its oracle run, plus
    one seeded single-cube displacement per on-path state; labelled with the oracle action."""
    lo, hi = n_range
    if not 2 <= lo <= hi <= n_max:
        raise ConfigError(f"bad object range {n_range} for n_max={n_max}")
    X, Y, N, K, recs = [], [], [], [], []
    seen = set()

    def add(program, state, kind, n):
        key = (program.steps, state.tobytes())
        if key in seen:
            return
        seen.add(key)
        action = next_action_oracle(program, state)
        X.append(exec_features(program, state, n_max))
        Y.append(encode_action(action, n_max))
        N.append(n)
        K.append(kind)
        if records:
            recs.append((program, state, action))

    for n in range(lo, hi + 1):
        for gi, (_, program) in enumerate(enumerate_goals(n)):
            rng = np.random.default_rng([seed, n, gi])
            state = np.zeros((n, n, 3), dtype=np.uint8)
            state = fill_none(state)
            path = [state]
            for _ in range(2 * n * n):
                a = next_action_oracle(program, state)
                if a.done:
                    break
                state = symbolic_apply(state, a)
                path.append(state)
            for st in path:
                add(program, st, 0, n)
            for st in path:
                add(program, _random_displacement(st, rng), 1, n)
    ds = ExecDataset(np.array(X, dtype=np.float32), np.array(Y, dtype=np.float32), np.array(N), np.array(K))
    return (ds, recs) if records else ds


def exec_net_spec(n_max: int = N_MAX, hidden_layers: int = 5, width: int = 128) -> NetSpec:
    in_dim = 2 * (n_max + 1) * (n_max - 1) + 2 * (n_max - 1) + n_max * n_max * 3
    return NetSpec(in_dim, (width,) * hidden_layers, (Head(action_width(n_max), "mse"),))


def evaluate_exec_net(params, ds: ExecDataset, batch=4096) -> float:
    ok = 0
    for s in range(0, len(ds), batch):
        pred = forward(params, ds.X[s : s + batch])[0]
        ok += int(action_match(pred, ds.Y[s : s + batch]).sum())
    return ok / len(ds)


def train_exec_net(ds: ExecDataset, config: TrainConfig, hidden_layers=5, width=128, eval_epochs=None):
    """MSE regression onto the action encoding; accuracy is measured on the whole dataset.

    ``eval_epochs`` limits full-set evaluation to those epoch numbers (default: all).
    """
    spec = exec_net_spec(hidden_layers=hidden_layers, width=width)
    counter = {"epoch": 0}

    def metric(params):
        counter["epoch"] += 1
        if eval_epochs is not None and counter["epoch"] not in eval_epochs:
            return {}
        return {"accuracy": evaluate_exec_net(params, ds)}

    return train(spec, ds.X, [ds.Y], config, metric=metric)


def learned_policy(params, n_max: int = N_MAX):
    def policy(program, state):
        n = np.asarray(state).shape[0]
        out = forward(params, exec_features(program, state, n_max)[None])[0][0]
        return decode_action(out, n, n_max)

    return policy


def random_fault_trial(seed: int, n_range=(2, 5), include_pyramids=True):
    """A seeded recovery trial: random goal, flat start, one action failure and/or one perturbation."""
    rng = np.random.default_rng([seed, 0xFA17])
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    pairs = _goal_cache(n, include_pyramids)
    _, program = pairs[int(rng.integers(len(pairs)))]
    horizon = max(1, len(program.steps))
    kind = int(rng.integers(3))
    fail = (int(rng.integers(horizon)),) if kind in (0, 2) else ()
    pert = (Perturbation(int(rng.integers(horizon)), int(rng.integers(n))),) if kind in (1, 2) else ()
    return program, World(flat_scene(n)), FaultConfig(0.0, fail, pert)


_GOALS: dict = {}


def _goal_cache(n, include_pyramids):
    key = (n, include_pyramids)
    if key not in _GOALS:
        _GOALS[key] = enumerate_goals(n, include_pyramids)
    return _GOALS[key]
