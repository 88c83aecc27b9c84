import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demoprog.errors import ConfigError, FormatError, InvalidGoal
from demoprog.geometry import ABOVE, LEFT, NONE
from demoprog.neural import TrainConfig
from demoprog.program import (
    Program,
    Step,
    complete_ambiguous_goal,
    enumerate_goals,
    fill_none,
    load_program,
    make_goal,
    program_dataset,
    program_net_spec,
    program_to_tensor,
    render_text,
    save_program,
    step_table,
    synthesize_program,
    tensor_to_program,
    train_program_net,
    validate_goal,
)

RED, GREEN, BLUE, YELLOW = 0, 1, 2, 3
EXAMPLE_SENTENCE = "Place the red cube on the green cube, then place the blue cube on the red cube."


def structure_count(n, pyramids):
    """Labelled goals via the exponential formula: pick the block holding the first cube."""

    def per_block(k):
        return math.factorial(k) * (2 if pyramids and k >= 3 else 1)

    memo = {0: 1}
    for m in range(1, n + 1):
        memo[m] = sum(math.comb(m - 1, k - 1) * per_block(k) * memo[m - k] for k in range(1, m + 1))
    return memo[n]


def lah_total(n):
    return sum(math.comb(n - 1, k - 1) * math.factorial(n) // math.factorial(k) for k in range(1, n + 1))


def kinds(goal):
    return sorted({v.kind for v in validate_goal(goal)})


# --- planner --------------------------------------------------------------


def test_worked_example_program():
    goal = make_goal(4, above=[(BLUE, RED), (RED, GREEN)])
    prog = synthesize_program(goal)
    assert prog.steps == (Step(RED, GREEN, ABOVE), Step(BLUE, RED, ABOVE))
    assert render_text(prog, ["red", "green", "blue", "yellow"]) == EXAMPLE_SENTENCE


def test_worked_example_tensor():
    prog = Program(4, (Step(RED, GREEN), Step(BLUE, RED)))
    pp, rel = program_to_tensor(prog)
    assert pp.shape == (2, 5, 3) and rel.shape == (2, 3)
    assert pp[0, RED, 0] == pp[1, GREEN, 0] == 1
    assert pp[0, BLUE, 1] == pp[1, RED, 1] == 1
    assert pp[0, 4, 2] == pp[1, 4, 2] == 1  # third slot unused
    assert rel[ABOVE, 0] == rel[ABOVE, 1] == 1 and rel[:, 2].sum() == 0
    assert tensor_to_program(pp, rel) == prog
    table = step_table(prog, width=2)
    assert table[RED][GREEN] == "10" and table[BLUE][RED] == "01"
    assert table[GREEN][RED] == "00" and table[RED][RED] == "-"


def test_empty_goal_and_program():
    prog = synthesize_program(make_goal(3))
    assert prog.steps == ()
    assert render_text(prog) == "Do nothing."
    pp, rel = program_to_tensor(prog)
    assert np.all(pp[:, 3, :] == 1) and pp[:, :3].sum() == 0 and rel.sum() == 0


def test_single_left_sentence():
    prog = Program(4, (Step(RED, YELLOW, LEFT),))
    assert render_text(prog) == "Place the red cube left of the yellow cube."


def test_missing_left_pyramid_gets_completed():
    goal = make_goal(4, above=[(GREEN, RED), (GREEN, YELLOW)])
    assert "pyramid-missing-left" in kinds(goal)
    done = complete_ambiguous_goal(goal)
    assert done[RED, YELLOW, LEFT] == 1 and done[YELLOW, RED, LEFT] == 0
    assert validate_goal(done) == []
    prog = synthesize_program(goal)
    assert prog.steps[0] == Step(RED, YELLOW, LEFT)
    assert prog.steps[1].pick == GREEN
    assert np.array_equal(prog.goal(), done)


def test_completion_leaves_other_goals_alone():
    full = make_goal(3, above=[(2, 0), (2, 1)], left=[(1, 0)])
    assert np.array_equal(complete_ambiguous_goal(full), full)
    stack = make_goal(3, above=[(1, 0)])
    assert np.array_equal(complete_ambiguous_goal(stack), stack)


def test_validation_examples():
    assert validate_goal(make_goal(3)) == []
    assert "mutual-above" in kinds(make_goal(2, above=[(0, 1), (1, 0)]))
    assert "above-cycle" in kinds(make_goal(3, above=[(0, 1), (1, 2), (2, 0)]))
    assert "left-cycle" in kinds(make_goal(3, left=[(0, 1), (1, 2), (2, 0)]))
    assert "too-many-supports" in kinds(make_goal(4, above=[(3, 0), (3, 1), (3, 2)]))
    assert validate_goal(make_goal(3, above=[(2, 0), (2, 1)], left=[(0, 1)])) == []
    with pytest.raises(InvalidGoal) as err:
        synthesize_program(make_goal(2, above=[(0, 1), (1, 0)]))
    assert err.value.violations


def test_deterministic():
    goal = make_goal(5, above=[(4, 2), (2, 0)], left=[(1, 3)])
    assert synthesize_program(goal) == synthesize_program(goal.copy())


# --- enumeration ----------------------------------------------------------


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_stack_counts_match_lah_numbers(n):
    assert len(enumerate_goals(n)) == lah_total(n) == structure_count(n, False)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_pyramid_counts_match_exponential_formula(n):
    assert len(enumerate_goals(n, True)) == structure_count(n, True)


def test_small_counts():
    assert len(enumerate_goals(2)) == 3
    assert len(enumerate_goals(3)) == 13
    with pytest.raises(ConfigError):
        enumerate_goals(1)
    with pytest.raises(ConfigError):
        enumerate_goals(8)


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_enumerated_programs_are_sound(n):
    pairs = enumerate_goals(n, include_pyramids=True)
    goals = {g.tobytes() for g, _ in pairs}
    assert len(goals) == len(pairs)
    for goal, prog in pairs:
        assert validate_goal(goal) == []
        assert len(prog) <= n - 1
        assert np.array_equal(prog.goal(), goal)
        assert tensor_to_program(*program_to_tensor(prog)) == prog


def test_enumeration_order_is_stable():
    a = [g.tobytes() for g, _ in enumerate_goals(4, True)]
    b = [g.tobytes() for g, _ in enumerate_goals(4, True)]
    assert a == b


def test_render_text_injective():
    for n in (3, 4):
        texts = [render_text(p) for _, p in enumerate_goals(n, True)]
        assert len(set(texts)) == len(texts)


def test_pyramid_sentence():
    goal = make_goal(3, above=[(2, 0), (2, 1)], left=[(0, 1)])
    assert render_text(synthesize_program(goal)) == (
        "Place the red cube left of the green cube, then place the blue cube on the red cube and the green cube."
    )


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_tensor_roundtrip_random_programs(n, seed):
    pairs = enumerate_goals(n) if n <= 5 else _six
    _, prog = pairs[np.random.default_rng(seed).integers(len(pairs))]
    pp, rel = program_to_tensor(prog)
    assert tensor_to_program(pp + 0.01 * np.random.default_rng(seed).random(pp.shape), rel) == prog


_six = enumerate_goals(6)


def test_program_file_roundtrip(tmp_path):
    prog = Program(4, (Step(RED, YELLOW, LEFT), Step(GREEN, RED)))
    save_program(tmp_path / "p.json", prog)
    assert load_program(tmp_path / "p.json") == prog
    (tmp_path / "bad.json").write_text('{"n": 3, "steps": [{"pick": 0}]}')
    with pytest.raises(FormatError):
        load_program(tmp_path / "bad.json")


def test_program_invariants_enforced():
    with pytest.raises(ValueError):
        Program(2, (Step(0, 1), Step(1, 0)))
    with pytest.raises(ValueError):
        Step(1, 1)
    with pytest.raises(ValueError):
        Program(3, (Step(0, 5),))


def test_fill_none_matches_relations():
    g = fill_none(make_goal(3, above=[(1, 0)]))
    assert g[1, 0, NONE] == 0 and g[0, 1, NONE] == 1 and g[0, 0].sum() == 0


# --- learned generator ----------------------------------------------------


def test_program_net_learns_small_set():
    pairs = enumerate_goals(3, True)
    cfg = TrainConfig(seed=0, epochs=150, batch_size=8, learning_rate=3e-3)
    params, hist, _ = train_program_net(pairs, 3, 2, 64, cfg, eval_every=50)
    assert hist.epochs[-1]["accuracy"] == 1.0
    X, T = program_dataset(pairs)
    assert X.shape == (19, 27)
    assert program_net_spec(3).heads[0].dim == 8 and program_net_spec(3).heads[1].dim == 12


def test_program_net_shape_mismatch():
    with pytest.raises(ConfigError):
        train_program_net(enumerate_goals(3), 4, 1, 8, TrainConfig(epochs=1))
