import xml.etree.ElementTree as ET

import numpy as np
import pytest

from usrlab import evaluation as ev
from usrlab.config import build_config
from usrlab.env import new_world
from usrlab.models import UsrModel


@pytest.fixture(scope="module")
def world():
    return new_world(seed=0)


def test_mean_stderr():
    assert ev.mean_stderr([2.0]) == (2.0, 0.0)
    m, se = ev.mean_stderr([1.0, 2.0, 3.0])
    assert m == 2.0 and se == pytest.approx(1.0 / np.sqrt(3))
    with pytest.raises(ValueError):
        ev.mean_stderr([])


def test_trailing_mean():
    np.testing.assert_allclose(ev.trailing_mean([1, 0, 1, 1], window=2), [1, 0.5, 0.5, 1])


def test_steps_to_threshold_needs_full_window():
    steps = np.arange(1, 11) * 10
    returns = np.array([1, 1, 0, 0, 1, 1, 1, 1, 1, 1], float)
    assert ev.steps_to_threshold(steps, returns, threshold=0.8, window=4) == 80
    assert ev.steps_to_threshold(steps[:3], returns[:3], window=4) is None
    assert ev.steps_to_threshold(steps, np.zeros(10), window=4) is None


def test_trend_sign():
    assert ev.trend([1, 5, 10, 20, 40], [5, 4, 3, 2, 1]) == pytest.approx(-1.0)
    assert ev.trend([1, 5, 10, 20, 40], [1, 2, 3, 4, 5]) == pytest.approx(1.0)


def test_cross_entropy_identities():
    mask = np.ones(3, bool)
    uniform = np.full((3, 4), 0.25)
    onehot = np.eye(4)[[0, 1, 2]]
    assert ev.policy_ce(uniform, onehot, mask) == pytest.approx(np.log(4))
    p = np.array([[0.7, 0.1, 0.1, 0.1]] * 3)
    assert ev.policy_ce(p, p, mask) == pytest.approx(-(p[0] * np.log(p[0])).sum())
    # zero model probability is clamped, not infinite
    assert ev.policy_ce(onehot, np.roll(onehot, 1, axis=1), mask) == pytest.approx(-np.log(ev.PROB_FLOOR))


def test_oracle_reference_against_itself(world):
    model = UsrModel(world.obs_dim, seed=0, feature_mode="onehot")
    goal = world.goal_pools()[1][0]
    psi, pi = ev.oracle_reference(model, world, goal)
    mask = ev._non_goal(world, goal)
    assert ev.usr_mse(psi, psi, mask) == 0.0
    assert not mask[world.index[goal]] and mask.sum() == world.n_cells - 1
    np.testing.assert_allclose(pi.sum(axis=1), 1.0)


def test_untrained_model_policy_ce(world):
    model = UsrModel(world.obs_dim, seed=0, feature_mode="onehot")
    rows = ev.goal_metrics(model, world, world.goal_pools()[1][:2])
    # zero-initialised policy head: uniform policy, CE = log 4 against near-deterministic pi*
    for _, mse, ce in rows:
        assert mse > 0 and ce == pytest.approx(np.log(4), abs=1e-6)


def test_aggregate_requires_equal_repeats():
    rows = [(1, "usr_mse", 0, 1.0), (1, "usr_mse", 1, 3.0), (5, "usr_mse", 0, 2.0)]
    with pytest.raises(ValueError):
        ev.aggregate_generalization(rows)
    pts = ev.aggregate_generalization(rows[:2])
    assert pts[0].mean == 2.0 and pts[0].n_repeats == 2


def test_curve_and_speedup():
    def cell(seed, baseline, hit):
        steps = np.arange(1, 201) * 100
        returns = (steps >= hit).astype(float)
        return ev.CellResult(20, seed, baseline, steps, returns, ev.steps_to_threshold(steps, returns))

    treat = ev.curve_from_cells(20, False, [cell(s, False, 5000) for s in range(3)], 20000)
    base = ev.curve_from_cells(0, True, [cell(s, True, 10000) for s in range(3)], 20000)
    assert treat.env_step[0] == 500 and treat.env_step[-1] == 20000
    np.testing.assert_allclose(treat.stderr, 0, atol=1e-12)
    # 40 of the trailing 50 episodes must succeed: threshold crossed 39 episodes after the hit
    assert [c.steps_to_threshold for c in treat.cells + base.cells] == [8900] * 3 + [13900] * 3
    assert ev.speedup([treat, base], 20) == pytest.approx(1 - 8900 / 13900)


def test_never_reaching_counts_full_budget():
    steps = np.arange(1, 101) * 100
    miss = ev.CellResult(0, 0, True, steps, np.zeros(100), None)
    hit = ev.CellResult(20, 0, False, steps, np.ones(100), ev.steps_to_threshold(steps, np.ones(100)))
    curves = [ev.curve_from_cells(20, False, [hit], 10000), ev.curve_from_cells(0, True, [miss], 10000)]
    assert ev.speedup(curves, 20) == pytest.approx(1 - 5000 / 10000)


def test_emit_is_deterministic_and_well_formed(tmp_path):
    rows = [(k, m, s, 1.0 / (k + s + 1)) for k in (1, 5) for m in ("usr_mse", "policy_ce") for s in (0, 1)]
    a = ev.emit_generalization(rows, tmp_path / "a_")
    b = ev.emit_generalization(rows, tmp_path / "b_")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    assert a[0].read_text().splitlines()[0] == "k,metric,seed,value"
    for svg in a[1:]:
        assert ET.parse(svg).getroot().tag.endswith("svg")
    with pytest.raises(ValueError):
        ev.emit_generalization([], tmp_path / "c_")


def test_failed_cells_are_reported(tmp_path):
    steps = np.arange(1, 61) * 10
    ok = ev.CellResult(1, 0, False, steps, np.ones(60), 500)
    bad = ev.CellResult(1, 1, False, np.zeros(0, np.int64), np.zeros(0), None, "diverged: psi")
    curves = [ev.curve_from_cells(1, False, [ok, bad], 600)]
    paths = ev.emit_transfer(curves, f"{tmp_path}/")
    lines = paths[0].read_text().splitlines()
    assert lines[0] == "k,seed,env_step,reward,is_baseline,failures"
    assert "1,1,,,0,diverged: psi" in lines
    assert len(lines) == 1 + 60 + 1
    ET.parse(paths[2])


def test_small_sweep_runs(world):
    cfg = build_config({"model.d": 8, "model.hidden": 16, "model.ae_hidden": 16, "train.phase1_epochs": 50,
                        "train.max_env_steps": 300, "experiment.k_values": [1, 2], "experiment.seeds": [0]})
    trained = {}
    rows = ev.generalization_sweep(cfg, trained=trained)
    assert sorted(trained) == [(1, 0), (2, 0)]
    assert [(r[0], r[1]) for r in rows] == [(1, "usr_mse"), (1, "policy_ce"), (2, "usr_mse"), (2, "policy_ce")]
    assert all(np.isfinite(r[3]) for r in rows)
    again = ev.generalization_sweep(cfg)
    assert again == rows
