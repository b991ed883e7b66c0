import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from prunedlearn.config import parse_config
from prunedlearn.experiments import (
    EXPERIMENTS,
    GridSpec,
    accuracy_bucket,
    interpolated_crossing,
    jittered_sparsities,
    make_spec,
    run_grid,
    trial_seed,
)
from prunedlearn.stats import affine_fit, sign_test_less, threshold_crossing


def tiny(command, name, **over):
    base = {"d": 20, "K": 3, "N": 150, "max_iters": 150, "trials": 2}
    base.update(over)
    base = {k: v for k, v in base.items() if k in parse_config(command)}
    return make_spec(name, parse_config(command, overrides=base))


@pytest.fixture(scope="module")
def phase_spec():
    return tiny("phase-radius", "radius_phase_diagram", r_tilde_values="4,6", lam_values="0.5,4", eta=5.0)


@pytest.fixture(scope="module")
def phase_result(phase_spec):
    return run_grid(phase_spec)


# ---------------------------------------------------------------- stats


def test_affine_fit_matches_polyfit():
    rng = np.random.default_rng(0)
    x = rng.random(12)
    y = 3 * x - 1 + 0.1 * rng.standard_normal(12)
    fit = affine_fit(x, y)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    r2 = 1 - resid @ resid / ((y - y.mean()) @ (y - y.mean()))
    assert fit.slope == pytest.approx(slope) and fit.intercept == pytest.approx(icpt)
    assert fit.r2 == pytest.approx(r2)


def test_affine_fit_needs_two_points():
    with pytest.raises(ValueError):
        affine_fit([1.0], [2.0])


def test_sign_test_against_binomial_tail():
    a = np.array([1, 2, 3, 4, 5, 6, 7, 8.0])
    b = a + np.array([1, 1, 1, 1, 1, 1, -1, 0.0])
    # 7 nonzero pairs, 6 favour a < b: P(X >= 6 | Bin(7, 1/2)) = 8/128
    assert sign_test_less(a, b) == pytest.approx(8 / 128)
    assert sign_test_less(a, a) == 1.0


def test_threshold_crossing():
    assert threshold_crossing([1, 2, 4], [1.0, 0.95, 0.5], 0.9, largest=True) == 2
    assert threshold_crossing([100, 200, 400], [0.2, 0.9, 1.0], 0.9) == 200
    assert threshold_crossing([1, 2], [0.1, 0.2], 0.9) is None


def test_interpolated_crossing_down_and_up():
    assert interpolated_crossing([1, 2, 4], [1.0, 0.95, 0.45], 0.9, "down") == pytest.approx(2.2)
    assert interpolated_crossing([1, 2], [1.0, 1.0], 0.9, "down") == 2.0
    assert interpolated_crossing([100, 200], [0.5, 1.0], 0.9, "up") == pytest.approx(180.0)
    assert interpolated_crossing([100, 200], [0.95, 1.0], 0.9, "up") == 100.0
    assert interpolated_crossing([100, 200], [0.1, 0.5], 0.9, "up") is None


@given(st.lists(st.floats(0, 1), min_size=2, max_size=8), st.floats(0.05, 0.95))
@settings(max_examples=100, deadline=None)
def test_interpolated_crossing_lies_between_grid_points(rates, level):
    values = list(range(1, len(rates) + 1))
    got = interpolated_crossing(values, rates, level, "down")
    grid = threshold_crossing(values, rates, level, largest=True)
    if grid is None:
        assert got is None
    else:
        assert grid <= got <= grid + 1 + 1e-12


# ---------------------------------------------------------------- helpers


def test_jittered_sparsities_range():
    rng = np.random.default_rng(1)
    r = jittered_sparsities(40, 2000, 100, rng)
    assert r.min() == 36 and r.max() == 44
    with pytest.raises(ValueError, match="infeasible"):
        jittered_sparsities(100, 3, 95, rng)


def test_accuracy_bucket_edges():
    assert accuracy_bucket(0.85, 0.05) == 0.85
    assert accuracy_bucket(0.8999, 0.05) == 0.85
    assert accuracy_bucket(0.9, 0.05) == 0.9
    assert accuracy_bucket(1.0, 0.05) == 1.0


def test_trial_seed_is_counter_based():
    a = trial_seed(7, 3, 2).generate_state(4)
    assert np.array_equal(a, trial_seed(7, 3, 2).generate_state(4))
    assert not np.array_equal(a, trial_seed(7, 3, 1).generate_state(4))
    assert not np.array_equal(a, trial_seed(8, 3, 2).generate_state(4))


# ---------------------------------------------------------------- grid spec


def test_spec_json_round_trip_and_hash(phase_spec):
    doc = json.loads(json.dumps(phase_spec.to_json_dict()))
    back = GridSpec.from_json_dict(doc)
    assert back == phase_spec and back.spec_hash() == phase_spec.spec_hash()
    assert tiny("phase-radius", "radius_phase_diagram", r_tilde_values="4,6", lam_values="0.5,4",
                eta=5.0, seed=1).spec_hash() != phase_spec.spec_hash()


def test_cell_key_ignores_unseeded_axes(phase_spec):
    keys = {(c["r_tilde"], c["lam"]): phase_spec.cell_key(c) for c in phase_spec.cells()}
    assert keys[(4, 0.5)] == keys[(4, 4.0)] != keys[(6, 0.5)]


def test_spec_validation():
    with pytest.raises(ValueError):
        GridSpec.build("x", {"a": (1,), "b": (1,), "c": (1,)}, 1, {})
    with pytest.raises(ValueError):
        GridSpec.build("x", {"a": ()}, 1, {})
    with pytest.raises(ValueError):
        GridSpec.build("x", {"a": (1,)}, 1, {}, seed_axes=("b",))
    with pytest.raises(ValueError, match="unknown experiment"):
        run_grid(GridSpec.build("nope", {"a": (1,)}, 1, {}))


def test_every_experiment_is_registered():
    assert set(EXPERIMENTS) == {"radius_phase_diagram", "rate_sweep", "sample_complexity_diagram",
                                "sample_complexity_fixed_r", "noise_sweep", "inaccurate_mask_sweep",
                                "imp_sweep"}


# ---------------------------------------------------------------- runner


def test_common_random_numbers_across_radius(phase_result):
    rows = phase_result.trials
    for rt in (4, 6):
        for t in range(2):
            sel = [r for r in rows if r["r_tilde"] == rt and r["trial"] == t]
            assert len(sel) == 2
            assert sel[0]["r_tilde_actual"] == sel[1]["r_tilde_actual"]


def test_cells_and_summary_shape(phase_spec, phase_result):
    assert len(phase_result.cells) == 4
    assert all(c["n_trials"] == 2 for c in phase_result.cells)
    assert set(phase_result.summary) >= {"lam_star", "lam_star_grid", "nonincreasing",
                                         "fit_lam_star_vs_sqrt_r_tilde"}
    header = phase_result.trials_csv().splitlines()[0]
    assert header.startswith("cell,trial,r_tilde,lam,success")


def test_worker_count_does_not_change_outputs(phase_spec, phase_result):
    par = run_grid(phase_spec, threads=2)
    assert par.trials_csv() == phase_result.trials_csv()
    assert par.cells_csv() == phase_result.cells_csv()


def test_adding_trials_keeps_existing_ones(phase_spec, phase_result):
    more = GridSpec.build(phase_spec.experiment, dict(phase_spec.axes), 3, dict(phase_spec.base),
                          phase_spec.master_seed, phase_spec.seed_axes)
    rows = run_grid(more).trials
    old = {(r["cell"], r["trial"]): r for r in phase_result.trials}
    for r in rows:
        if (r["cell"], r["trial"]) in old:
            assert r == old[(r["cell"], r["trial"])]


def test_checkpoint_resume(tmp_path, phase_spec, phase_result):
    ck = tmp_path / "ck.jsonl"
    calls = []
    run_grid(phase_spec, checkpoint=str(ck))
    lines = ck.read_text().splitlines()
    assert len(lines) == 8
    # keep half the trials plus a torn trailing record, as after a crash
    ck.write_text("\n".join(lines[:4]) + "\n" + lines[4][:20])
    resumed = run_grid(phase_spec, checkpoint=str(ck), progress=lambda a, b: calls.append(a))
    assert resumed.trials_csv() == phase_result.trials_csv()
    assert calls == [5, 6, 7, 8]
    # the appended records survive a further resume
    again = run_grid(phase_spec, checkpoint=str(ck), progress=lambda a, b: calls.append(-a))
    assert calls == [5, 6, 7, 8] and again.trials_csv() == phase_result.trials_csv()


def test_checkpoint_ignores_other_grids(tmp_path, phase_spec):
    ck = tmp_path / "ck.jsonl"
    ck.write_text(json.dumps({"spec": "other", "task": [0, 0], "rows": []}) + "\n")
    res = run_grid(phase_spec, checkpoint=str(ck))
    assert len(res.trials) == 8


def test_failed_trial_becomes_error_row():
    spec = tiny("phase-radius", "radius_phase_diagram", r_tilde_values="25", lam_values="1", trials=1, d=20)
    res = run_grid(spec)
    assert res.trials[0]["reason"].startswith("error: infeasible")
    assert res.cells[0]["n_failed"] == 1 and math.isnan(res.cells[0]["success_rate"])


@pytest.mark.parametrize("command, name, over", [
    ("rate-sweep", "rate_sweep", {"r_tilde_values": "4,8", "beta_values": "0,0.2", "eta": 5.0}),
    ("sample-complexity", "sample_complexity_diagram", {"r_tilde_values": "4,6", "N_values": "60,120",
                                                        "eta": 5.0}),
    ("sample-complexity", "sample_complexity_fixed_r", {"mode": "fixed_r", "r": 4, "N_values": "60,120",
                                                        "overlap_modes": "disjoint,random", "eta": 5.0}),
    ("noise-sweep", "noise_sweep", {"r_tilde_values": "4,6", "noise_levels": "0.01,0.02", "eta": 5.0}),
    ("grasp-sweep", "inaccurate_mask_sweep", {"r": 5, "ratio_values": "60,70", "N_values": "100",
                                              "N_test": 2000, "min_bucket_trials": 1, "eta": 5.0}),
    ("imp-sweep", "imp_sweep", {"r": 5, "N_values": "60,120", "rounds": 3, "N_test": 2000, "eta": 5.0}),
])
def test_each_experiment_runs_deterministically(command, name, over):
    spec = tiny(command, name, **over)
    a = run_grid(spec)
    b = run_grid(spec, threads=2)
    assert a.trials_csv() == b.trials_csv() and a.cells_csv() == b.cells_csv()
    assert a.summary == b.summary or json.dumps(a.summary, default=str) == json.dumps(b.summary, default=str)
    assert not any(str(r.get("reason", "")).startswith("error") for r in a.trials)


def test_rate_sweep_pairs_share_randomness():
    spec = tiny("rate-sweep", "rate_sweep", r_tilde_values="4", beta_values="0,0.2", eta=5.0, trials=1)
    rows = run_grid(spec).trials
    assert rows[0]["r_tilde_actual"] == rows[1]["r_tilde_actual"]
    assert rows[0]["rate"] != rows[1]["rate"]


def test_noise_doubling_ratio_reported():
    spec = tiny("noise-sweep", "noise_sweep", r_tilde_values="4", noise_levels="0.01,0.02", eta=5.0)
    res = run_grid(spec)
    (entry,) = res.summary["doubling_ratios"]
    assert entry["ratio"] == pytest.approx(res.cells[1]["mean_rel_error"] / res.cells[0]["mean_rel_error"])


def test_sign_test_uses_scipy_convention():
    rng = np.random.default_rng(3)
    a, b = rng.random(20), rng.random(20)
    k = int((a < b).sum())
    assert sign_test_less(a, b) == pytest.approx(sps.binom.sf(k - 1, 20, 0.5))
