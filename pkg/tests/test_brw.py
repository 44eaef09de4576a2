import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bidla.brw import (
    PioneerStats,
    boundary_of_ball,
    brw_ensemble,
    conditioned_brw,
    conditioned_pioneer_window,
    empirical_mgf,
    exact_survival_probability,
    pioneer_stats,
    run_brw,
    stats_of,
    survival_probability_estimate,
    window_fraction,
)
from bidla.engine import ParticleConfig, drain
from bidla.lattice import FiniteDomain
from bidla.stacks import InstructionStacks


def test_root_is_counted():
    for seed in range(20):
        f = run_brw((0,), FiniteDomain.from_sites([(0,)]), InstructionStacks.create(seed, 1))
        assert f.interior == {(0,): 1}
        assert f.total_pioneers() in (0, 2)


def test_start_must_be_inside():
    with pytest.raises(ValueError):
        run_brw((5, 0), FiniteDomain.ball(3, 2), InstructionStacks.create(1, 2))


def test_trivial_stats():
    assert PioneerStats(0, 0, 0).cauchy_schwarz_holds()
    s = InstructionStacks.create(0, 1)
    st0 = pioneer_stats((0,), FiniteDomain.from_sites([(0,)]), s)
    # seed 0 splits at the root: one pioneer on each side
    assert st0 == PioneerStats(2, 2, 2)
    st1 = pioneer_stats((0,), FiniteDomain.from_sites([(0,)]), InstructionStacks.create(1, 1))
    assert st1 == PioneerStats(0, 0, 0)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**63), st.integers(1, 3), st.sampled_from([2, 3.5, 6]))
def test_cauchy_schwarz_and_root(seed, d, R):
    K = FiniteDomain.ball(R, d)
    f = run_brw((0,) * d, K, InstructionStacks.create(seed, d))
    assert f.interior[(0,) * d] >= 1
    assert stats_of(f).cauchy_schwarz_holds()
    assert all(z not in K for z in f.boundary)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**63), st.integers(1, 3))
def test_brw_matches_acceptable_stabilization(seed, d):
    # one particle toppled in acceptable mode is the BRW, on the same stacks
    K = FiniteDomain.ball(4, d)
    s = InstructionStacks.create(seed, d)
    f = run_brw((0,) * d, K, s)
    for policy in ("lex", "fast"):
        res = drain(ParticleConfig({(0,) * d: 1}), K, s, policy=policy)
        assert res.odometer.uses == f.interior
        assert res.frozen.frozen == f.boundary


def test_kernel_ensemble_matches_python_driver():
    ens = brw_ensemble(5, 2, 300, master_seed=31)
    base = InstructionStacks.create(31, 2)
    K = FiniteDomain.ball(5, 2)
    for r in range(300):
        assert ens.stats(r) == stats_of(run_brw((0, 0), K, base.replica(r)))


def _survival_d1_r2() -> float:
    # K = {-1, 0, 1}, binary law f(s) = (1 + s^2) / 2:
    # q0 = f(q1), q1 = f(q0 / 2) by symmetry; minimal root from q = 0
    f = lambda s: (1 + s * s) / 2
    q0 = q1 = 0.0
    for _ in range(10_000):
        q0, q1 = f(q1), f(q0 / 2)
    return 1 - q0


def test_survival_small_case_exact():
    p = _survival_d1_r2()
    assert exact_survival_probability(2, 1) == pytest.approx(p, abs=1e-12)
    est = survival_probability_estimate(2, 1, 200_000, master_seed=77)
    assert abs(est.value - p) < 3 * est.se


def test_survival_preconditions():
    with pytest.raises(ValueError):
        survival_probability_estimate(8, 2, 0)
    with pytest.raises(ValueError):
        brw_ensemble(8, 2, 0, 1)


def test_window_degenerate_and_partition():
    totals = np.array([0, 0, 1, 3, 50, 7, 0, 2])
    assert window_fraction(totals, 4, 0, math.inf).value == 1.0
    inside = window_fraction(totals, 4, 0.1, 0.2)
    low = window_fraction(totals, 4, 0, 0.1 - 1e-12)
    high = window_fraction(totals, 4, 0.2 + 1e-12, math.inf)
    assert inside.value + low.value + high.value == pytest.approx(1.0, abs=1e-12)
    empty = window_fraction(np.zeros(5, dtype=int), 4, 0.1, 1)
    assert empty.value is None and empty.survivors == 0


def test_conditioned_window_stays_positive():
    vals = []
    for R, n in [(8, 20_000), (16, 60_000), (32, 200_000)]:
        w = conditioned_pioneer_window(R, 0.1, 20, n, master_seed=4242 + R)
        assert w.survivors >= 1000
        vals.append(w.value)
    # no collapse towards 0 over a 4x range of R
    assert min(vals) > 0.25
    assert vals[-1] > 0.5 * vals[0]


def test_mgf_does_not_blow_up():
    ms = []
    for R in (8, 16, 32):
        ens = brw_ensemble(R, 2, 20_000, master_seed=900 + R)
        ms.append(empirical_mgf(ens.totals, R, [0.5])[0])
    assert max(ms) < 1.5 and min(ms) >= 1.0


def test_conditioned_brw_has_pioneer():
    f, attempts = conditioned_brw((0, 0), FiniteDomain.ball(6, 2), InstructionStacks.create(12, 2))
    assert f.total_pioneers() > 0 and attempts >= 1
    assert set(f.boundary) <= set(boundary_of_ball(6, 2))


def test_exact_survival_decreasing():
    ps = [exact_survival_probability(R, 2) for R in (2, 4, 8)]
    assert ps[0] > ps[1] > ps[2] > 0
