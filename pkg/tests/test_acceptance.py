"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

All randomness derives from the master seed in conftest via derive_seed(master, criterion).
"""

import json
import math
import random
import time
from fractions import Fraction

import numpy as np
import pytest
from conftest import SEED, record

from bidla.analysis import (
    deviations,
    deviations_bruteforce,
    eps_symmetric_bruteforce,
    eps_symmetric_from_sq,
    is_eps_symmetric,
    loglog_slope,
)
from bidla.brw import boundary_of_ball, brw_ensemble, exact_survival_probability
from bidla.cli import abelian_instances, main
from bidla.engine import Bidla, ParticleConfig, stabilize
from bidla.green import green_ball, harmonic_defect, second_moment_rhs, solve_green
from bidla.lattice import FiniteDomain, volume_radius
from bidla.rbg import barrier_pmf, contraction_ratios, coupling_instance
from bidla.stacks import InstructionStacks, derive_seed


def seed_for(criterion: int) -> int:
    return derive_seed(SEED, criterion)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def test_c01_abelian_determinism():
    with Timer() as tm:
        same = 0
        for stacks, eta, K in abelian_instances(seed_for(1), 100, [1, 2], 20, 4.0):
            a = stabilize(eta, K, stacks, policy="lex")
            b = stabilize(eta, K, stacks, policy="random")
            same += a.same_outcome(b)
    ok = same == 100 and tm.elapsed < 60
    record(1, ok, f"{same}/100 identical (config, frozen, odometer), lex vs random; {tm.elapsed:.1f}s")
    assert ok


def _coupling_instances(criterion: int, want: int, need_inside: bool):
    base = InstructionStacks.create(seed_for(criterion), 2)
    taken, skipped, i = [], 0, 0
    while len(taken) < want:
        res = coupling_instance(base.replica(i))
        i += 1
        if res.shells.N[0] == 0 or (need_inside and not res.acceptable_inside(30)):
            skipped += 1
            continue
        taken.append(res)
    return taken, skipped


def test_c02_least_action():
    with Timer() as tm:
        insts, skipped = _coupling_instances(2, 50, need_inside=False)
        good = sum(r.complete and r.dominates() for r in insts)
    ok = good == 50 and tm.elapsed < 60
    record(2, ok, f"{good}/50 acceptable (freeze + RBG) odometer >= legal pointwise "
                  f"({skipped} instances with no frozen particle skipped); {tm.elapsed:.1f}s")
    assert ok


def test_c03_confinement():
    with Timer() as tm:
        insts, skipped = _coupling_instances(3, 50, need_inside=True)
        good = sum(r.complete and r.legal_inside(30) for r in insts)
    ok = good == 50 and tm.elapsed < 120
    record(3, ok, f"{good}/50 legal stabilization inside B_30 when the RBG is "
                  f"({skipped} skipped: empty RBG or RBG leaving B_30); {tm.elapsed:.1f}s")
    assert ok


def test_c04_mass_martingale():
    with Timer() as tm:
        base = InstructionStacks.create(seed_for(4), 2)
        eta = ParticleConfig({(0, 0): 50})
        sizes = np.array([stabilize(eta, None, base.replica(r), policy="fast").stable_config.total
                          for r in range(10_000)], dtype=float)
    mean, se = sizes.mean(), sizes.std(ddof=1) / math.sqrt(len(sizes))
    ok = abs(mean - 50) <= 3 * se and tm.elapsed < 300
    record(4, ok, f"mean |S(eta)| = {mean:.3f} +/- {se:.3f} (target 50, |z| = {abs(mean - 50) / se:.2f}); "
                  f"{tm.elapsed:.1f}s")
    assert ok


def test_c05_expected_pioneers():
    with Timer() as tm:
        est = brw_ensemble(10, 2, 100_000, seed_for(5)).pioneer_mean()
    ok = abs(est.value - 1) <= 3 * est.se and tm.elapsed < 300
    record(5, ok, f"mean pioneers = {est.value:.4f} +/- {est.se:.4f} (target 1); {tm.elapsed:.1f}s")
    assert ok


def test_c06_survival_scaling():
    radii, reps = [8, 16, 32], [1_000_000, 2_000_000, 4_000_000]
    with Timer() as tm:
        ests = [brw_ensemble(R, 2, n, derive_seed(seed_for(6), R)).survival() for R, n in zip(radii, reps)]
        exact = [exact_survival_probability(R, 2) for R in radii]
    slope = loglog_slope(radii, [e.value for e in ests])
    zs = [(e.value - x) / e.se for e, x in zip(ests, exact)]
    ok = abs(slope + 2) <= 0.3 and all(abs(z) <= 4 for z in zs) and tm.elapsed < 900
    vals = ", ".join(f"R={R}: {e.value:.5f} (exact {x:.5f})" for R, e, x in zip(radii, ests, exact))
    record(6, ok, f"log-log slope {slope:.3f} (window -2 +/- 0.3; exact-value slope "
                  f"{loglog_slope(radii, exact):.3f}); {vals}; {tm.elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def ensemble_r6():
    t0 = time.perf_counter()
    ens = brw_ensemble(6, 2, 1_000_000, seed_for(7))
    table = green_ball(6, 2)
    return ens, table, time.perf_counter() - t0


def test_c07_green_oracle(ensemble_r6):
    ens, table, t_ens = ensemble_r6
    with Timer() as tm:
        worst = 0.0
        for z in boundary_of_ball(6, 2):
            est = ens.local_time(z)
            worst = max(worst, abs(est.value - table.G((0, 0), z)) / est.se)
        g = solve_green(FiniteDomain.from_sites([(-1,), (0,), (1,)]))
        hand = [g.G((0,), (0,)) - 2, g.G((0,), (1,)) - 1, g.G((1,), (1,)) - 1.5]
    hand_ok = max(abs(h) for h in hand) <= 1e-9
    total = t_ens + tm.elapsed
    ok = worst <= 4 and hand_ok and total < 600
    record(7, ok, f"max |MC - G_6(0,z)| / SE over boundary = {worst:.2f} (<= 4); hand values "
                  f"G(0,0)=2, G(0,1)=1, G(1,1)=3/2 within {max(abs(h) for h in hand):.1e}; {total:.1f}s")
    assert ok


def test_c08_second_moment(ensemble_r6):
    ens, table, t_ens = ensemble_r6
    with Timer() as tm:
        worst = -math.inf
        for z in boundary_of_ball(6, 2):
            est = ens.local_time_square(z)
            rhs = second_moment_rhs(table, (0, 0), z, 1.0)
            worst = max(worst, (est.value - rhs) / est.se)
    total = t_ens + tm.elapsed
    ok = worst <= 3 and total < 600
    record(8, ok, f"max (MC E[l(z)^2] - RHS) / SE over boundary = {worst:.2f} (<= 3); {total:.1f}s")
    assert ok


def test_c09_harmonic_defect():
    with Timer() as tm:
        maxima = {}
        for R in (4, 6, 8):
            g = green_ball(R, 3)
            maxima[R] = max(harmonic_defect(g, z) for z in g.boundary)
    ok = max(maxima.values()) < 10 and tm.elapsed < 300
    record(9, ok, "max defect " + ", ".join(f"R={R}: {v:.4f}" for R, v in maxima.items())
           + f" (desk constant 10); {tm.elapsed:.1f}s")
    assert ok


def test_c10_rbg_contraction():
    with Timer() as tm:
        stats = {}
        for H in (5, 10, 20):
            r = contraction_ratios(3, 200, 10, H, 500, derive_seed(seed_for(10), H))
            stats[H] = (r.mean(), r.std(ddof=1) / math.sqrt(len(r)))
    below = all(m + 3 * se < 1 for m, se in stats.values())
    means = [stats[H][0] for H in (5, 10, 20)]
    monotone = means[0] >= means[1] >= means[2]
    ok = below and monotone and tm.elapsed < 900
    record(10, ok, "E[N2]/N1 " + ", ".join(f"H={H}: {m:.4f} +/- {se:.4f}" for H, (m, se) in stats.items())
           + f"; below 1 by 3 SE: {below}; nonincreasing in H: {monotone}; {tm.elapsed:.1f}s")
    assert ok


def test_c11_barrier_exact():
    with Timer() as tm:
        ok_norm = True
        for d in range(1, 7):
            running = 0
            for H in range(1, 10_001):
                running += H ** (d - 1)
                ok_norm &= barrier_pmf(H, d).normalizer == running
        # the normalizer makes the Fraction table sum to exactly 1
        full = all(sum(barrier_pmf(H, d).table()) == 1 for d in range(1, 7) for H in (1, 2, 3, 97))
    ok = ok_norm and full and tm.elapsed < 1
    record(11, ok, f"closed-form normalizer equals the running sum for every H <= 10^4, d <= 6; "
                   f"tables sum to exactly 1: {full}; {tm.elapsed:.2f}s")
    assert ok


def test_c12_growth_rate():
    with Timer() as tm:
        base = InstructionStacks.create(seed_for(12), 2)
        sizes = []
        for r in range(200):
            b = Bidla(base.replica(r))
            b.run(500)
            sizes.append(b.size)
    sizes = np.array(sizes, dtype=float)
    mean, se = sizes.mean(), sizes.std(ddof=1) / math.sqrt(len(sizes))
    ok = abs(mean - 500) <= 3 * se and tm.elapsed < 600
    record(12, ok, f"mean |A(500)| = {mean:.2f} +/- {se:.2f} (target 500); {tm.elapsed:.1f}s")
    assert ok


def test_c13_shape_smoke(tmp_path):
    with Timer() as tm:
        b = Bidla(InstructionStacks.create(seed_for(13), 3))
        first_bad = None
        while b.t < 20_000:
            b.step()
            if b.t >= 1000 and first_bad is None and not eps_symmetric_from_sq(b.max_sq, b.min_missing_sq, 0.5):
                first_bad = b.t
        di, do = deviations(b.occupied(), b.t, 3)
        r = volume_radius(b.t, 3)
        ok_a = di / r < 0.5 and do / r < 0.5 and first_bad is None
        out, pgm = tmp_path / "trace.ndjson", tmp_path / "cluster.pgm"
        code = main(["simulate", "--seed", str(seed_for(13)), "--d", "2", "--t-max", "20000",
                     "--every", "20000", "--out", str(out), "--snapshot", str(pgm)])
        recs = [json.loads(x) for x in out.read_text().splitlines()]
        snap = [x for x in recs if x["schema"] == "bidla/snapshot/v1"]
        head = pgm.read_text().splitlines()[:4]
        ok_b = (code == 0 and len(snap) == 1
                and abs(snap[0]["disc_radius"] - math.sqrt(20000 / math.pi)) < 1e-9
                and head[0] == "P2" and any("disc_radius" in h for h in head))
    ok = ok_a and ok_b and tm.elapsed < 1200
    record(13, ok, f"(smoke) d=3 t=20000: delta_in/r = {di / r:.3f}, delta_out/r = {do / r:.3f}, "
                   f"0.5-symmetric for all t >= 1000: {first_bad is None}; d=2 snapshot with disc radius "
                   f"{math.sqrt(20000 / math.pi):.3f} written: {ok_b}; {tm.elapsed:.1f}s")
    assert ok


def test_c14_metric_oracles():
    rng = random.Random(seed_for(14))
    with Timer() as tm:
        agree = 0
        for _ in range(1000):
            d = rng.choice([1, 2, 3])
            pts = {tuple(rng.randint(-3, 3) for _ in range(d)) for _ in range(rng.randint(1, 25))}
            if rng.random() < 0.8:
                pts.add((0,) * d)
            t = rng.randint(1, 60)
            eps = rng.choice([0.05, 0.1, 0.2, 0.25, 0.5, 0.75, 0.9])
            a, b = deviations(pts, t, d), deviations_bruteforce(pts, t, d)
            same = all(abs(x - y) <= 1e-9 for x, y in zip(a, b))
            same &= is_eps_symmetric(pts, eps, d) == eps_symmetric_bruteforce(pts, eps, d)
            agree += same
    ok = agree == 1000 and tm.elapsed < 60
    record(14, ok, f"{agree}/1000 random sets agree with brute-force scans; {tm.elapsed:.1f}s")
    assert ok
