"""Batch experiment driver.

Every subcommand takes ``--config FILE`` (``key = value`` lines, ``#``
comments) plus one ``--key value`` flag per parameter; flags override the
file. All parameters are validated before any work starts and ``seed`` is
mandatory. Each output record carries the master seed, a hash of the
resolved configuration and the package version, so reruns are
byte-identical.

Exit codes: 0 success, 1 configuration error, 2 invariant violation,
3 toppling budget exceeded.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .analysis import bidla_metrics, covering_experiment, inner_bound_experiment
from .brw import brw_ensemble, window_fraction
from .engine import Bidla, ParticleConfig, stabilize
from .green import green_ball, harmonic_defect, second_moment_rhs, solve_green
from .kernel import BudgetExceeded
from .lattice import FiniteDomain, ball_sites, check_dim, origin, volume_radius
from .offspring import OffspringLawError, make_law
from .rbg import coupling_instance, rbg_through_shells, uniform_on_sphere_boundary
from .stacks import STREAM_BARRIER, STREAM_PLACEMENT, InstructionStacks, fresh_stream

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_BUDGET = 0, 1, 2, 3
WORKERS_ENV = "BIDLA_WORKERS"
SCHEMA_VERSION = 1
REQUIRED = object()


class ConfigError(ValueError):
    pass


class InvariantViolation(RuntimeError):
    pass


def _floats(s: str) -> list[float]:
    return [float(v) for v in str(s).split(",") if v.strip()]


def _ints(s: str) -> list[int]:
    return [int(v) for v in str(s).split(",") if v.strip()]


def _opt_path(s):
    return None if s in (None, "", "-") else str(s)


COMMON = {
    "seed": (int, REQUIRED),
    "law": (str, "binary"),
    "out": (str, "-"),
    "workers": (int, None),
    "budget": (int, 10**9),
}

SCHEMAS: dict[str, dict[str, tuple[Callable, Any]]] = {
    "simulate": {"d": (int, 2), "t_max": (int, REQUIRED), "eps": (_floats, "0.1,0.25,0.5"),
                 "every": (int, 1), "snapshot": (_opt_path, None), "csv": (_opt_path, None)},
    "rbg": {"d": (int, 3), "n0": (int, 200), "r0": (int, 10), "kappa": (float, 4.0),
            "alpha": (float, 10.0), "replicas": (int, 1), "shell_cap": (int, 1000)},
    "brw-sweep": {"d": (int, 2), "radii": (_floats, "8,16,32"), "replicas": (int, 10000),
                  "alpha": (float, 0.1), "beta": (float, 20.0), "csv": (_opt_path, None)},
    "green": {"d": (int, 1), "radius": (float, 2.0), "sites": (str, ""), "csv": (_opt_path, None)},
    "cover": {"mode": (str, "covering"), "d": (int, 3), "n": (int, 8), "multiplier": (float, 8.0),
              "replicas": (int, 200), "alpha_exp": (float, 0.6)},
    "abelian": {"instances": (int, 100), "dims": (_ints, "1,2"), "max_particles": (int, 20),
                "radius": (float, 4.0), "least_action": (int, 20)},
}


@dataclass
class Run:
    command: str
    cfg: dict
    config_hash: str
    out: Any

    def emit(self, kind: str, **fields) -> None:
        rec = {"schema": f"bidla/{kind}/v{SCHEMA_VERSION}", "master_seed": self.cfg["seed"],
               "config_hash": self.config_hash, "version": __version__}
        rec.update(fields)
        self.out.write(json.dumps(rec, sort_keys=True, separators=(",", ":"), default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, float) and math.isinf(o):
        return None
    raise TypeError(f"not serializable: {type(o)}")


def read_config_file(path: str) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def resolve(command: str, file_values: dict, flag_values: dict) -> dict:
    schema = {**COMMON, **SCHEMAS[command]}
    unknown = set(file_values) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = {}
    for key, (conv, default) in schema.items():
        raw = flag_values.get(key)
        if raw is None:
            raw = file_values.get(key)
        if raw is None:
            if default is REQUIRED:
                raise ConfigError(f"missing required parameter '{key}'")
            raw = default
        try:
            cfg[key] = conv(raw) if raw is not None else None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for '{key}': {raw!r}") from exc
    if cfg["workers"] is None:
        env = os.environ.get(WORKERS_ENV)
        cfg["workers"] = int(env) if env else (os.cpu_count() or 1)
    _validate(command, cfg)
    return cfg


def _validate(command: str, c: dict) -> None:
    if not 0 <= c["seed"] < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    if c["workers"] < 1 or c["budget"] < 1:
        raise ConfigError("workers and budget must be positive")
    try:
        make_law(c["law"])
        if "d" in c:
            check_dim(c["d"])
    except (OffspringLawError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if command == "simulate" and (c["t_max"] < 0 or c["every"] < 1):
        raise ConfigError("t_max must be >= 0 and every >= 1")
    if command == "rbg" and (c["n0"] < 0 or c["r0"] < 1 or c["kappa"] <= 0 or c["replicas"] < 1):
        raise ConfigError("need n0 >= 0, r0 >= 1, kappa > 0, replicas >= 1")
    if command == "brw-sweep":
        if c["replicas"] < 1000 or any(r < 2 for r in c["radii"]) or not 0 <= c["alpha"] < c["beta"]:
            raise ConfigError("need replicas >= 1000, radii >= 2 and 0 <= alpha < beta")
    if command == "green" and c["radius"] <= 0 and not c["sites"]:
        raise ConfigError("green needs a positive radius or an explicit site list")
    if command == "cover":
        if c["mode"] not in ("covering", "inner"):
            raise ConfigError("mode must be 'covering' or 'inner'")
        if c["replicas"] < 1 or c["n"] < 1:
            raise ConfigError("need replicas >= 1 and n >= 1")
        if c["mode"] == "inner" and not (0.5 < c["alpha_exp"] < 1 and c["d"] >= 3):
            raise ConfigError("inner mode needs alpha_exp in (1/2, 1) and d >= 3")
    if command == "abelian" and (c["instances"] < 1 or c["max_particles"] < 1
                                 or any(not 1 <= d <= 6 for d in c["dims"])):
        raise ConfigError("need instances >= 1, max_particles >= 1 and dims in 1..6")


OUTPUT_KEYS = ("out", "workers", "snapshot", "csv")  # where results go, not what they are


def config_hash(command: str, cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in OUTPUT_KEYS}
    blob = json.dumps({"command": command, **body}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _pmap(fn, items, workers: int) -> list:
    """Ordered map; results do not depend on the number of workers."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with cf.ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# -- subcommands ------------------------------------------------------------------

def write_pgm(path: str, arrivals: dict, d: int, t_max: int) -> dict:
    """Central 2-d slice as a P2 graymap: arrival time scaled to 0..254, background 255."""
    pts = [z for z in arrivals if all(c == 0 for c in z[2:])]
    half = max((max(abs(c) for c in z[:2]) for z in pts), default=0) + 1
    w = 2 * half + 1
    h = w if d >= 2 else 1
    img = np.full((h, w), 255, dtype=np.int64)
    span = max(t_max - 1, 1)
    for z in pts:
        col = z[0] + half
        row = (half - z[1]) if d >= 2 else 0
        img[row, col] = round(254 * (arrivals[z] - 1) / span)
    radius = math.sqrt(t_max / math.pi) if d == 2 else volume_radius(t_max, d)
    meta = {"width": w, "height": h, "origin_pixel": [half, half if d >= 2 else 0],
            "disc_radius": radius, "t": t_max}
    with open(path, "w") as fh:
        fh.write("P2\n")
        fh.write(f"# bidla arrival-time snapshot d={d} t={t_max}\n")
        fh.write(f"# origin_pixel={half},{half if d >= 2 else 0} disc_radius={radius!r}\n")
        fh.write(f"{w} {h}\n255\n")
        for row in img:
            fh.write(" ".join(map(str, row.tolist())) + "\n")
    return meta


def cmd_simulate(run: Run) -> int:
    c = run.cfg
    stacks = InstructionStacks.create(c["seed"], c["d"], c["law"])
    b = Bidla(stacks, budget=c["budget"])
    jump = 0  # index k of the jump chain: number of steps so far at which A changed
    while b.t < c["t_max"]:
        if b.step():
            jump += 1
        if b.t % c["every"] == 0 or b.t == c["t_max"]:
            m = bidla_metrics(b, c["eps"])
            run.emit("step", t=m.t, jump=jump, volume=m.volume, r_of_t=m.r_of_t, delta_in=m.delta_in,
                     delta_out=m.delta_out, eps_symmetric={repr(e): v for e, v in m.eps_symmetric.items()})
    arrivals = b.arrival_times()
    if c["csv"]:
        with open(c["csv"], "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow([f"x{a}" for a in range(c["d"])] + ["arrival_t"])
            for z in sorted(arrivals):
                wr.writerow(list(z) + [arrivals[z]])
    if c["snapshot"]:
        meta = write_pgm(c["snapshot"], arrivals, c["d"], max(c["t_max"], 1))
        run.emit("snapshot", path=os.path.basename(c["snapshot"]), **meta)
    return EXIT_OK


def _rbg_replica(args):
    c, r = args
    base = InstructionStacks.create(c["seed"], c["d"], c["law"])
    stacks = base.replica(r)
    eta = (uniform_on_sphere_boundary(c["n0"], c["r0"], c["d"], fresh_stream(stacks, STREAM_PLACEMENT))
           if c["n0"] else ParticleConfig())
    return rbg_through_shells(eta, c["r0"], c["kappa"], c["alpha"], stacks,
                              fresh_stream(stacks, STREAM_BARRIER), c["shell_cap"], budget=c["budget"])


def cmd_rbg(run: Run) -> int:
    c = run.cfg
    results = _pmap(_rbg_replica, [(c, r) for r in range(c["replicas"])], c["workers"])
    for r, st in enumerate(results):
        if any(n < 0 for n in st.N) or any(b < a for a, b in zip(st.radii, st.radii[1:])):
            raise InvariantViolation("shell trace is inconsistent")
        for t in range(1, len(st.N)):
            run.emit("rbg-shell", replica=r, t=t, R_t=st.radii[t], H_t=st.H[t - 1], N_t=st.N[t],
                     green_sum=st.green_sums[t - 1], red_sum=st.red_sums[t - 1])
        run.emit("rbg-summary", replica=r, N_0=st.N[0], T_end=st.T_end, T_alpha=st.T_alpha,
                 capped=st.capped, R_end=st.radii[-1], kappa=st.kappa, beta=st.beta,
                 log_base="e", alpha=st.alpha)
    return EXIT_OK


def _brw_chunk(args):
    c, R, r0, n = args
    e = brw_ensemble(R, c["d"], n, c["seed"], c["law"], first_replica=r0, budget=c["budget"])
    return e.totals


def cmd_brw_sweep(run: Run) -> int:
    c = run.cfg
    rows = []
    for R in c["radii"]:
        k = max(1, min(c["workers"], 64))
        cuts = np.linspace(0, c["replicas"], k + 1).astype(int)
        chunks = [(c, R, int(a), int(b - a)) for a, b in zip(cuts, cuts[1:]) if b > a]
        totals = np.concatenate(_pmap(_brw_chunk, chunks, c["workers"]))
        n = len(totals)
        surv = int(np.count_nonzero(totals))
        p = surv / n
        win = window_fraction(totals, R, c["alpha"], c["beta"])
        mean = float(totals.mean())
        row = {"R": R, "replicas": n, "survivors": surv, "estimate": p, "se": math.sqrt(p * (1 - p) / n),
               "mean_pioneers": mean, "mean_pioneers_se": float(totals.std(ddof=1) / math.sqrt(n)),
               "window": win.value, "window_se": win.se}
        rows.append(row)
        run.emit("brw-sweep", **row)
    if c["csv"]:
        with open(c["csv"], "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            wr.writeheader()
            wr.writerows(rows)
    return EXIT_OK


def _parse_sites(text: str, d: int) -> list[tuple[int, ...]]:
    out = []
    for chunk in text.split(";"):
        if chunk.strip():
            z = tuple(int(v) for v in chunk.split(","))
            if len(z) != d:
                raise ConfigError(f"site {chunk!r} does not have {d} coordinates")
            out.append(z)
    return out


def cmd_green(run: Run) -> int:
    c = run.cfg
    d = c["d"]
    if c["sites"]:
        K = FiniteDomain.from_sites(_parse_sites(c["sites"], d), d)
    else:
        K = FiniteDomain.ball(c["radius"], d)
    table = solve_green(K)
    o = origin(d)
    hits = table.hit_matrix()
    row_err = float(np.max(np.abs(hits.sum(axis=1) - 1))) if len(hits) else 0.0
    V = table.values()
    sym_err = float(np.max(np.abs(V - V.T))) if V.size else 0.0
    if row_err > 1e-10 or sym_err > 1e-10:
        raise InvariantViolation(f"green table check failed: rows {row_err:.2e}, symmetry {sym_err:.2e}")
    if o in K:
        site = "0" if d == 1 else "(" + ",".join("0" * d) + ")"
        print(f"G({site},{site})={table.G(o, o):.10f}")
    sigma2 = make_law(c["law"]).variance_sigma2
    run.emit("green-summary", sites=len(table.sites), boundary=len(table.boundary),
             max_row_sum_error=row_err, max_symmetry_error=sym_err,
             G_origin=table.G(o, o) if o in K else None)
    if o in K and c["sites"] == "":
        for z in table.boundary:
            run.emit("green-boundary", z=list(z), exit_probability=table.boundary_hit(o, z),
                     second_moment_rhs=second_moment_rhs(table, o, z, sigma2),
                     harmonic_defect=harmonic_defect(table, z))
    if c["csv"]:
        table.dump_csv(c["csv"])
    return EXIT_OK


def cmd_cover(run: Run) -> int:
    c = run.cfg
    d, n = c["d"], c["n"]
    if c["mode"] == "covering":
        count = int(round(c["multiplier"] * len(ball_sites(n, d))))
        eta = ParticleConfig({origin(d): count}) if count else ParticleConfig()
        res = covering_experiment(eta, n, c["replicas"], c["seed"], d, c["law"])
        run.emit("covering", n=n, d=d, particles=count, replicas=res.replicas, failures=res.failures,
                 failure_frequency=res.estimate.value, se=res.estimate.se)
    else:
        res = inner_bound_experiment(n, c["alpha_exp"], c["replicas"], c["seed"], d, c["law"])
        if (res.frozen_counts < 0).any():
            raise InvariantViolation("negative frozen count")
        run.emit("inner-bound", n=n, d=d, alpha_exp=c["alpha_exp"], replicas=res.replicas,
                 fill_frequency=res.fill_frequency, frozen_mean=res.frozen_mean,
                 reference_scale=res.reference_scale)
    return EXIT_OK


def abelian_instances(seed: int, count: int, dims, max_particles: int, radius: float):
    """Deterministic random test instances (stacks, eta, K) for the Abelian check."""
    rng = np.random.default_rng(seed)
    for i in range(count):
        d = int(dims[i % len(dims)])
        stacks = InstructionStacks.create(seed, d).replica(i)
        K = FiniteDomain.ball(radius, d)
        pts = K.sites()
        n = int(rng.integers(1, max_particles + 1))
        eta = ParticleConfig()
        for j in rng.integers(len(pts), size=n).tolist():
            eta.add(pts[j])
        yield stacks, eta, K


def cmd_abelian(run: Run) -> int:
    c = run.cfg
    same = 0
    for stacks, eta, K in abelian_instances(c["seed"], c["instances"], c["dims"], c["max_particles"], c["radius"]):
        a = stabilize(eta, K, stacks, policy="lex", budget=c["budget"])
        b = stabilize(eta, K, stacks, policy="random", budget=c["budget"])
        same += a.same_outcome(b)
    n = c["instances"]
    print(f"{same}/{n} identical (config, odometer)")
    dom = 0
    base = InstructionStacks.create(c["seed"], 2, c["law"])
    for i in range(c["least_action"]):
        res = coupling_instance(base.replica(i), budget=c["budget"])
        dom += res.complete and res.dominates()
    if c["least_action"]:
        print(f"{dom}/{c['least_action']} acceptable odometer dominates legal")
    run.emit("abelian", instances=n, identical=same, least_action_instances=c["least_action"],
             least_action_dominates=dom)
    return EXIT_OK if same == n and dom == c["least_action"] else EXIT_INVARIANT


COMMANDS = {"simulate": cmd_simulate, "rbg": cmd_rbg, "brw-sweep": cmd_brw_sweep,
            "green": cmd_green, "cover": cmd_cover, "abelian": cmd_abelian}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bidla", description="BIDLA simulation and verification experiments")
    p.add_argument("--version", action="version", version=f"bidla {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value configuration file")
        for key in {**COMMON, **SCHEMAS[name]}:
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config") and v is not None}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, file_values, flags)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = sys.stdout if cfg["out"] == "-" else open(cfg["out"], "w", encoding="utf-8")
    run = Run(args.command, cfg, config_hash(args.command, cfg), out)
    try:
        return COMMANDS[args.command](run)
    except BudgetExceeded as exc:
        print(f"budget abort: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        if out is not sys.stdout:
            out.close()
        else:
            out.flush()


if __name__ == "__main__":
    sys.exit(main())
