import json

import pytest

from bidla import cli
from bidla.cli import abelian_instances, main


def _records(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


def test_green_hand_value(capsys):
    assert main(["green", "--seed", "1", "--d", "1", "--radius", "2"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "G(0,0)=2.0000000000"
    recs = _records(out)
    assert recs[0]["schema"] == "bidla/green-summary/v1"
    rhs = {tuple(r["z"]): r["second_moment_rhs"] for r in recs[1:]}
    assert rhs[(2,)] == pytest.approx(1.625)


def test_green_explicit_sites(capsys):
    assert main(["green", "--seed", "1", "--d", "1", "--sites=-1;0;1"]) == 0
    assert capsys.readouterr().out.startswith("G(0,0)=2.0000000000")
    assert main(["green", "--seed", "1", "--d", "2", "--sites=0,0,1"]) == 1


def test_simulate_first_step(capsys):
    assert main(["simulate", "--seed", "3", "--t-max", "1"]) == 0
    (rec,) = _records(capsys.readouterr().out)
    assert rec["t"] == 1 and rec["volume"] == 1 and rec["jump"] == 1
    assert {"master_seed", "config_hash", "version", "schema"} <= set(rec)


def test_simulate_is_byte_identical(tmp_path):
    outs = []
    for i in range(2):
        (tmp_path / str(i)).mkdir()
        out, pgm = tmp_path / str(i) / "run.ndjson", tmp_path / str(i) / "snap.pgm"
        assert main(["simulate", "--seed", "9", "--t-max", "400", "--out", str(out),
                     "--snapshot", str(pgm), "--every", "50"]) == 0
        outs.append((out.read_bytes(), pgm.read_bytes()))
    assert outs[0] == outs[1]
    recs = _records(outs[0][0].decode())
    assert [r["t"] for r in recs if r["schema"] == "bidla/step/v1"][-1] == 400
    snap = [r for r in recs if r["schema"] == "bidla/snapshot/v1"]
    assert snap and snap[0]["disc_radius"] == pytest.approx((400 / 3.141592653589793) ** 0.5)
    header = outs[0][1].decode().splitlines()
    assert header[0] == "P2"


def test_workers_do_not_change_output(tmp_path, monkeypatch):
    res = []
    for w in ("1", "2"):
        out = tmp_path / f"b{w}.ndjson"
        monkeypatch.setenv(cli.WORKERS_ENV, w)
        assert main(["brw-sweep", "--seed", "4", "--radii", "4,6", "--replicas", "2000", "--out", str(out)]) == 0
        res.append(out.read_bytes())
    assert res[0] == res[1]


def test_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# quick run\nseed = 5\nt_max = 3\n")
    assert main(["simulate", "--config", str(cfg)]) == 0
    a = _records(capsys.readouterr().out)
    assert len(a) == 3 and a[0]["master_seed"] == 5
    assert main(["simulate", "--config", str(cfg), "--t-max", "2"]) == 0
    b = _records(capsys.readouterr().out)
    assert len(b) == 2 and b[0]["config_hash"] != a[0]["config_hash"]


@pytest.mark.parametrize("argv", [
    ["simulate", "--t-max", "3"],
    ["simulate", "--seed", "1", "--t-max", "3", "--d", "9"],
    ["simulate", "--seed", "x", "--t-max", "3"],
    ["rbg", "--seed", "1", "--nonsense", "2"],
    ["brw-sweep", "--seed", "1", "--replicas", "0"],
])
def test_config_errors(argv, capsys):
    assert main(argv) == 1


def test_bad_config_line(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("seed 5\n")
    assert main(["simulate", "--config", str(cfg), "--t-max", "2"]) == 1


def test_budget_abort(capsys):
    assert main(["simulate", "--seed", "1", "--t-max", "100", "--budget", "2"]) == 3
    assert "budget" in capsys.readouterr().err


def test_rbg_empty(capsys):
    assert main(["rbg", "--seed", "3", "--n0", "0"]) == 0
    (rec,) = _records(capsys.readouterr().out)
    assert rec["T_end"] == 0 and rec["log_base"] == "e"


def test_abelian_report(capsys):
    assert main(["abelian", "--seed", "11", "--instances", "100", "--least-action", "3"]) == 0
    out = capsys.readouterr().out
    assert "100/100 identical (config, odometer)" in out


def test_abelian_invariant_violation(monkeypatch, capsys):
    real = cli.stabilize

    def broken(eta, K, stacks, policy="lex", **kw):
        res = real(eta, K, stacks, policy=policy, **kw)
        if policy == "random":
            res.odometer.uses[(99,) * stacks.d] = 1
        return res

    monkeypatch.setattr(cli, "stabilize", broken)
    assert main(["abelian", "--seed", "11", "--instances", "4", "--least-action", "0"]) == 2


def test_abelian_instances_are_deterministic():
    a = [(s.master_seed, e.counts) for s, e, _ in abelian_instances(3, 10, [1, 2], 20, 4.0)]
    b = [(s.master_seed, e.counts) for s, e, _ in abelian_instances(3, 10, [1, 2], 20, 4.0)]
    assert a == b and all(1 <= sum(c.values()) <= 20 for _, c in a)


def test_cover_modes(capsys):
    assert main(["cover", "--seed", "2", "--mode", "inner", "--n", "6", "--replicas", "5"]) == 0
    (rec,) = _records(capsys.readouterr().out)
    assert 0 <= rec["fill_frequency"] <= 1
    assert main(["cover", "--seed", "2", "--mode", "sideways"]) == 1


def test_jump_index_matches_jump_chain(capsys):
    from bidla.engine import Bidla, jump_chain
    from bidla.stacks import InstructionStacks

    assert main(["simulate", "--seed", "21", "--t-max", "200"]) == 0
    recs = _records(capsys.readouterr().out)
    b = Bidla(InstructionStacks.create(21, 2))
    trace = [frozenset()]
    for _ in range(200):
        b.step()
        trace.append(b.occupied())
    times = jump_chain(trace).times
    assert [r["jump"] for r in recs] == [sum(1 for x in times if x <= t) for t in range(1, 201)]
