import json

import numpy as np
import pytest

from marca.cli import main
from marca.core import load_tensor, save_config, save_tensor, tiny_config
from marca.report import SchemaError, build_report, compare, dumps, loads
from marca.memory import TrafficStats


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_calibrate(capsys):
    code, out, _ = run(capsys, "calibrate-exp")
    doc = json.loads(out)
    assert code == 0
    assert doc["params"]["bias_b"] == -0.03125
    assert doc["mean_rel_error_calibrated"] <= doc["mean_rel_error_uncalibrated"]


def test_simulate_parity_and_determinism(capsys, tmp_path):
    for flags in (("--intra-bm", "--inter-bm"), ("--no-intra-bm", "--no-inter-bm")):
        code, out, _ = run(capsys, "simulate", "--exact-kernels", *flags)
        rep = loads(out)
        assert code == 0 and rep["diff"]["max_rel"] <= 1e-4
    _, a, _ = run(capsys, "simulate", "--seq-len", "4")
    _, b, _ = run(capsys, "simulate", "--seq-len", "4")
    assert a == b
    code, out, _ = run(capsys, "simulate", "--exact-kernels", "--reference", "tree")
    assert json.loads(out)["diff"]["mismatches"] == 0


def test_simulate_outputs(capsys, tmp_path):
    cfg_path = tmp_path / "c.json"
    save_config(tiny_config(seq_len=4), cfg_path)
    code, _, _ = run(capsys, "simulate", "--config", str(cfg_path), "--out", str(tmp_path / "r.json"),
                     "--trace", str(tmp_path / "t.csv"), "--save-output", str(tmp_path / "y.bin"))
    assert code == 0
    rep = loads((tmp_path / "r.json").read_text())
    assert rep["config"]["seq_len"] == 4 and rep["label"] == "full-size"
    assert (tmp_path / "t.csv").read_text().count("\n") > 10
    assert load_tensor(tmp_path / "y.bin").shape == (4, 4)
    code, out, _ = run(capsys, "simulate", "--preset", "130M", "--scale", "16", "--layers", "1",
                       "--seq-len", "16", "--timing-only")
    rep = loads(out)
    assert rep["label"] == "desk-scale proxy" and rep["diff"] is None


def test_lower_assemble_disassemble(capsys, tmp_path):
    code, out, _ = run(capsys, "lower", "--seq-len", "3", "--out", str(tmp_path / "low"))
    assert code == 0
    for name in ("program.bin", "plan.json", "plan.txt"):
        assert (tmp_path / "low" / name).exists()
    assert json.loads((tmp_path / "low" / "plan.json").read_text())["flags"]["inter_bm"] is True
    code, text, _ = run(capsys, "disassemble", str(tmp_path / "low" / "program.bin"))
    (tmp_path / "p.s").write_text(text)
    code, _, _ = run(capsys, "assemble", str(tmp_path / "p.s"), "--out", str(tmp_path / "p.bin"))
    assert code == 0
    assert (tmp_path / "p.bin").read_bytes() == (tmp_path / "low" / "program.bin").read_bytes()
    code, out, _ = run(capsys, "lower")
    assert "buffer capacity" in out


def test_sweep(capsys):
    code, out, _ = run(capsys, "sweep", "--preset", "130M", "--scale", "16", "--layers", "1",
                       "--seq-lens", "16,64", "--baseline-tensor-core")
    lines = out.strip().splitlines()
    assert code == 0 and lines[0].startswith("# desk-scale proxy")
    assert lines[1].startswith("seq_len,cycles_total,hbm_bytes,ew_share")
    assert len(lines) == 4
    code, _, err = run(capsys, "sweep", "--seq-lens", "64,16")
    assert code == 2 and "ascending" in err


def test_compare_and_golden(capsys, tmp_path):
    code, _, _ = run(capsys, "golden", "--seq-len", "4", "--out", str(tmp_path / "g.bin"))
    assert code == 0
    g = load_tensor(tmp_path / "g.bin")
    code, out, _ = run(capsys, "compare", str(tmp_path / "g.bin"), str(tmp_path / "g.bin"))
    d = json.loads(out)
    assert code == 0 and d["max_abs"] == 0 and d["mismatches"] == 0
    save_tensor(g + np.float32(1e-3), tmp_path / "p.bin")
    code, out, _ = run(capsys, "compare", str(tmp_path / "p.bin"), str(tmp_path / "g.bin"), "--tol", "1")
    assert json.loads(out)["max_abs"] == pytest.approx(1e-3, rel=1e-3)
    save_tensor(g[:2], tmp_path / "s.bin")
    code, _, err = run(capsys, "compare", str(tmp_path / "s.bin"), str(tmp_path / "g.bin"))
    assert code == 2 and "shape mismatch" in err


def test_errors(capsys, tmp_path):
    code, _, err = run(capsys, "simulate", "--seq-len", "64", "--max-instructions", "50")
    assert code == 2 and "cap" in err
    (tmp_path / "bad.s").write_text("NOPE r1\n")
    code, _, err = run(capsys, "assemble", str(tmp_path / "bad.s"), "--out", str(tmp_path / "x"))
    assert code == 2 and "line 1" in err
    code, _, err = run(capsys, "disassemble", str(tmp_path / "missing.bin"))
    assert code == 2


def test_report_schema():
    rep = build_report(TrafficStats())
    assert loads(dumps(rep)) == rep
    bad = dict(rep, extra=1)
    with pytest.raises(SchemaError):
        dumps(bad)
    with pytest.raises(SchemaError):
        loads(json.dumps(dict(rep, schema_version=99)))


def test_compare_fn():
    a = np.array([1.0, 2.0, np.nan], np.float32)
    d = compare(a, a)
    assert d.max_abs == 0 and d.mismatches == 0 and d.passed
    d = compare(a + np.float32(1e-3), a, tol=1e-2)
    assert d.mismatches == 2
    with pytest.raises(ValueError):
        compare(a, a[:2])
