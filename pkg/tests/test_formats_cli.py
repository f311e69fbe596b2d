import json
import math

import numpy as np
import pytest
from click.testing import CliRunner
from hypothesis import given, settings, strategies as st

from boloreadout import formats
from boloreadout.cli import main
from boloreadout.fidelity import fidelity_landscape
from boloreadout.formats import ConfigError, FormatError, RunConfig
from boloreadout.sim import ShotRecord, Trace


# --- config ---------------------------------------------------------------

def test_config_round_trip():
    cfg = RunConfig(seed=3, T1=31.5, baseline_mode="per_shot")
    again = formats.parse_config(cfg.to_text())
    assert again == cfg
    assert again.sha256() == cfg.sha256()


def test_config_hash_ignores_seed_and_workers():
    a = RunConfig(seed=1, workers=1)
    b = RunConfig(seed=2, workers=8)
    assert a.sha256() == b.sha256()
    assert RunConfig(T1=20.0).sha256() != a.sha256()


@pytest.mark.parametrize("text, msg", [
    ("bogus = 1\n", "unknown key"),
    ("T1 = 1\nT1 = 2\n", "duplicate"),
    ("T1 = fast\n", "line 1"),
    ("just words\n", "key = value"),
    ("T1 = -3\n", "T1"),
    ("t0 = 20\n", "t0"),
    ("baseline_mode = sometimes\n", "sometimes"),
    ("baseline_mode = per_shot\nt_base = 0\n", "t_base"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        formats.parse_config(text)


def test_config_comments_and_blank_lines():
    cfg = formats.parse_config("# header\n\nT1 = 40  # longer\n")
    assert cfg.T1 == 40.0


# --- shots CSV ------------------------------------------------------------

finite = st.floats(allow_nan=False, allow_infinity=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["ground", "excited"]), st.none() | finite, finite),
                min_size=1, max_size=20))
def test_shots_csv_round_trip(rows):
    recs = [ShotRecord(i, s, t, v) for i, (s, t, v) in enumerate(rows)]
    back, h = formats.parse_shots_csv(formats.shots_to_csv(recs, "abc"))
    assert h == "abc"
    assert [(r.shot_index, r.prepared_state.value, r.t_d, r.S) for r in back] == \
           [(r.shot_index, r.prepared_state, r.t_d, r.S) for r in recs]


def test_shots_csv_errors_have_line_numbers():
    good = formats.shots_to_csv([ShotRecord(0, "ground", None, 1.0)], "h")
    with pytest.raises(FormatError, match="line 4"):
        formats.parse_shots_csv(good + "1,excited,,notanumber\n")
    with pytest.raises(FormatError, match="line 4"):
        formats.parse_shots_csv(good + "1,excited\n")
    with pytest.raises(FormatError, match="line 2"):
        formats.parse_shots_csv("# c\nwrong,header\n")
    with pytest.raises(FormatError):
        formats.parse_shots_csv("")


# --- binary traces --------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=50), st.floats(1e-6, 10), st.floats(0, 0.99))
def test_trace_round_trip_bit_exact(samples, dt, frac):
    t_on = frac * dt * len(samples)
    tr = Trace(dt, t_on, np.array(samples))
    back = formats.trace_from_bytes(formats.trace_to_bytes(tr))
    assert back.samples.tobytes() == tr.samples.tobytes()
    assert (back.dt, back.t_pulse_start) == (dt, t_on)


def test_trace_layout_and_errors(tmp_path):
    tr = Trace(0.05, 0.0, np.array([[1.0, 2.0], [3.0, 4.0]]))
    data = formats.trace_to_bytes(tr)
    assert data[:5] == b"BOLO1"
    assert len(data) == 5 + 4 + 8 + 8 + 1 + 4 * 8
    formats.write_trace(tmp_path / "t.bolo", tr)
    np.testing.assert_array_equal(formats.read_trace(tmp_path / "t.bolo").samples, tr.samples)
    with pytest.raises(FormatError):
        formats.trace_from_bytes(b"BOLO2" + data[5:])
    with pytest.raises(FormatError):
        formats.trace_from_bytes(data[:-1])


def test_results_json_is_stable():
    doc = {"b": np.float64(1.5), "a": [np.int64(2), math.nan], "c": np.bool_(True)}
    text = formats.results_json(doc)
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [2, None], "b": 1.5, "c": True}


def test_output_set_cleans_up(tmp_path):
    out = tmp_path / "new" / "dir"
    with pytest.raises(RuntimeError):
        with formats.OutputSet(out) as o:
            o.write("a.txt", "x")
            o.write("sub/b.bin", b"y")
            raise RuntimeError("boom")
    assert not (tmp_path / "new").exists()


# --- CLI ------------------------------------------------------------------

@pytest.fixture
def run(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    runner = CliRunner()

    def go(*args, out="out"):
        return runner.invoke(main, ["--out", str(tmp_path / out), *map(str, args)])

    return go


def test_simulate_small_and_deterministic(run, tmp_path):
    r1 = run("--seed", 1, "simulate", "--shots", 4, out="a")
    r2 = run("--seed", 1, "simulate", "--shots", 4, out="b")
    assert r1.exit_code == 0, r1.output
    a, b = tmp_path / "a", tmp_path / "b"
    lines = (a / "shots.csv").read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    assert lines[1] == "shot_index,prepared_state,t_d_us,S_mV"
    assert len(lines) == 2 + 8
    assert [ln.split(",")[0] for ln in lines[2:]] == [str(i) for i in range(8)]
    for name in ("shots.csv", "simulate.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    r3 = run("--seed", 2, "simulate", "--shots", 4, out="c")
    assert r3.exit_code == 0
    assert (tmp_path / "c" / "shots.csv").read_bytes() != (a / "shots.csv").read_bytes()


def test_simulate_usage_errors(run, tmp_path):
    r = run("--seed", 1, "simulate", "--shots", 0)
    assert r.exit_code == 2
    assert not (tmp_path / "out").exists()
    r = run("simulate", "--shots", 3)
    assert r.exit_code == 2
    assert "seed" in r.output


def test_seed_in_config_file_rejected(run, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 4\n")
    r = run("--config", cfg, "simulate", "--shots", 2)
    assert r.exit_code == 2


def test_invalid_config_is_usage_error(run, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("T1 = 0\n")
    assert run("--config", cfg, "--seed", 1, "simulate").exit_code == 2


def test_fit_empty_file(run, tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    r = run("fit", empty)
    assert r.exit_code == 1
    assert not (tmp_path / "out").exists()


def test_fit_malformed_histogram(run, tmp_path):
    bad = tmp_path / "h.csv"
    bad.write_text("bin_left,bin_right,count\n0,1,5\n1,2,x\n")
    r = run("fit", bad, "--model", "two_gauss")
    assert r.exit_code == 1
    assert "line 3" in r.output


def test_fit_two_gauss_counts_clusters(run, tmp_path):
    rng = np.random.default_rng(0)
    vals = np.concatenate([rng.normal(0, 5, 3000), rng.normal(60, 5, 7000)])
    recs = [ShotRecord(i, "excited", None, float(v)) for i, v in enumerate(vals)]
    path = tmp_path / "shots.csv"
    path.write_text(formats.shots_to_csv(recs, RunConfig().sha256()))
    r = run("fit", path, "--model", "two_gauss")
    assert r.exit_code == 0, r.output
    doc = json.loads((tmp_path / "out" / "fit_two_gauss.json").read_text())
    w = sorted((c["mean"], c["weight"]) for c in doc["outputs"]["fit"]["components"])
    assert w[0][1] == pytest.approx(0.3, abs=0.02)
    assert w[1][1] == pytest.approx(0.7, abs=0.02)
    assert doc["outputs"]["config_hash_mismatch"] is False
    plot = (tmp_path / "out" / "fit_two_gauss_plot.csv").read_text().splitlines()
    assert plot[1] == "bin_center_mV,count,model_count"


def test_fit_warns_on_hash_mismatch(run, tmp_path):
    recs = [ShotRecord(i, "excited", None, float(v))
            for i, v in enumerate(np.random.default_rng(1).normal(0, 1, 500))]
    path = tmp_path / "shots.csv"
    path.write_text(formats.shots_to_csv(recs, "0" * 64))
    r = run("fit", path, "--model", "two_gauss")
    assert r.exit_code == 0
    assert "warning" in r.output
    doc = json.loads((tmp_path / "out" / "fit_two_gauss.json").read_text())
    assert doc["outputs"]["config_hash_mismatch"] is True


def test_simulate_then_fidelity(run, tmp_path):
    assert run("--seed", 5, "simulate", "--shots", 500, out="sim").exit_code == 0
    r = run("fidelity", tmp_path / "sim" / "shots.csv", out="fid")
    assert r.exit_code == 0, r.output
    doc = json.loads((tmp_path / "fid" / "fidelity.json").read_text())
    out = doc["outputs"]
    assert out["n_ground"] == out["n_excited"] == 500
    assert 0.55 < out["empirical"]["F"] < 0.78
    assert out["t1_removed"]["discrepancy"] is True


def test_traces_then_single_cell_sweep(run, tmp_path):
    r = run("--seed", 3, "traces", "--n", 40, "--duration", 20, out="tr")
    assert r.exit_code == 0, r.output
    tdir = tmp_path / "tr" / "traces"
    manifest = json.loads((tdir / "manifest.json").read_text())
    assert len(manifest["traces"]) == 80
    r = run("sweep", tdir, "--t-ro", 13.9, 13.9, 1, "--avg", 10.6, 10.6, 1, out="sw")
    assert r.exit_code == 0, r.output
    doc = json.loads((tmp_path / "sw" / "sweep.json").read_text())
    F = doc["outputs"]["landscape"]["fidelity"]
    tg = [formats.read_trace(tdir / e["file"]) for e in manifest["traces"] if e["prepared_state"] == "ground"]
    te = [formats.read_trace(tdir / e["file"]) for e in manifest["traces"] if e["prepared_state"] == "excited"]
    direct = fidelity_landscape(tg, te, [13.9], [10.6])
    assert F == [[direct.fidelity[0, 0]]]


def test_sweep_all_infeasible_warns(run, tmp_path):
    assert run("--seed", 3, "traces", "--n", 3, "--duration", 10, out="tr").exit_code == 0
    r = run("sweep", tmp_path / "tr" / "traces", "--t-ro", 1, 2, 2, "--avg", 3, 4, 2, out="sw")
    assert r.exit_code == 0
    assert "infeasible" in r.output
    doc = json.loads((tmp_path / "sw" / "sweep.json").read_text())
    assert doc["outputs"]["landscape"]["maximum"] is None
    assert doc["outputs"]["landscape"]["infeasible_cells"] == 4


def test_budget_cli(run, tmp_path):
    r = run("--format", "json", "budget")
    assert r.exit_code == 0
    doc = json.loads((tmp_path / "out" / "budget.json").read_text())["outputs"]
    assert doc["required"] == pytest.approx(9.6923, abs=1e-4)
    assert doc["available"] == pytest.approx(15.0)
    assert doc["passed"] is True
    r = run("budget", "--A_t", 1, "--A_c", 1, "--A_chi", 1, "--A_a", 1, "--A_2f", 1, out="ones")
    doc = json.loads((tmp_path / "ones" / "budget.json").read_text())["outputs"]
    assert doc["available"] == 1.0 and doc["passed"] is False
    r = run("budget", "--gain", 26, out="g26")
    doc = json.loads((tmp_path / "g26" / "budget.json").read_text())["outputs"]
    assert doc["required"] == pytest.approx(4.846, abs=1e-3)
    assert doc["margin"] == pytest.approx(3.095, abs=1e-3)
    assert run("budget", "--A_t", 0).exit_code == 2


def test_demod_demo(run, tmp_path):
    r = run("--format", "csv", "demod-demo", "--amplitude", 50, "--phase", 0.3)
    assert r.exit_code == 0, r.output
    assert r.output.startswith("key,value")
    doc = json.loads((tmp_path / "out" / "demod.json").read_text())["outputs"]
    assert doc["recovered_amplitude"] == pytest.approx(50, rel=1e-6)
    assert doc["recovered_phase"] == pytest.approx(0.3, abs=1e-6)
    assert run("demod-demo", "--noise", 1.0).exit_code == 2
