"""Command-line front end: ``boloreadout [--config PATH] [--seed N] [--out DIR] COMMAND``.

Exit status is 0 on success, 2 on usage errors and 1 when a computation fails.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import json
import logging
import math
import os
import sys
from importlib import metadata
from pathlib import Path

import click
import numpy as np

from . import dist, fidelity, formats, iq, sim
from .formats import ConfigError, FormatError, OutputSet, RunConfig

log = logging.getLogger("boloreadout")


class ComputationError(click.ClickException):
    exit_code = 1


def _version():
    try:
        return metadata.version("boloreadout")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp so that re-runs are byte-identical
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
            else _dt.datetime.now(_dt.timezone.utc))
    return when.isoformat(timespec="seconds")


def _provenance(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed, "version": _version(), "config_sha256": cfg.sha256(),
            "created_utc": _timestamp()}


def _document(cfg: RunConfig, command: str, outputs: dict, extra_inputs: dict | None = None) -> dict:
    inputs = {"config": cfg.to_dict(), "command": command}
    if extra_inputs:
        inputs.update(extra_inputs)
    return {"inputs": inputs, "outputs": outputs, "provenance": _provenance(cfg)}


def _emit(ctx, doc_outputs: dict):
    """Print the headline outputs on stdout in the requested format."""
    flat = {}

    def walk(prefix, v):
        if isinstance(v, dict):
            for k, x in v.items():
                walk(f"{prefix}.{k}" if prefix else k, x)
        elif not isinstance(v, (list, tuple)):
            flat[prefix] = v

    walk("", formats._jsonable(doc_outputs))
    if ctx.obj["format"] == "json":
        click.echo(json.dumps(flat, sort_keys=True, indent=2))
    else:
        click.echo("key,value")
        for k in sorted(flat):
            click.echo(f"{k},{flat[k]}")


def _require_seed(cfg: RunConfig):
    if cfg.seed is None:
        raise click.UsageError("--seed is required for commands that draw random numbers")


def _check_hash(cfg: RunConfig, found: str | None, what: str) -> bool:
    """Warn when an input file was produced under a different configuration."""
    if found is not None and found != cfg.sha256():
        click.echo(f"warning: {what} was written with config {found[:12]}, "
                   f"current config is {cfg.sha256()[:12]}", err=True)
        return True
    return False


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="key = value configuration file")
@click.option("--seed", type=int, default=None, help="master random seed")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=".",
              help="output directory")
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="json",
              help="format of the summary printed on stdout")
@click.pass_context
def main(ctx, config_path, seed, out_dir, fmt):
    """Bolometric single-shot qubit readout: simulation, fitting and fidelity analysis."""
    try:
        cfg = formats.load_config(config_path) if config_path else RunConfig().validate()
    except (ConfigError, OSError) as exc:
        raise click.UsageError(f"invalid config: {exc}") from None
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    elif cfg.seed is not None:
        raise click.UsageError("the seed must be given with --seed, not in the config file")
    ctx.obj = {"cfg": cfg, "out": Path(out_dir), "format": fmt}


def _cfg_with(ctx, **changes) -> RunConfig:
    cfg = ctx.obj["cfg"]
    changes = {k: v for k, v in changes.items() if v is not None}
    try:
        return dataclasses.replace(cfg, **changes).validate()
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from None


def _run(fn):
    """Turn computation failures into exit status 1."""
    try:
        return fn()
    except click.ClickException:
        raise
    except (FormatError, dist.FitError, dist.QuadratureError, ValueError, OSError) as exc:
        raise ComputationError(str(exc)) from None


@main.command()
@click.option("--shots", type=int, default=None, help="shots per prepared state")
@click.option("--baseline-mode", type=click.Choice(["per_shot", "common"]), default=None)
@click.option("--traces/--no-traces", default=False, help="also write every trace as a BOLO1 file")
@click.pass_context
def simulate(ctx, shots, baseline_mode, traces):
    """Simulate ground and excited shots and write shots.csv."""
    if shots is not None and shots < 1:
        raise click.UsageError("--shots must be >= 1")
    cfg = _cfg_with(ctx, n_shots=shots, baseline_mode=baseline_mode)
    _require_seed(cfg)

    def work():
        sc = cfg.sim_config()
        n = cfg.n_shots
        with OutputSet(ctx.obj["out"]) as out:
            kw = dict(baseline_mode=cfg.baseline_mode, seed=cfg.seed,
                      common_baseline=cfg.common_baseline, workers=cfg.workers,
                      return_traces=traces)
            rg = sim.simulate_shot_batch(n, sc, "ground", start_index=0, **kw)
            re = sim.simulate_shot_batch(n, sc, "excited", start_index=n, **kw)
            if traces:
                (rg, tg), (re, te) = rg, re
                for rec, tr in zip(rg + re, tg + te):
                    out.write(f"traces/shot_{rec.shot_index:07d}.bolo", formats.trace_to_bytes(tr))
            records = rg + re
            out.write("shots.csv", formats.shots_to_csv(records, cfg.sha256()))
            g, e = sim.signals(rg), sim.signals(re)
            best = fidelity.optimal_threshold(g, e)
            outputs = {"n_ground": n, "n_excited": n,
                       "mean_S_ground": float(g.mean()), "std_S_ground": float(g.std(ddof=1)) if n > 1 else 0.0,
                       "mean_S_excited": float(e.mean()),
                       "optimal_threshold": best.as_dict()}
            out.write("simulate.json", formats.results_json(_document(cfg, "simulate", outputs)))
        return outputs

    _emit(ctx, _run(work))


@main.command()
@click.option("--n", "n_traces", type=int, default=None, help="traces per prepared state")
@click.option("--duration", type=float, default=None, help="post-onset trace length (µs)")
@click.pass_context
def traces(ctx, n_traces, duration):
    """Simulate full traces for post-processing sweeps."""
    if n_traces is not None and n_traces < 1:
        raise click.UsageError("--n must be >= 1")
    cfg = _cfg_with(ctx, n_traces=n_traces, trace_duration=duration)
    _require_seed(cfg)

    def work():
        sc = cfg.sim_config(duration=cfg.trace_duration)
        n = cfg.n_traces
        t_pre = cfg.t_base if cfg.baseline_mode == "per_shot" else 0.0
        names = []
        with OutputSet(ctx.obj["out"]) as out:
            for state, start in (("ground", 0), ("excited", n)):
                for k in range(n):
                    idx = start + k
                    tr = sim.simulate_trace(state, sc.resp, sc.qubit, sc.noise, cfg.trace_duration,
                                            cfg.dt, sim.SeedSpec(cfg.seed, idx), t_pre=t_pre)
                    name = f"traces/{state[0]}_{idx:07d}.bolo"
                    out.write(name, formats.trace_to_bytes(tr))
                    names.append({"file": Path(name).name, "prepared_state": state, "shot_index": idx})
            manifest = {"config_sha256": cfg.sha256(), "traces": names}
            out.write("traces/manifest.json", formats.results_json(manifest))
        return {"n_ground": n, "n_excited": n, "duration_us": cfg.trace_duration, "dt_us": cfg.dt}

    _emit(ctx, _run(work))


def _read_histogram_csv(text: str) -> dist.Histogram:
    edges, counts = [], []
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows or rows[0].split(",")[:3] != ["bin_left", "bin_right", "count"]:
        raise FormatError("line 1: expected header bin_left,bin_right,count")
    for lineno, line in enumerate(rows[1:], 2):
        parts = line.split(",")
        try:
            left, right, c = float(parts[0]), float(parts[1]), int(parts[2])
        except (ValueError, IndexError):
            raise FormatError(f"line {lineno}: malformed histogram row") from None
        if edges and abs(edges[-1] - left) > 1e-9 * max(1.0, abs(left)):
            raise FormatError(f"line {lineno}: bins must be contiguous")
        if not edges:
            edges.append(left)
        edges.append(right)
        counts.append(c)
    if not counts:
        raise FormatError("histogram has no rows")
    return dist.Histogram(np.array(edges), np.array(counts))


@main.command()
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--model", type=click.Choice(["two_gauss", "decay"]), default="decay")
@click.option("--state", type=click.Choice(["ground", "excited"]), default="excited",
              help="which prepared state to fit when the input is a shots CSV")
@click.option("--bin-width", type=float, default=None, help="override Scott's rule")
@click.pass_context
def fit(ctx, input_path, model, state, bin_width):
    """Fit a two-Gaussian mixture or the decay model to shots or a histogram CSV."""
    cfg = ctx.obj["cfg"]

    def work():
        text = Path(input_path).read_text(encoding="utf-8")
        if not text.strip():
            raise FormatError(f"{input_path} is empty")
        extra = {"input": str(input_path), "model": model}
        mismatch = False
        if any(ln.startswith("shot_index,") for ln in text.splitlines()[:5]):
            records, h = formats.parse_shots_csv(text)
            mismatch = _check_hash(cfg, h, input_path)
            g, e = formats.split_by_state(records)
            samples = g if state == "ground" else e
            if samples.size < 2:
                raise FormatError(f"not enough {state} shots in {input_path}")
            hist = dist.make_histogram(samples, bin_width)
            extra["state"] = state
        else:
            hist = _read_histogram_csv(text)
        if model == "two_gauss":
            res = dist.fit_two_gaussians(hist)
            curve = res.pdf(hist.centers) * hist.widths * hist.total
            fit_out = res.as_dict()
        else:
            res = dist.fit_decay_model(hist, cfg.window(), cfg.tau_b)
            curve = dist.fitted_curve(res.params, hist)
            fit_out = res.as_dict()
        rows = zip(hist.centers, hist.counts.astype(int), curve)
        outputs = {"fit": fit_out, "bin_width": float(hist.widths[0]), "n_bins": len(hist.counts),
                   "config_hash_mismatch": mismatch}
        with OutputSet(ctx.obj["out"]) as out:
            out.write(f"fit_{model}_plot.csv",
                      formats.table_csv(["bin_center_mV", "count", "model_count"], rows, cfg.sha256()))
            out.write(f"fit_{model}.json", formats.results_json(_document(cfg, "fit", outputs, extra)))
        return outputs

    _emit(ctx, _run(work))


@main.command("fidelity")
@click.argument("shots_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--threshold", type=float, default=None, help="evaluate at this threshold instead of optimizing")
@click.option("--model/--no-model", "with_model", default=True,
              help="also report the decay-model fidelity for the configured parameters")
@click.pass_context
def fidelity_cmd(ctx, shots_path, threshold, with_model):
    """Empirical (and model) readout fidelity from a shots CSV."""
    cfg = ctx.obj["cfg"]

    def work():
        records, h = formats.parse_shots_csv(Path(shots_path).read_text(encoding="utf-8"))
        mismatch = _check_hash(cfg, h, shots_path)
        g, e = formats.split_by_state(records)
        if g.size == 0 or e.size == 0:
            raise FormatError("need both ground and excited shots")
        if threshold is None:
            emp = fidelity.optimal_threshold(g, e)
        else:
            emp = fidelity.empirical_fidelity(g, e, threshold)
        outputs = {"empirical": emp.as_dict(), "n_ground": int(g.size), "n_excited": int(e.size),
                   "config_hash_mismatch": mismatch}
        if with_model:
            sigma = math.sqrt(cfg.P_N / cfg.window().length)
            p = dist.DecayDistParams(cfg.c_g, cfg.c_e, cfg.T1, sigma, cfg.P_x, cfg.window(), cfg.tau_b)
            outputs["model"] = fidelity.optimal_model_threshold(p).as_dict()
            outputs["model_at_empirical_threshold"] = fidelity.model_fidelity(p, emp.V_th).as_dict()
            outputs["t1_removed"] = fidelity.t1_removed_fidelity(p)
            outputs["t1_error"] = fidelity.t1_error(cfg.t_RO, cfg.T1)
        with OutputSet(ctx.obj["out"]) as out:
            out.write("fidelity.json", formats.results_json(
                _document(cfg, "fidelity", outputs, {"input": str(shots_path)})))
        return outputs

    _emit(ctx, _run(work))


def _load_trace_dir(trace_dir: Path, cfg: RunConfig):
    manifest_path = trace_dir / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    mismatch = _check_hash(cfg, manifest.get("config_sha256"), manifest_path)
    tg, te = [], []
    for entry in manifest["traces"]:
        tr = formats.read_trace(trace_dir / entry["file"])
        (tg if entry["prepared_state"] == "ground" else te).append(tr)
    if not tg or not te:
        raise FormatError("trace directory needs both ground and excited traces")
    return tg, te, mismatch


@main.command()
@click.argument("trace_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--t-ro", nargs=3, type=(float, float, int), default=None,
              help="pulse-length axis: MIN MAX N")
@click.option("--avg", nargs=3, type=(float, float, int), default=None,
              help="averaging-time axis: MIN MAX N")
@click.pass_context
def sweep(ctx, trace_dir, t_ro, avg):
    """Fidelity landscape over post-processed pulse length and averaging time."""
    changes = {}
    if t_ro:
        changes.update(grid_t_ro_min=t_ro[0], grid_t_ro_max=t_ro[1], grid_t_ro_n=t_ro[2])
    if avg:
        changes.update(grid_avg_min=avg[0], grid_avg_max=avg[1], grid_avg_n=avg[2])
    cfg = _cfg_with(ctx, **changes)

    def work():
        tg, te, mismatch = _load_trace_dir(Path(trace_dir), cfg)
        grid = fidelity.fidelity_landscape(tg, te, cfg.t_ro_axis(), cfg.avg_axis(),
                                           common_baseline=cfg.common_baseline,
                                           level=cfg.landscape_level, workers=cfg.workers)
        n_bad = int((~grid.feasible).sum())
        if n_bad:
            click.echo(f"warning: {n_bad} of {grid.fidelity.size} grid cells are infeasible", err=True)
        rows = []
        for i, tr in enumerate(grid.t_ro_axis):
            for j, av in enumerate(grid.avg_axis):
                f = grid.fidelity[i, j]
                rows.append([tr, av, "" if not np.isfinite(f) else f,
                             "" if not np.isfinite(f) else grid.thresholds[i, j]])
        contour_rows = [[k, v, a, b] for k, c in enumerate(grid.contours) for v, (a, b) in enumerate(c)]
        outputs = {"landscape": grid.as_dict(), "config_hash_mismatch": mismatch}
        if grid.feasible.any():
            outputs["region_cells_above_level"] = int(grid.region_with_max().sum())
        with OutputSet(ctx.obj["out"]) as out:
            out.write("landscape.csv", formats.table_csv(
                ["t_RO_us", "averaging_time_us", "F", "V_th_mV"], rows, cfg.sha256()))
            out.write("contour.csv", formats.table_csv(
                ["contour", "vertex", "t_RO_us", "averaging_time_us"], contour_rows, cfg.sha256()))
            out.write("sweep.json", formats.results_json(
                _document(cfg, "sweep", outputs, {"trace_dir": str(trace_dir)})))
        summary = {"maximum": outputs["landscape"]["maximum"], "infeasible_cells": n_bad,
                   "contours": len(grid.contours)}
        return summary

    _emit(ctx, _run(work))


@main.command()
@click.option("--A_t", "A_t", type=float, default=2.0)
@click.option("--A_c", "A_c", type=float, default=1.25)
@click.option("--A_chi", "A_chi", type=float, default=2.0)
@click.option("--A_a", "A_a", type=float, default=1.5)
@click.option("--A_2f", "A_2f", type=float, default=2.0)
@click.option("--ratio", type=float, default=70.0, help="SNR loss from shortening the pulse")
@click.option("--gain", type=float, default=13.0, help="energy-resolution gain of the new detector")
@click.option("--baseline-infidelity", type=float, default=0.07)
@click.option("--target-infidelity", type=float, default=0.001)
@click.option("--snr-factor", type=float, default=1.8,
              help="required SNR multiplier; pass 0 to derive it from the inverse error function")
@click.pass_context
def budget(ctx, A_t, A_c, A_chi, A_a, A_2f, ratio, gain, baseline_infidelity, target_infidelity,
           snr_factor):
    """Required versus available SNR improvement for a target infidelity."""
    cfg = ctx.obj["cfg"]
    try:
        b = fidelity.BudgetFactors(A_t, A_c, A_chi, A_a, A_2f, target_infidelity,
                                   baseline_infidelity, ratio, gain, snr_factor or None)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None

    def work():
        rep = fidelity.improvement_budget(b)
        outputs = {"factors": dataclasses.asdict(b), **rep.as_dict()}
        with OutputSet(ctx.obj["out"]) as out:
            out.write("budget.json", formats.results_json(_document(cfg, "budget", outputs)))
        click.echo(f"required {rep.required:.4g}  available {rep.available:.4g}  "
                   f"margin {rep.margin:.3g}x  {'PASS' if rep.passed else 'FAIL'}", err=True)
        return rep.as_dict()

    _emit(ctx, _run(work))


@main.command("demod-demo")
@click.option("--amplitude", type=float, default=100.0, help="IF tone amplitude (mV)")
@click.option("--phase", type=float, default=0.6, help="tone phase (rad)")
@click.option("--n-samples", type=int, default=2**16)
@click.option("--noise", type=float, default=0.0, help="white noise std per raw sample (mV)")
@click.option("--boxcar", type=int, default=512, help="downsampling block length")
@click.pass_context
def demod_demo(ctx, amplitude, phase, n_samples, noise, boxcar):
    """Synthesize a 70.3125 MHz IF tone, demodulate, rotate onto I and downsample."""
    cfg = ctx.obj["cfg"]
    if noise > 0:
        _require_seed(cfg)

    def work():
        x = iq.synthesize_if(amplitude, phase, n_samples)
        if noise > 0:
            x = x + noise * np.random.default_rng(cfg.seed).standard_normal(n_samples)
        base = iq.digital_demodulate(x)
        down = iq.boxcar_downsample(base, boxcar)
        angle = -math.atan2(down.Q.mean(), down.I.mean())
        rot = iq.rotate(down, angle)
        rows = [[k * down.dt, *down.samples[k], *rot.samples[k]] for k in range(down.samples.shape[0])]
        outputs = {"recovered_amplitude": float(2 * np.hypot(down.I.mean(), down.Q.mean())),
                   "recovered_phase": float(math.atan2(down.Q.mean(), down.I.mean())),
                   "rotation_angle": angle, "n_out": int(down.samples.shape[0]),
                   "dt_us": down.dt}
        with OutputSet(ctx.obj["out"]) as out:
            out.write("demod_iq.csv", formats.table_csv(
                ["t_us", "I_mV", "Q_mV", "I_rot_mV", "Q_rot_mV"], rows, cfg.sha256()))
            out.write("demod_trace.bolo", formats.trace_to_bytes(sim.Trace(down.dt, 0.0, down.samples)))
            out.write("demod.json", formats.results_json(_document(
                cfg, "demod-demo", outputs,
                {"amplitude": amplitude, "phase": phase, "n_samples": n_samples, "noise": noise,
                 "boxcar": boxcar})))
        return outputs

    _emit(ctx, _run(work))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
