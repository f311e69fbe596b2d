"""Fidelity landscape over pulse length and averaging time from simulated 40 us traces.

    python scripts/landscape.py --seed 1 --traces 1000 --out runs/landscape
"""

import argparse
import time
from pathlib import Path

from boloreadout import formats
from boloreadout.fidelity import fidelity_landscape
from boloreadout.formats import RunConfig
from boloreadout.sim import simulate_traces


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, required=True)
    ap.add_argument("--traces", type=int, default=1000)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--out", type=Path, default=Path("runs/landscape"))
    args = ap.parse_args()

    cfg = RunConfig(seed=args.seed, n_traces=args.traces).validate()
    sc = cfg.sim_config(duration=cfg.trace_duration)
    t = time.perf_counter()
    tg = simulate_traces(cfg.n_traces, sc, "ground", seed=cfg.seed)
    te = simulate_traces(cfg.n_traces, sc, "excited", seed=cfg.seed, start_index=cfg.n_traces)
    grid = fidelity_landscape(tg, te, cfg.t_ro_axis(), cfg.avg_axis(), dt=cfg.dt,
                              level=cfg.landscape_level, workers=args.workers)

    args.out.mkdir(parents=True, exist_ok=True)
    rows = [[tr, av, grid.fidelity[i, j]] for i, tr in enumerate(grid.t_ro_axis)
            for j, av in enumerate(grid.avg_axis) if grid.feasible[i, j]]
    formats.atomic_write(args.out / "landscape.csv",
                         formats.table_csv(["t_RO_us", "averaging_time_us", "F"], rows, cfg.sha256()))
    formats.atomic_write(args.out / "landscape.json", formats.results_json(grid.as_dict()))
    m = grid.maximum
    print(f"max F = {m['F']:.4f} at t_RO = {m['t_RO']:.2f} us, averaging = {m['averaging_time']:.2f} us")
    print(f"cells above {cfg.landscape_level}: {int(grid.region_with_max().sum())} connected to the maximum")
    print(f"{time.perf_counter() - t:.1f} s")


if __name__ == "__main__":
    main()
