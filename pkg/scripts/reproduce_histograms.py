"""Simulate the 13.9 us / 10.6 us operating point, fit both histograms and write plot data.

    python scripts/reproduce_histograms.py --seed 1 --out runs/hist
"""

import argparse
from pathlib import Path

import numpy as np

from boloreadout import dist, fidelity, formats
from boloreadout.formats import RunConfig
from boloreadout.sim import signals, simulate_shot_batch


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, required=True)
    ap.add_argument("--shots", type=int, default=10_000)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--out", type=Path, default=Path("runs/hist"))
    args = ap.parse_args()

    cfg = RunConfig(seed=args.seed, n_shots=args.shots).validate()
    sc = cfg.sim_config()
    n = cfg.n_shots
    g = signals(simulate_shot_batch(n, sc, "ground", seed=cfg.seed, workers=args.workers))
    e = signals(simulate_shot_batch(n, sc, "excited", seed=cfg.seed, start_index=n,
                                    workers=args.workers))

    hg, he = dist.make_histogram(g), dist.make_histogram(e)
    two = dist.fit_two_gaussians(hg)
    decay = dist.fit_decay_model(he, cfg.window(), cfg.tau_b)
    best = fidelity.optimal_threshold(g, e)

    args.out.mkdir(parents=True, exist_ok=True)
    for name, h, curve in (("ground", hg, two.pdf(hg.centers) * hg.widths * hg.total),
                           ("excited", he, dist.fitted_curve(decay.params, he))):
        rows = zip(h.centers, h.counts, curve)
        formats.atomic_write(args.out / f"hist_{name}.csv",
                             formats.table_csv(["bin_center_mV", "count", "model_count"], rows,
                                               cfg.sha256()))
    summary = {"threshold": best.as_dict(), "ground_fit": two.as_dict(), "excited_fit": decay.as_dict(),
               "t1_removed": fidelity.t1_removed_fidelity(decay.params)}
    formats.atomic_write(args.out / "summary.json", formats.results_json(summary))

    p = decay.params
    print(f"F = {best.F:.4f} at V_th = {best.V_th:.2f} mV")
    print(f"decay fit: c_g={p.c_g:.2f} c_e={p.c_e:.2f} T1={p.T1:.2f} sigma={p.sigma:.2f} P_x={p.P_x:.3f}")
    print(f"ground fit weights: {np.round([c.weight for c in two.components], 3)}")


if __name__ == "__main__":
    main()
