"""Required versus available SNR improvement as the detector gain varies."""

import argparse

import numpy as np

from boloreadout.fidelity import BudgetFactors, improvement_budget, required_snr_factor


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--gains", type=float, nargs="+", default=[6.5, 9.0, 13.0, 20.0, 26.0])
    args = ap.parse_args()

    exact = required_snr_factor(0.07, 0.001)
    print(f"exact SNR factor for 7% -> 0.1% overlap: {exact:.4f}")
    print(f"{'gain':>6} {'required':>9} {'exact':>9} {'available':>9} {'margin':>7}  verdict")
    for gain in args.gains:
        r = improvement_budget(BudgetFactors(detector_resolution_gain=gain))
        x = improvement_budget(BudgetFactors(detector_resolution_gain=gain, snr_factor=None))
        print(f"{gain:6.1f} {r.required:9.3f} {x.required:9.3f} {r.available:9.3f} {r.margin:7.3f}  "
              f"{'pass' if r.passed else 'fail'}")
    d = BudgetFactors()
    available = np.prod([d.A_t, d.A_c, d.A_chi, d.A_a, d.A_2f])
    print(f"break-even gain: {d.snr_factor * d.pulse_shortening_ratio / available:.2f}")


if __name__ == "__main__":
    main()
