"""Spectral criterion and the feasible (epsilon, t) region.

Evaluates the criterion for two rate sets, then shows how the admissible pullback
times open up as epsilon shrinks when the criterion holds.
"""

import numpy as np

from section_forge.spectra import HyperbolicSpec, check_main, feasibility, pick_admissible


def main():
    good = HyperbolicSpec(mu_minus=0.3, mu_plus=0.4, lambda_minus=2.0, lambda_plus=2.0, c=1.0,
                          n_s=4, n_u=2, theta=0.9)
    bad = HyperbolicSpec(mu_minus=0.3, mu_plus=0.9, lambda_minus=2.0, lambda_plus=3.0, c=1.0,
                         n_s=2, n_u=2, theta=0.5)
    for name, spec in (("pinched", good), ("loose", bad)):
        v = check_main(spec)
        print(f"{name:8s} criterion holds={v.holds}  margin={v.margin:+.3f} nats")

    region = feasibility(good, H=10.0, eps_grid=np.logspace(-2, -12, 6))
    print("\nepsilon      t_lo      t_hi   nonempty")
    for (eps, lo, hi), ok in zip(region.samples, region.nonempty):
        print(f"{eps:8.1e} {lo:9.3f} {hi:9.3f}   {ok}")
    eps, t = pick_admissible(region)
    print(f"\nchosen pair: epsilon={eps:.1e}, t={t:.3f}; nonempty below {region.nonempty_below:.3e}")


if __name__ == "__main__":
    main()
