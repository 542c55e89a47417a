"""Suspension flows: invariant splitting, adapted metric and backward wedge growth."""

import numpy as np

from section_forge.flows import build_suspension, flow_jacobian, wedge_growth_check


def main():
    for name, A in (("cat map", [[2, 1], [1, 1]]), ("plastic", [[0, 0, 1], [1, 0, 1], [0, 1, 0]])):
        flow = build_suspension(A)
        sp = flow.splitting
        print(f"{name}: n_s={sp.n_s}, n_u={sp.n_u}, mu in [{sp.mu_minus:.4f}, {sp.mu_plus:.4f}], "
              f"lambda in [{sp.lambda_minus:.4f}, {sp.lambda_plus:.4f}]")
        rng = np.random.default_rng(1)
        v = np.r_[sp.stable_frame @ rng.normal(size=sp.n_s), 0.0]
        w = np.r_[sp.unstable_frame[:, 0], 0.0]
        rep = wedge_growth_check(flow, v, w, np.linspace(0, 20, 81))
        print(f"   backward wedge growth exponent {rep.exponent:+.5f} "
              f"(predicted {rep.predicted_exponent:+.5f}), bound holds: {rep.holds}")

    cat = build_suspension([[2, 1], [1, 1]])
    p = np.array([[0.2, 0.7, 0.4]])
    q, J = flow_jacobian(cat, 2.5, p)
    print(f"\nf_2.5 of {p[0].tolist()} = {np.round(q[0], 6).tolist()}; fibre block of the Jacobian:")
    print(J[0, :2, :2])


if __name__ == "__main__":
    main()
