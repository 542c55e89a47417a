"""Mollifying a Hölder function: sup error ~ eps^theta, gradient ~ eps^(theta - 1)."""

import numpy as np

from section_forge.mollify import verify_rates, weierstrass_field


def main():
    eps = 2.0 ** -np.arange(4, 10)
    for theta in (0.5, 0.8):
        rep = verify_rates(weierstrass_field(8192, theta), theta, eps)
        print(f"theta={theta}: sup-error slope {rep.error_slope:.3f} (target {theta}), "
              f"gradient slope {rep.grad_slope:.3f} (target {theta - 1:.1f}), "
              f"absolute bounds hold: {rep.bounds_hold}")
        for e, err, g in zip(rep.epsilon, rep.sup_error, rep.max_grad):
            print(f"   eps={e:.5f}  sup|u_eps - u|={err:.4e}  max|du_eps|={g:.3e}")


if __name__ == "__main__":
    main()
