"""Discrete forms: exterior derivative, homotopy operator and projection to closed forms."""

import numpy as np

from section_forge.forms import (
    DiscreteKForm,
    closed_projection,
    cylinder_ends,
    exterior_derivative,
    form_norm,
    homotopy_operator,
    random_smooth_form,
)
from section_forge.grid import GridGeometry


def main():
    rng = np.random.default_rng(0)
    torus = GridGeometry.periodic_box((64, 64, 64))
    xi = random_smooth_form(torus, 1, rng)
    dxi = exterior_derivative(xi)
    print(f"random 1-form on T^3: ||d xi|| = {form_norm(dxi):.4f}, "
          f"||dd xi|| = {form_norm(exterior_derivative(dxi)):.1e}")
    eta, rep = closed_projection(xi, method="hodge")
    print(f"closed projection: ||xi - eta|| = {rep['norm_xi_minus_eta']:.4f} <= ||d xi||, "
          f"||d eta|| = {rep['norm_d_eta']:.1e}")

    # homotopy identity on T^2 x [0, 1]: d H w + H d w = j1^* w - j0^* w
    cyl = GridGeometry((64, 64, 33), (1 / 64, 1 / 64, 1 / 32), (0.0, 0.0, 0.0), (True, True, False))
    pts = cyl.points()
    comps = np.stack([np.cos(2 * np.pi * pts[..., 0]) * np.exp(pts[..., 2]),
                      np.sin(2 * np.pi * pts[..., 1]) * pts[..., 2] ** 2,
                      np.cos(2 * np.pi * (pts[..., 0] + pts[..., 1])) * (1 + pts[..., 2])])
    om = DiscreteKForm(1, cyl, comps)
    j0, j1 = cylinder_ends(om)
    Hom = homotopy_operator(om)
    lhs = exterior_derivative(Hom, 4).components + homotopy_operator(exterior_derivative(om, 4)).components
    resid = np.max(np.abs(lhs - (j1 - j0).components))
    print(f"homotopy identity residual {resid:.2e};  ||H w|| / ||w|| = {form_norm(Hom) / form_norm(om):.3f}")


if __name__ == "__main__":
    main()
