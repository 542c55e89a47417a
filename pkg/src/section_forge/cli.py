"""Command-line entry point: ``section-forge <command> [options]``.

Commands
--------
criterion   evaluate the spectral criterion and its variants for a spec JSON
pipeline    atlas -> assembled form -> pullback -> closed form -> cross section
bench       rate tables and bound-versus-measurement curves (mollify, wedge, forms)

Exit codes: 0 success, 2 bad input or configuration, 3 ``||d xi_t|| >= 1``,
4 ``min eta(X) <= 0``, 5 an orbit failed to return to the section.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_TRANSVERSALITY, EXIT_NO_RETURN = 0, 2, 3, 4, 5
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class ConfigError(ValueError):
    pass


def thread_cap() -> int | None:
    """Worker cap from ``SECTION_FORGE_THREADS`` (``None`` when unset)."""
    raw = os.environ.get("SECTION_FORGE_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SECTION_FORGE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("SECTION_FORGE_THREADS must be a positive integer")
    return n


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="section-forge", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("criterion", help="evaluate the spectral criterion for a spec JSON")
    p.add_argument("--spec", required=True, type=Path)
    common(p)

    p = sub.add_parser("pipeline", help="construct a global cross section")
    p.add_argument("--flow", required=True, type=Path)
    p.add_argument("--spec", type=Path, help="optional spec JSON overriding theta")
    p.add_argument("--grid", type=_positive_int, default=128, help="fibre samples per axis; s uses half")
    p.add_argument("--eps", type=_floats, help="epsilon, or a list to search for a feasible pair")
    p.add_argument("--t", type=_floats, help="flow time, or a list used for the H measurement")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--amplitude", type=float, default=1e-3, help="wiggle amplitude (0 for none)")
    p.add_argument("--orbits", type=_positive_int, default=1000)
    common(p)

    p = sub.add_parser("bench", help="rate tables and bound curves")
    p.add_argument("kind", choices=("mollify", "wedge", "forms"))
    p.add_argument("--flow", type=Path, help="flow JSON for the wedge bench (cat map by default)")
    p.add_argument("--grid", type=_positive_int, default=8192)
    p.add_argument("--eps", type=_floats)
    p.add_argument("--t", type=_floats)
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--pairs", type=_positive_int, default=100)
    p.add_argument("--count", type=_positive_int, default=20)
    common(p)
    return parser


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(obj):
    import numpy as np

    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------- commands

def cmd_criterion(args) -> int:
    from .spectra import HyperbolicSpec, InvalidSpecError, check_codim_one, check_main, check_reversed

    try:
        spec = HyperbolicSpec.from_json(args.spec.read_text(encoding="utf-8"))
    except (OSError, InvalidSpecError) as exc:
        raise ConfigError(f"malformed spec: {exc}") from exc
    main = check_main(spec)
    variants = {}
    if spec.alpha is not None:
        variants["reversed"] = check_reversed(spec).holds
    if spec.n_u == 1:
        variants["codim_one"] = check_codim_one(spec).holds
    _write_json(args.out / "criterion.json",
                {"verdict": main.holds, "margin_nats": main.margin, "variant_verdicts": variants})
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .flows import FlowError, flow_from_json
    from .sections import DEFAULT_EPS, DEFAULT_T, PipelineError, run_pipeline
    from .spectra import HyperbolicSpec, InvalidSpecError

    try:
        flow = flow_from_json(_read_json(args.flow))
    except FlowError as exc:
        raise ConfigError(f"malformed flow: {exc}") from exc
    theta = args.theta
    if args.spec is not None:
        try:
            theta = HyperbolicSpec.from_json(args.spec.read_text(encoding="utf-8")).theta
        except (OSError, InvalidSpecError) as exc:
            raise ConfigError(f"malformed spec: {exc}") from exc
    if args.grid < 8:
        raise ConfigError("--grid must be at least 8")
    eps_list = args.eps or list(DEFAULT_EPS)
    t_list = args.t or list(DEFAULT_T)
    single = len(eps_list) == 1 and len(t_list) == 1
    kw = dict(theta=theta, amplitude=args.amplitude, grid=(args.grid, max(4, args.grid // 2)),
              n_orbits=args.orbits, seed=args.seed, eps_list=eps_list, t_list=t_list, keep=True)
    if single:
        kw.update(epsilon=eps_list[0], t=t_list[0])
    try:
        report = run_pipeline(flow, **kw)
    except PipelineError as exc:
        _write_json(args.out / "report.json", {**exc.report, "section_found": False, "error": str(exc)})
        return exc.code
    except (ValueError, NotImplementedError) as exc:
        raise ConfigError(str(exc)) from exc
    objs = report.pop("_objects")
    (args.out / "section.csv").write_text(objs["section"].to_csv(), encoding="utf-8")
    _write_json(args.out / "atlas.json", objs["atlas"].summary())
    _write_json(args.out / "report.json", report)
    return EXIT_OK if report["section_found"] else EXIT_NO_RETURN


def _bench_mollify(args) -> dict:
    from .mollify import verify_rates, weierstrass_field

    eps = args.eps or [2.0 ** -k for k in range(4, 10)]
    rep = verify_rates(weierstrass_field(args.grid, args.theta), args.theta, eps)
    (args.out / "mollify.csv").write_text(rep.to_csv(), encoding="utf-8")
    return {"error_slope": rep.error_slope, "grad_slope": rep.grad_slope, "holder_norm": rep.holder_norm,
            "bounds_hold": rep.bounds_hold, "theta": args.theta}


def _bench_wedge(args) -> dict:
    import numpy as np

    from .flows import build_suspension, flow_from_json, wedge_growth_check

    flow = flow_from_json(_read_json(args.flow)) if args.flow else build_suspension([[2, 1], [1, 1]])
    t = args.t or list(np.linspace(0.0, 20.0, 41))
    rng = np.random.default_rng(args.seed)
    sp = flow.splitting
    rows, all_hold = [], True
    for _ in range(args.pairs):
        v = np.append(sp.stable_frame @ rng.normal(size=sp.stable_frame.shape[1]), 0.0)
        w = np.append(sp.unstable_frame @ rng.normal(size=sp.unstable_frame.shape[1]), 0.0)
        point = np.append(rng.uniform(size=flow.d), rng.uniform())
        rep = wedge_growth_check(flow, v, w, t, point=point)
        all_hold &= rep.holds
        rows.append(rep)
    # the table lists the worst pair: largest measured / bound over t
    worst = max(rows, key=lambda r: float(np.max(r.measured / r.bound)))
    (args.out / "wedge.csv").write_text(worst.to_csv(), encoding="utf-8")
    return {"pairs": args.pairs, "all_hold": bool(all_hold),
            "max_ratio": float(np.max(worst.measured / worst.bound)),
            "exponent": worst.exponent, "predicted_exponent": worst.predicted_exponent}


def _bench_forms(args) -> dict:
    import csv
    import io

    import numpy as np

    from .forms import closed_projection, exterior_derivative, form_norm, random_smooth_form
    from .grid import GridGeometry

    n = 64 if args.grid >= 64 else args.grid
    rng = np.random.default_rng(args.seed)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["index", "dim", "degree", "norm_d_xi", "norm_xi_minus_eta", "norm_d_eta", "ok"])
    all_ok = True
    for i in range(args.count):
        dim = 2 if i % 2 == 0 else 3
        degree = 1 if dim == 2 or i % 4 == 1 else 2
        geo = GridGeometry.periodic_box((n,) * dim if dim == 2 else (n // 2,) * dim)
        xi = random_smooth_form(geo, degree, rng)
        nd = form_norm(exterior_derivative(xi))
        _, rep = closed_projection(xi, method="hodge")
        ok = rep["norm_xi_minus_eta"] <= nd * (1 + 1e-2) + 1e-9
        all_ok &= ok
        wr.writerow([i, dim, degree, repr(nd), repr(rep["norm_xi_minus_eta"]), repr(rep["norm_d_eta"]), ok])
    (args.out / "forms.csv").write_text(buf.getvalue(), encoding="utf-8")
    return {"count": args.count, "all_ok": bool(all_ok)}


def cmd_bench(args) -> int:
    from .flows import FlowError
    from .mollify import ResolutionError

    runner = {"mollify": _bench_mollify, "wedge": _bench_wedge, "forms": _bench_forms}[args.kind]
    try:
        summary = runner(args)
    except (FlowError, ResolutionError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    _write_json(args.out / f"{args.kind}.json", summary)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cap = thread_cap()
        if cap is not None:
            for var in _THREAD_VARS:
                os.environ[var] = str(cap)
        try:
            args.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory not writable: {exc}") from exc
        command = {"criterion": cmd_criterion, "pipeline": cmd_pipeline, "bench": cmd_bench}[args.command]
        return command(args)
    except ConfigError as exc:
        print(f"section-forge: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
