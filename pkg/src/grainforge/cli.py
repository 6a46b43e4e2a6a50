"""Command-line front end. Every output embeds the resolved configuration
and a format version; exit codes are 0 (ok), 2 (usage), 3 (numerical)."""
import argparse
import csv
import io
import json
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .errors import NumericalError, UsageError

FORMAT_VERSION = "grainforge-output/1"


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _clean(o):
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if np.isfinite(v) else str(v)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    return o


def write_json(path, payload, config):
    doc = {"format_version": FORMAT_VERSION, "grainforge_version": __version__,
           "config": config, **payload}
    _atomic_write(path, json.dumps(_clean(doc), sort_keys=True, indent=2) + "\n")


def write_csv(path, header, rows, config):
    buf = io.StringIO()
    buf.write(f"# format_version={FORMAT_VERSION}\n")
    buf.write("# config=" + json.dumps(_clean(config), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    _atomic_write(path, buf.getvalue())


def _floats(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"not a comma-separated list of numbers: {text!r}") from None
    return vals


def _config(args):
    # the output directory is left out so reruns elsewhere give identical files
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}


def _out(args, name):
    return os.path.join(args.out, name)


# ---------------------------------------------------------------- commands

def cmd_construct(args):
    from .circulation import check_h2
    from .constructions import (CtoCParams, RtoCParams, build_c_to_c, build_r_to_c, build_r_to_r,
                                derive_rr_params, rr_window_half)
    from .fields import Domain, ModelParams, rasterize, write_grid

    params = ModelParams(args.eps, args.tau, args.lam)
    if args.kind == "r2r":
        p = derive_rr_params(args.theta, args.alpha, args.eps, args.tau)
        if p.trivial:
            raise UsageError("alpha = 0 gives the constant field; nothing to construct")
        field, S = build_r_to_r(p)
        desc = {"kind": "r2r", "params": p.to_dict()}
        half = rr_window_half(p)
    else:
        need = ["eta", "mu", "l", "h", "r", "rho"] + (["eta_t", "mu_t"] if args.kind == "c2c" else ["beta"])
        missing = [k for k in need if getattr(args, k) is None]
        if missing:
            raise UsageError(f"{args.kind} needs --" + ", --".join(m.replace("_", "-") for m in missing))
        if args.kind == "c2c":
            p = CtoCParams(args.eta, args.eta_t, args.mu, args.mu_t, args.l, args.h, args.r, args.rho)
            field, S = build_c_to_c(p, (-3 * args.h, 3 * args.h))
        else:
            p = RtoCParams(args.beta, args.eta, args.mu, args.l, args.h, args.r, args.rho)
            field, S = build_r_to_c(p, (-3 * args.h, 3 * args.h))
        desc = {"kind": args.kind, "params": dict(p.__dict__)}
        half = 2 * args.h
    rep = check_h2(field, S, params, seed=args.seed)
    desc["defects"] = S.to_dict()
    write_json(_out(args, "construction.json"), {"construction": desc}, _config(args))
    write_json(_out(args, "burgers.json"), {"burgers": rep.to_dict()}, _config(args))
    if args.raster:
        n = int(np.ceil(2 * half / args.raster))
        dom = Domain(-n * args.raster / 2, n * args.raster / 2, -n * args.raster / 2,
                     n * args.raster / 2, args.raster)
        write_grid(_out(args, "field.bin"), rasterize(field, dom, mode=args.raster_mode))
    return 0


def cmd_rs_curve(args):
    from .cell_problem import read_shockley_sweep

    if args.alphas is not None:
        alphas = _floats(args.alphas)
    else:
        alphas = list(np.exp(np.linspace(np.log(args.alpha_min), np.log(args.alpha_max), args.n)))
    if not alphas:
        raise UsageError("empty alpha list")
    curve = read_shockley_sweep(args.theta, alphas, eps=args.eps, lam=args.lam, rtol=args.rtol,
                                jobs=args.jobs)
    cfg = _config(args)
    write_csv(_out(args, "rs_curve.csv"), ["alpha", "theta", "value", "bound_ratio"],
              [[r["alpha"], r["theta"], r["value"], r["bound_ratio"]] for r in curve.rows()], cfg)
    write_json(_out(args, "rs_fit.json"), {"fit": curve.fit_dict()}, cfg)
    return 0


def cmd_psi(args):
    from .cell_problem import CellConfig, psi_estimate, psi_infty

    Ls = _floats(args.L)
    if not Ls:
        raise UsageError("empty L list")
    cfg = CellConfig(h=args.h, lam=args.lam, max_iter=args.max_iter)
    Rm, Rp = args.theta - args.alpha, args.theta + args.alpha
    if len(Ls) >= 3:
        value, rep = psi_infty(Rm, Rp, Ls, cfg)
        payload = {"series": rep["runs"], "psi_infty": value, "trend": rep}
    else:
        runs = [psi_estimate(Rm, Rp, L, cfg).to_dict() for L in Ls]
        payload = {"series": runs}
    write_json(_out(args, "psi.json"), payload, {**_config(args), "cell_config": cfg.to_dict()})
    return 0


def _load_defects(path):
    from .fields import DefectSet

    if not path:
        return DefectSet()
    with open(path) as fh:
        d = json.load(fh)
    return DefectSet.from_dict(d.get("defects", d))


def cmd_clearout(args):
    from .fields import Domain, ModelParams, read_grid, rot, write_grid
    from .interpolation import clear_out

    f = read_grid(args.field)
    S = _load_defects(args.defects)
    d = f.domain
    band = Domain(*(_floats(args.band) if args.band else (d.x_min, d.x_max, d.y_min, d.y_max)))
    out, S2, rep = clear_out(f, S, band, rot(args.R), args.sigma,
                             ModelParams(args.eps, args.tau, args.lam), omega=args.omega)
    write_grid(_out(args, "cleared.bin"), out)
    write_json(_out(args, "clearout.json"), {"report": rep.to_dict(), "defects": S2.to_dict()},
               _config(args))
    return 0


def cmd_regularize(args):
    from .fields import ModelParams, read_grid, write_grid
    from .regularize import regularize

    f = read_grid(args.field)
    S = _load_defects(args.defects)
    out, S2, rep = regularize(f, S, ModelParams(args.eps, args.tau, args.lam))
    write_grid(_out(args, "regularized.bin"), out)
    write_json(_out(args, "regularize.json"), {"report": rep, "defects": S2.to_dict()},
               _config(args))
    return 0


def cmd_f0(args):
    from .limit_energy import PhiTable, PolygonalPartition, build_recovery, f0_evaluate

    with open(args.partition) as fh:
        part = PolygonalPartition.from_json(json.load(fh))
    source = PhiTable.read_csv(args.phi) if args.phi else "construction"
    total, rows = f0_evaluate(part, source, report=True)
    payload = {"f0": total, "edges": rows}
    if args.recovery_eps:
        rec = build_recovery(part, args.recovery_eps, args.delta if args.delta else "auto",
                             args.tau, args.lam)
        payload["recovery"] = {"info": rec.info, "energy": rec.energy()}
    write_json(_out(args, "f0.json"), payload, _config(args))
    return 0


# ---------------------------------------------------------------- parser

def _jobs_default():
    v = os.environ.get("GRAINFORGE_JOBS", "1")
    try:
        return max(1, int(v))
    except ValueError:
        return 1


def build_parser():
    ap = argparse.ArgumentParser(prog="grainforge", description="Grain-boundary model lab.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, eps=1e-3):
        p.add_argument("--eps", type=float, default=eps)
        p.add_argument("--tau", type=float, default=1.0)
        p.add_argument("--lam", type=float, default=1.0)
        p.add_argument("--out", default=".")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("construct", help="build a wall construction and check its Burgers vectors")
    p.add_argument("kind", choices=["c2c", "r2c", "r2r"])
    for k in ("theta", "alpha", "eta", "eta-t", "mu", "mu-t", "beta", "l", "h", "r", "rho"):
        p.add_argument(f"--{k}", type=float, default=None)
    p.add_argument("--raster", type=float, default=None, help="also write a grid with this spacing")
    p.add_argument("--raster-mode", choices=["center", "segment"], default="segment")
    common(p)
    p.set_defaults(func=cmd_construct)

    p = sub.add_parser("rs-curve", help="energy per length of the wall along an alpha sweep")
    p.add_argument("--theta", type=float, default=float(np.pi / 4))
    p.add_argument("--alphas", default=None, help="comma-separated list")
    p.add_argument("--alpha-min", type=float, default=0.005)
    p.add_argument("--alpha-max", type=float, default=0.2)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--rtol", type=float, default=1e-8)
    p.add_argument("--jobs", type=int, default=_jobs_default())
    common(p)
    p.set_defaults(func=cmd_rs_curve)

    p = sub.add_parser("psi", help="cell-problem estimates along a list of box sizes")
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--L", default="16,32,64")
    p.add_argument("--h", type=float, default=0.25)
    p.add_argument("--max-iter", type=int, default=2000)
    common(p, eps=1.0)
    p.set_defaults(func=cmd_psi)

    p = sub.add_parser("clearout", help="splice a grid field to an exact rotation")
    p.add_argument("--field", required=True)
    p.add_argument("--defects", default=None)
    p.add_argument("--band", default=None, help="x_min,x_max,y_min,y_max")
    p.add_argument("--R", type=float, required=True, help="rotation angle")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--omega", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_clearout)

    p = sub.add_parser("regularize", help="truncate, mollify and harmonically replace a grid field")
    p.add_argument("--field", required=True)
    p.add_argument("--defects", default=None)
    common(p)
    p.set_defaults(func=cmd_regularize)

    p = sub.add_parser("f0", help="evaluate the limit energy of a polygonal partition")
    p.add_argument("--partition", required=True)
    p.add_argument("--phi", default=None, help="CSV table theta,alpha,value")
    p.add_argument("--recovery-eps", type=float, default=None)
    p.add_argument("--delta", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_f0)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        os.makedirs(args.out, exist_ok=True)
        return args.func(args)
    except (UsageError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"grainforge: error: {e}", file=sys.stderr)
        return 2
    except (NumericalError, OSError) as e:
        print(f"grainforge: failed: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
