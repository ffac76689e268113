"""Command-line front end: ``tvcs {phantom,solve,analyze,sweep,compare,replay}``.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import IntersectionError, observed_rate, rate_report, verify_fixed_point
from .bundle import BundleError, file_sha256, load_problem, save_problem, save_state
from .problems import MaskError, make_problem, piecewise_constant, shepp_logan
from .solvers import (
    METHODS,
    NumericalError,
    SolverConfig,
    initial_state,
    reference_solution,
    run,
    step,
    translate_state,
)

log = logging.getLogger("tvcs")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(ValueError):
    pass


@dataclass
class RunManifest:
    """Everything needed to replay a command and check its outputs."""

    command: str
    argv: list
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    version: str = __version__
    python: str = platform.python_version()
    numpy: str = np.__version__

    def write(self, out_dir):
        for p in list(self.outputs):
            self.outputs[p] = file_sha256(p)
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2))
        return path


def _gamma_to_tau(args):
    if args.gamma is None or not args.gamma > 0:
        raise UsageError("--gamma must be a positive number")
    return 1.0 / args.gamma


def _config(args, method=None, **over):
    try:
        return SolverConfig(
            method=method or args.method,
            tau=over.get("tau", _gamma_to_tau(args)),
            relax=over.get("relax", args.relax),
            alpha=over.get("alpha", args.alpha),
            max_iters=args.iters,
            tol=args.tol,
            precision=over.get("precision", args.precision),
            log_every=args.log_every,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -----------------------------------------------------------------


def cmd_phantom(args):
    shape = tuple(args.shape)
    if not 1 <= len(shape) <= 3:
        raise UsageError(f"--shape takes 1 to 3 sizes, got {len(shape)}")
    if args.kind == "shepp-logan":
        if len(shape) not in (2, 3):
            raise UsageError("Shepp-Logan phantoms are 2D or 3D")
        ph = shepp_logan(shape)
    else:
        if len(shape) != 1:
            raise UsageError("piecewise-constant phantoms are 1D")
        ph = piecewise_constant(shape[0], args.jumps, seed=args.seed)
    try:
        prob = make_problem(ph.image, args.fraction, seed=args.seed, symmetric=not args.unsymmetric)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args)
    path = out / (args.name or "problem.tvcs")
    meta = {"phantom": ph.name, "phantom_params": ph.params}
    save_problem(path, prob, meta)
    m = RunManifest("phantom", args.argv, {"shape": list(shape), "fraction": args.fraction,
                    "kind": args.kind, "symmetric": not args.unsymmetric},
                    {"mask": args.seed}, outputs={str(path): ""})
    m.write(out)
    print(f"wrote {path} (N={prob.mask.observed.size}, m={prob.mask.m})")
    return EXIT_OK


def cmd_solve(args):
    prob, b = load_problem(args.bundle)
    cfg = _config(args)
    out = _out_dir(args)
    q_ref = None
    if args.reference_iters:
        q_ref = reference_solution(prob, cfg.tau, max_iters=args.reference_iters).q
    t0 = time.perf_counter()
    res = run(prob, cfg, q_ref=q_ref, log_path=out / "log.csv", meta_path=out / "run.json",
              meta={"bundle": str(args.bundle), "seed": b.meta.get("seed")})
    state_path = save_state(out / "state.tvcs", res.state, {"tau": cfg.tau, "config": cfg.to_dict()})
    m = RunManifest("solve", args.argv, cfg.to_dict(), {"mask": b.meta.get("seed")},
                    inputs={str(args.bundle): file_sha256(args.bundle)},
                    outputs={str(out / "log.csv"): "", str(out / "run.json"): "", str(state_path): ""},
                    timings={"seconds": time.perf_counter() - t0})
    m.write(out)
    last = res.log.records[-1]
    print(f"{cfg.method}: {res.status} after {res.iterations} iterations, "
          f"rel_err={last.rel_err:.3e}, tv={last.tv:.6g}")
    return EXIT_OK


def _trajectory_rate(prob, cfg, ref_iters):
    """Reference run for ``q*``, then a rerun logging ``||q_k - q*||``."""
    from dataclasses import replace

    ref_cfg = replace(cfg, method="drs", max_iters=ref_iters, tol=min(cfg.tol, 1e-15),
                      log_every=max(ref_iters, 1))
    ref = run(prob, ref_cfg).state
    res = run(prob, replace(cfg, max_iters=min(cfg.max_iters, ref.k), tol=0.0), q_ref=ref.q)
    fit = observed_rate(res.log.column("q_dist"), res.log.column("iter"))
    return ref, res, fit


def cmd_analyze(args):
    prob, b = load_problem(args.bundle)
    cfg = _config(args, method="drs")
    out = _out_dir(args)
    ref, res, fit = _trajectory_rate(prob, cfg, args.reference_iters)
    rep = rate_report(prob.mask, ref.q, ref.v, cfg.tau, cfg.relax,
                      errors=res.log.column("q_dist"), iters=res.log.column("iter"))
    cert = verify_fixed_point(ref.q, ref.v, cfg.tau, prob.mask, tol=args.cert_tol)
    (out / "rate_report.json").write_text(rep.to_json(indent=2))
    (out / "certificate.json").write_text(json.dumps(cert.to_dict(), indent=2))
    res.log.to_csv(out / "log.csv")
    m = RunManifest("analyze", args.argv, cfg.to_dict(), {"mask": b.meta.get("seed")},
                    inputs={str(args.bundle): file_sha256(args.bundle)},
                    outputs={str(out / "rate_report.json"): "", str(out / "certificate.json"): "",
                             str(out / "log.csv"): ""})
    m.write(out)
    for w in rep.warnings:
        log.warning(w)
    print(f"cos(theta1)={rep.cos_theta1:.6f} bound={rep.bound:.6f} observed={rep.observed_rate:.6f} "
          f"onset={rep.onset_K} {cert.classification} certificate={'pass' if cert.passed else 'FAIL'}")
    return EXIT_OK


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()] if text else []


def cmd_sweep(args):
    prob, b = load_problem(args.bundle)
    gammas = _floats(args.gammas)
    relaxes = _floats(args.relaxes) or [1.0]
    alphas = [None if a in ("none", "") else float(a) for a in args.alphas.split(",")] if args.alphas else [None]
    precisions = args.precisions.split(",") if args.precisions else ["f64"]
    grid = list(itertools.product(gammas, relaxes, alphas, precisions))
    if not gammas or not grid:
        raise UsageError("empty sweep grid")
    configs = []
    for g, lam, a, p in grid:
        try:
            configs.append(SolverConfig("drs", tau=1.0 / g, relax=lam, alpha=a, max_iters=args.iters,
                                        tol=args.tol, precision=p))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    out = _out_dir(args)
    rows, failures = [], 0
    for i, cfg in enumerate(configs):
        tag = f"g{1 / cfg.tau:g}_l{cfg.relax:g}_a{cfg.alpha}_{cfg.precision}"
        try:
            ref, res, fit = _trajectory_rate(prob, cfg, args.reference_iters)
            res.log.to_csv(out / f"log_{tag}.csv")
            rows.append({"gamma": 1 / cfg.tau, "tau": cfg.tau, "relax": cfg.relax, "alpha": cfg.alpha,
                         "precision": cfg.precision, "rate": fit.rate, "onset": fit.onset,
                         "found": fit.found, "status": "ok"})
        except NumericalError as exc:
            failures += 1
            log.error("sweep point %s failed: %s", tag, exc)
            rows.append({"gamma": 1 / cfg.tau, "tau": cfg.tau, "relax": cfg.relax, "alpha": cfg.alpha,
                         "precision": cfg.precision, "rate": float("nan"), "onset": -1,
                         "found": False, "status": f"failed: {exc}"})
    summary = out / "sweep.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    m = RunManifest("sweep", args.argv, {"grid": [c.to_dict() for c in configs]},
                    {"mask": b.meta.get("seed")}, inputs={str(args.bundle): file_sha256(args.bundle)},
                    outputs={str(summary): ""})
    m.write(out)
    for r in rows:
        print(f"gamma={r['gamma']:g} relax={r['relax']:g} alpha={r['alpha']} {r['precision']}: "
              f"rate={r['rate']:.6f} onset={r['onset']} {r['status']}")
    return EXIT_NUMERIC if failures == len(rows) else EXIT_OK


def cmd_compare(args):
    """Run ADMM, DRS and PDHG side by side and check the variable translations."""
    prob, b = load_problem(args.bundle)
    tau = _gamma_to_tau(args)
    cfgs = {m: _config(args, method=m, relax=1.0, alpha=None) for m in METHODS}
    states = {m: initial_state(m, prob.mask, tau, precision=args.precision) for m in METHODS}
    out = _out_dir(args)
    path = out / "compare.csv"
    worst = 0.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "admm_vs_drs", "pdhg_vs_drs"])
        for _ in range(args.iters):
            states = {m: step(s, prob.mask, cfgs[m]) for m, s in states.items()}
            d = states["drs"]
            scale = max(float(np.linalg.norm(d.q)), 1e-300)
            errs = []
            for m in ("admm", "pdhg"):
                t = translate_state(states[m], "drs", tau, prob.mask)
                errs.append(max(float(np.linalg.norm(getattr(t, f) - getattr(d, f)))
                                for f in ("q", "v", "q_prev", "v_prev")) / scale)
            worst = max(worst, *errs)
            w.writerow([d.k, repr(errs[0]), repr(errs[1])])
            fh.flush()
    m = RunManifest("compare", args.argv, {"tau": tau, "iters": args.iters,
                    "precision": args.precision}, {"mask": b.meta.get("seed")},
                    inputs={str(args.bundle): file_sha256(args.bundle)}, outputs={str(path): ""})
    m.write(out)
    print(f"max relative translation discrepancy over {args.iters} iterations: {worst:.3e}")
    return EXIT_OK if worst <= args.agree_tol else EXIT_NUMERIC


def cmd_replay(args):
    """Re-run the command recorded in a manifest and compare output hashes."""
    man = json.loads(Path(args.manifest).read_text())
    code = main(man["argv"])
    if code != EXIT_OK:
        return code
    bad = [p for p, h in man["outputs"].items()
           if Path(p).suffix != ".json" and file_sha256(p) != h]
    timing_free = [p for p in bad if not p.endswith("log.csv")]
    if timing_free:
        print("replay mismatch: " + ", ".join(timing_free))
        return EXIT_NUMERIC
    print("replay reproduced all outputs" + (" (log timings differ)" if bad else ""))
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _solver_flags(p, method=True):
    if method:
        p.add_argument("--method", choices=METHODS, default="pdhg")
    p.add_argument("--gamma", type=float, default=100.0, help="step gamma = sigma = 1/tau")
    p.add_argument("--relax", type=float, default=1.0, help="DRS relaxation in (0, 2)")
    p.add_argument("--alpha", type=float, default=None, help="l2 weight of the regularized problem (DRS)")
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--log-every", type=int, default=1)


def build_parser():
    ap = argparse.ArgumentParser(prog="tvcs", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom, a random mask and its measurements")
    p.add_argument("--shape", type=int, nargs="+", required=True)
    p.add_argument("--kind", choices=("shepp-logan", "piecewise"), default="shepp-logan")
    p.add_argument("--jumps", type=int, default=4, help="jumps of the 1D piecewise phantom")
    p.add_argument("--fraction", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unsymmetric", action="store_true", help="sample frequencies without conjugate pairing")
    p.add_argument("--name", default=None)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("solve", help="run one solver and write log, state and manifest")
    p.add_argument("bundle")
    _solver_flags(p)
    p.add_argument("--reference-iters", type=int, default=0,
                   help="first compute q* with this many DRS iterations to log ||q_k - q*||")
    p.add_argument("--seed", type=int, default=None, help="recorded only; runs are deterministic")
    p.add_argument("--out-dir", default="run")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("analyze", help="rate report and dual-certificate checks")
    p.add_argument("bundle")
    _solver_flags(p, method=False)
    p.add_argument("--reference-iters", type=int, default=10000)
    p.add_argument("--cert-tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="analysis")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="observed rates over a parameter grid")
    p.add_argument("bundle")
    p.add_argument("--gammas", required=True, help="comma separated")
    p.add_argument("--relaxes", default="1")
    p.add_argument("--alphas", default="none")
    p.add_argument("--precisions", default="f64")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--reference-iters", type=int, default=10000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="run all three methods and check their equivalence")
    p.add_argument("bundle")
    _solver_flags(p, method=False)
    p.add_argument("--agree-tol", type=float, default=1e-9)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="compare")
    p.set_defaults(func=cmd_compare, iters=100)

    p = sub.add_parser("replay", help="re-run a manifest and verify its outputs")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, IntersectionError, MaskError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BundleError, OSError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
