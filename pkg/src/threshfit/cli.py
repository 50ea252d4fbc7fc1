"""Command line front end.

Every command writes its tables plus a ``manifest.txt`` into ``--out``.
Exit codes: 0 success, 1 usage error, 2 data error, 3 every pair failed.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from ._seeding import FINAL, derive_seed
from .distributions import chi2_cdf, chi2_gof
from .errors import DomainError, EstimationError, InsufficientDataError
from .formats import (
    HISTFIT_SCHEMA,
    RESULT_SCHEMA,
    SUMMARY_SCHEMA,
    MatchFile,
    MatchFileError,
    MatchPair,
    load_matches,
    save_matches,
    write_manifest,
    write_table,
)
from .geometry import ModelKind, minimal_sample_size, sampson_signed_batch, sampson_sq
from .ransac import msac
from .scale import ScaleConfig, median_sigma, simfitpp, simfitpp_multi, tau_corrected_sigma
from .synthetic import METHODS, generate_scene, scene_suite, sweep_benchmark

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAILED = 0, 1, 2, 3
DEFAULT_GRID = (0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0)
_defaults = ScaleConfig()


MULTI_SCHEMA = "threshfit.multi/1"


@dataclass
class MultiSummary:
    pairs: int
    pairs_visited: int
    pairs_accepted: int
    tau_star: float | None
    sigma_hat: float | None
    converged: bool


@dataclass
class HistBin:
    # bin edges in units of sigma^2
    z_lo: float
    z_hi: float
    count: int
    density: float
    chi2_density: float


@dataclass
class HistFit:
    n: int
    sigma_hat: float
    tau: float | None
    ks_pvalue: float
    ks_pass_0_01: bool


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _confidence(text):
    if text.lower() == "none":
        return None
    return float(text)


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma separated list of numbers: {text!r}")


def _method_list(text):
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in METHODS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"methods must be drawn from {', '.join(METHODS)}")
    return names


def _scale_flags(p):
    g = p.add_argument_group("threshold estimation")
    g.add_argument("--tau0", type=float, default=_defaults.tau0)
    g.add_argument("--alpha", type=float, default=_defaults.alpha)
    g.add_argument("--tau-min", type=float, default=_defaults.tau_min)
    g.add_argument("--tau-max", type=float, default=_defaults.tau_max)
    g.add_argument("--p-train", type=float, default=_defaults.p_train)
    g.add_argument("--ftol", type=float, default=_defaults.ftol)
    g.add_argument("--max-iters", type=int, default=_defaults.max_outer_iters,
                   help="outer threshold/model alternations")
    g.add_argument("--fixedpoint-iters", type=int, default=_defaults.fixedpoint_iters)
    g.add_argument("--ransac-iters", type=int, default=_defaults.ransac_iterations)
    g.add_argument("--refit-rounds", type=int, default=_defaults.refit_rounds)
    g.add_argument("--confidence", type=_confidence, default=_defaults.confidence,
                   help="MSAC early-stop confidence, or 'none' for the full budget")
    g.add_argument("--model", choices=["F", "E"], default="F")
    g.add_argument("--seed", type=int, default=0)


def _common(p, matches=True):
    if matches:
        p.add_argument("matches", help="match file (JSON lines)")
        mode = p.add_mutually_exclusive_group()
        mode.add_argument("--strict", action="store_true",
                          help="abort on the first invalid pair")
        mode.add_argument("--lenient", dest="strict", action="store_false",
                          help="drop invalid pairs and continue (default)")
    p.add_argument("--out", required=True, help="output directory")
    _scale_flags(p)


def build_parser():
    parser = _Parser(prog="threshfit",
                     description="Self-tuning inlier thresholds for two-view geometry.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="estimate a threshold and model per pair")
    _common(p)
    p.add_argument("--method", choices=METHODS, default="simfitpp")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--record-timing", action="store_true")

    p = sub.add_parser("multi", help="one dataset-level threshold over all pairs")
    _common(p)

    for name, hlp in (("sweep", "benchmark methods over a tau0 grid on a match file"),
                      ("synthbench", "benchmark methods on generated scenes")):
        p = sub.add_parser(name, help=hlp)
        _common(p, matches=name == "sweep")
        p.add_argument("--methods", type=_method_list, default=list(METHODS))
        p.add_argument("--tau0-grid", type=_float_list, default=list(DEFAULT_GRID))
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--record-timing", action="store_true")
        # benchmarks run the full MSAC budget
        p.set_defaults(confidence=None)
        if name == "synthbench":
            _scene_flags(p, scenes=200, outliers=0.3)
            p.add_argument("--dump-matches", metavar="PATH",
                           help="also save the generated scenes as a match file")

    p = sub.add_parser("histfit", help="squared residual histogram and chi2(1) fit")
    p.add_argument("--matches", help="match file; omit for a synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=40)
    _scene_flags(p, scenes=1, outliers=0.0, points=10000)
    _scale_flags(p)
    return parser


def _scene_flags(p, scenes, outliers, points=500):
    g = p.add_argument_group("synthetic scenes")
    g.add_argument("--scenes", type=int, default=scenes)
    g.add_argument("--sigma", type=float, default=1.0, help="pixel noise std")
    g.add_argument("--n-points", type=int, default=points)
    g.add_argument("--outlier-fraction", type=float, default=outliers)


def _config(args):
    try:
        return ScaleConfig(
            tau0=args.tau0, alpha=args.alpha, tau_min=args.tau_min, tau_max=args.tau_max,
            p_train=args.p_train, ftol=args.ftol, max_outer_iters=args.max_iters,
            fixedpoint_iters=args.fixedpoint_iters, seed=args.seed, model_kind=args.model,
            ransac_iterations=args.ransac_iters, confidence=args.confidence,
            refit_rounds=args.refit_rounds,
        )
    except (DomainError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _manifest(args, config, extra=None):
    items = {"command": args.command, "version": __version__}
    for f in fields(config):
        v = getattr(config, f.name)
        items[f"config.{f.name}"] = v.value if isinstance(v, ModelKind) else v
    items.update(extra or {})
    return items


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load(args, config):
    try:
        mf = load_matches(args.matches, strict=args.strict)
    except OSError as exc:
        raise DataError(f"cannot read {args.matches}: {exc.strerror}") from None
    except MatchFileError as exc:
        raise DataError(str(exc)) from None
    s = minimal_sample_size(config.model_kind)
    kept = []
    rejected = list(mf.rejected)
    for pair in mf.pairs:
        reason = None
        if len(pair.matches) < s:
            reason = f"{len(pair.matches)} matches, below the minimal sample size {s}"
        elif config.model_kind is ModelKind.ESSENTIAL and not pair.matches.calibrated:
            reason = "essential estimation needs K_a and K_b"
        if reason is None:
            kept.append(pair)
            continue
        if args.strict:
            raise DataError(f"pair {pair.id!r}: {reason}")
        rejected.append((pair.id, f"pair {pair.id!r}: {reason}"))
    for _, msg in rejected:
        print(f"threshfit: skipped {msg}", file=sys.stderr)
    if not kept:
        raise DataError(f"{args.matches}: no usable pairs")
    return MatchFile(kept, rejected), _sha256(args.matches)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _status(rows):
    if rows and all(r.error is not None for r in rows):
        print("threshfit: estimation failed for every pair", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def _grid_params(args):
    return {"methods": ",".join(args.methods),
            "tau0_grid": ",".join(repr(t) for t in args.tau0_grid),
            "workers": args.workers, "record_timing": args.record_timing}


def cmd_estimate(args):
    config = _config(args)
    mf, digest = _load(args, config)
    out = _out_dir(args)
    res = sweep_benchmark(mf.pairs, [config.tau0], [args.method], config, seed=config.seed,
                          workers=args.workers, record_timing=args.record_timing)
    write_table(res.rows, out / "results.csv", RESULT_SCHEMA)
    write_manifest(_manifest(args, config, {
        "input": args.matches, "input_sha256": digest, "method": args.method,
        "pairs": len(mf), "rejected_pairs": len(mf.rejected), "strict": args.strict,
        "workers": args.workers, "record_timing": args.record_timing,
        "outputs": "results.csv"}), out / "manifest.txt")
    return _status(res.rows)


def cmd_multi(args):
    config = _config(args)
    mf, digest = _load(args, config)
    out = _out_dir(args)
    status = EXIT_OK
    try:
        est = simfitpp_multi([p.matches for p in mf.pairs], config)
        row = MultiSummary(len(mf), est.outer_iters, len(est.accepted_estimates),
                      est.tau_star, est.sigma_hat, est.converged)
        if not est.accepted_estimates:
            status = EXIT_FAILED
    except (InsufficientDataError, EstimationError):
        row = MultiSummary(len(mf), len(mf), 0, None, None, False)
        status = EXIT_FAILED
    write_table([row], out / "multi.csv", MULTI_SCHEMA)
    write_manifest(_manifest(args, config, {
        "input": args.matches, "input_sha256": digest, "method": "simfitpp-multi",
        "pairs": len(mf), "rejected_pairs": len(mf.rejected), "strict": args.strict,
        "outputs": "multi.csv"}), out / "manifest.txt")
    if status == EXIT_FAILED:
        print("threshfit: no pair produced a threshold estimate", file=sys.stderr)
    return status


def _bench_outputs(args, config, res, out, extra):
    write_table(res.rows, out / "results.csv", RESULT_SCHEMA)
    write_table(res.cells, out / "summary.csv", SUMMARY_SCHEMA)
    params = _grid_params(args)
    params.update(extra)
    params["outputs"] = "results.csv,summary.csv"
    write_manifest(_manifest(args, config, params), out / "manifest.txt")
    return _status(res.rows)


def _check_grid(args, config):
    for t in args.tau0_grid:
        if not config.tau_min <= t <= config.tau_max:
            raise UsageError(f"tau0 {t} outside [{config.tau_min}, {config.tau_max}]")


def cmd_sweep(args):
    config = _config(args)
    _check_grid(args, config)
    mf, digest = _load(args, config)
    out = _out_dir(args)
    res = sweep_benchmark(mf.pairs, args.tau0_grid, args.methods, config, seed=config.seed,
                          workers=args.workers, record_timing=args.record_timing)
    return _bench_outputs(args, config, res, out, {
        "input": args.matches, "input_sha256": digest, "pairs": len(mf),
        "rejected_pairs": len(mf.rejected), "strict": args.strict})


def _specs(args):
    try:
        return scene_suite(args.scenes, args.seed, sigma=args.sigma, n_points=args.n_points,
                           outlier_fraction=args.outlier_fraction)
    except (DomainError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _scene_params(args):
    return {"scenes": args.scenes, "sigma": args.sigma, "n_points": args.n_points,
            "outlier_fraction": args.outlier_fraction}


def cmd_synthbench(args):
    config = _config(args)
    _check_grid(args, config)
    specs = _specs(args)
    out = _out_dir(args)
    scenes = [generate_scene(s) for s in specs]
    pairs = [MatchPair(f"scene{i:04d}", sc.matches, sc.gt_pose) for i, sc in enumerate(scenes)]
    if args.dump_matches:
        save_matches(MatchFile(pairs), args.dump_matches)
    res = sweep_benchmark(pairs, args.tau0_grid, args.methods, config, seed=config.seed,
                          workers=args.workers, record_timing=args.record_timing)
    return _bench_outputs(args, config, res, out, _scene_params(args))


def cmd_histfit(args):
    config = _config(args)
    if args.bins < 1:
        raise UsageError("--bins must be >= 1")
    params = {"bins": args.bins}
    if args.matches is None:
        r2, sigma, tau = _synthetic_residuals(args)
        params.update(_scene_params(args))
    else:
        args.strict = False
        mf, digest = _load(args, config)
        r2, sigma, tau = _file_residuals(mf, config)
        params.update(input=args.matches, input_sha256=digest, pairs=len(mf))
    if len(r2) == 0:
        print("threshfit: no residuals to fit", file=sys.stderr)
        return EXIT_FAILED
    out = _out_dir(args)
    try:
        p = chi2_gof(r2, sigma, tau)
    except InsufficientDataError as exc:
        raise DataError(str(exc)) from None
    z = r2 / sigma**2
    hi = tau**2 / sigma**2 if tau is not None else float(np.quantile(z, 0.995))
    # the untruncated tail beyond the top edge is left out of the bins
    counts, edges = np.histogram(z, bins=args.bins, range=(0.0, hi))
    mass = float(chi2_cdf(hi)) if tau is not None else 1.0
    rows = []
    for k in range(args.bins):
        lo, up = float(edges[k]), float(edges[k + 1])
        expected = (float(chi2_cdf(up)) - float(chi2_cdf(lo))) / mass * len(z)
        width = up - lo
        rows.append(HistBin(lo, up, int(counts[k]), float(counts[k]) / (len(z) * width),
                            expected / (len(z) * width)))
    write_table(rows, out / "histfit_bins.csv", HISTFIT_SCHEMA)
    write_table([HistFit(len(z), sigma, tau, p, p > 0.01)], out / "histfit_fit.csv",
                HISTFIT_SCHEMA)
    params["outputs"] = "histfit_bins.csv,histfit_fit.csv"
    write_manifest(_manifest(args, config, params), out / "manifest.txt")
    return EXIT_OK


def _synthetic_residuals(args):
    """Inlier residuals against the true model; sigma from the median estimator."""
    r2 = []
    for spec in _specs(args):
        sc = generate_scene(spec)
        F = sc.gt_fundamental.matrix
        m = sc.matches.subset(sc.inlier_labels)
        r2.append(sampson_signed_batch(F, m.pts_a, m.pts_b) ** 2)
    r2 = np.concatenate(r2)
    return r2, median_sigma(r2), None


def _file_residuals(mf, config):
    """Residuals under each pair's SIMFIT++ model, truncated at its threshold.

    Scale is re-estimated with the truncation-aware estimator on the pooled,
    per-pair normalised residuals (``r^2 / tau^2``, rescaled to tau = 1).
    """
    pooled = []
    for i, pair in enumerate(mf.pairs):
        try:
            est = simfitpp(pair.matches, config)
            res = msac(pair.matches, config.ransac(est.tau_star, derive_seed(config.seed, FINAL, i)))
        except (InsufficientDataError, EstimationError):
            continue
        r2 = sampson_sq(res.model, pair.matches)
        pooled.append(r2[r2 <= est.tau_star**2] / est.tau_star**2)
    if not pooled:
        return np.empty(0), 1.0, 1.0
    z = np.concatenate(pooled)
    cs = tau_corrected_sigma(z, 1.0, max_iter=config.fixedpoint_iters)
    return z, cs.sigma, 1.0


_COMMANDS = {
    "estimate": cmd_estimate,
    "multi": cmd_multi,
    "sweep": cmd_sweep,
    "synthbench": cmd_synthbench,
    "histfit": cmd_histfit,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"threshfit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"threshfit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
