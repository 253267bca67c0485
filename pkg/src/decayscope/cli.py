"""``decayscope`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every artifact is
written next to a JSON manifest recording inputs, configuration and
library versions; result tables themselves carry no timestamps, so reruns
with the same configuration reproduce them byte for byte.
"""

import argparse
import datetime
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .boundary import estimate_boundary
from .errors import DecayScopeError
from .geo import SourceSet, destination_point, read_sources_csv, write_sources_csv
from .ingest import FilterConfig, read_sample, stream_ingest, summarize, write_sample
from .inference import (
    BootstrapConfig,
    HacConfig,
    bootstrap_boundary_ci,
    hac_for_fit,
    plug_in_ci,
    specification_test,
)
from .boundary import SpatialBoundaryEstimator
from .kernels import Bandwidth, fit_decay_curve, resolve_bandwidth
from .metrics import DEFAULT_BIN_CENTERS, DEFAULT_HALF_WIDTH, compare_methods, period_summary
from .parametric import fit_exponential
from .synth import (
    Exponential,
    QuadraticExponent,
    SyntheticSpec,
    TwoRegime,
    apply_noise,
    draw_distances,
    random_sources,
    standard_errors,
    write_observations_csv,
)


class UsageError(Exception):
    """Bad flag values detected after parsing; reported with exit code 2."""


def _epsilon(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"epsilon must lie in (0, 1), got {v}")
    return v


def _alpha(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"alpha must lie in (0, 1), got {v}")
    return v


def _positive(kind):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a valid {kind.__name__}: {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def _float_list(text):
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from None


def _str_list(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _grid(text):
    vals = _float_list(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("grid must be d_min,d_max,G")
    return vals[0], vals[1], int(vals[2])


def _bandwidth(text):
    if text in ("silverman", "cv"):
        return text
    try:
        return _positive(float)(text)
    except argparse.ArgumentTypeError:
        raise argparse.ArgumentTypeError("bandwidth must be 'silverman', 'cv' or a positive km value") from None


# ---------------------------------------------------------------- parser


def _data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--sample", help="binary sample written by 'ingest'")
    g.add_argument("--obs", help="observation CSV (lat,lon,period,group,outcome)")
    g.add_argument("--sources", help="source CSV (id,lat,lon); required with --obs")
    g.add_argument("--max-km", type=_positive(float), default=100.0)
    g.add_argument("--groups", type=_str_list, default=None)
    g.add_argument("--periods", type=_str_list, default=None)
    g.add_argument("--min-outcome", type=float, default=None)
    g.add_argument("--chunk-rows", type=_positive(int), default=5_000_000)
    g.add_argument("--max-rejects", type=int, default=None)


def _curve_args(p):
    g = p.add_argument_group("curve")
    g.add_argument("--kernel", choices=("epanechnikov", "gaussian", "uniform"),
                   default="epanechnikov")
    g.add_argument("--bandwidth", type=_bandwidth, default="silverman")
    g.add_argument("--order", type=int, choices=(0, 1, 2), default=1)
    g.add_argument("--grid", type=_grid, default=None, help="d_min,d_max,G")
    g.add_argument("--cv-folds", type=int, default=5)


def _boot_args(p, default_b=50):
    g = p.add_argument_group("resampling")
    g.add_argument("--boot-b", type=_positive(int), default=default_b)
    g.add_argument("--boot-nb", type=_positive(int), default=50_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--alpha", type=_alpha, default=0.05)
    g.add_argument("--allow-small-b", action="store_true")


def _common(p):
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--threads", type=_positive(int), default=os.cpu_count() or 1)


def build_parser():
    parser = argparse.ArgumentParser(prog="decayscope",
                                     description="Spatial decay curves and boundaries.")
    parser.add_argument("--version", action="version", version=f"decayscope {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="stream observations into a distanced sample")
    _data_args(p)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("fit", help="fit the nonparametric curve and the exponential baseline")
    _data_args(p)
    _curve_args(p)
    p.add_argument("--fixed-effects", action="store_true", help="group fixed effects")
    p.add_argument("--hac", action="store_true", help="spatial HAC SE (needs --obs)")
    p.add_argument("--hac-bw-km", type=_positive(float), default=50.0)
    p.add_argument("--out-dir", default=".")
    _common(p)

    p = sub.add_parser("boundary", help="boundary estimates with confidence intervals")
    _data_args(p)
    _curve_args(p)
    p.add_argument("--epsilon", type=_epsilon, nargs="+", default=[0.5])
    p.add_argument("--ci", choices=("none", "plug-in", "bootstrap"), default="plug-in")
    p.add_argument("--grid-rule", action="store_true", help="report the grid point, no interpolation")
    _boot_args(p)
    p.add_argument("--out-dir", default=".")
    _common(p)

    p = sub.add_parser("compare", help="per-bin MAE of parametric vs nonparametric")
    _data_args(p)
    _curve_args(p)
    p.add_argument("--bins", type=_float_list, default=list(DEFAULT_BIN_CENTERS))
    p.add_argument("--half-width", type=_positive(float), default=DEFAULT_HALF_WIDTH)
    p.add_argument("--weighted", action="store_true", help="observation-weighted overall MAE")
    p.add_argument("--out-dir", default=".")
    _common(p)

    p = sub.add_parser("spec-test", help="test the exponential form")
    _data_args(p)
    _curve_args(p)
    _boot_args(p, default_b=199)
    p.add_argument("--fixed-effects", action="store_true")
    p.add_argument("--out-dir", default=".")
    _common(p)

    p = sub.add_parser("simulate", help="write a synthetic observation file")
    p.add_argument("--form", choices=("exponential", "quadratic", "two-regime"),
                   default="exponential")
    p.add_argument("--A", type=_positive(float), default=2.28)
    p.add_argument("--kappa", type=float, default=0.00701)
    p.add_argument("--a", type=float, default=0.0075)
    p.add_argument("--b", type=float, default=0.00002)
    p.add_argument("--kappa-near", type=float, default=0.00685)
    p.add_argument("--kappa-far", type=float, default=-0.00042)
    p.add_argument("--break-km", type=_positive(float), default=100.0)
    p.add_argument("--n", type=_positive(int), default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sd", type=float, default=0.2)
    p.add_argument("--noise", choices=("gaussian", "student_t", "lognormal"), default="gaussian")
    p.add_argument("--distance-law", choices=("uniform", "ring"), default="uniform")
    p.add_argument("--d-max", type=_positive(float), default=100.0)
    p.add_argument("--n-sources", type=_positive(int), default=1)
    p.add_argument("--source-lat", type=float, default=39.0)
    p.add_argument("--source-lon", type=float, default=-80.0)
    p.add_argument("--period", default="sim")
    p.add_argument("--out", required=True)
    p.add_argument("--sources-out", default=None,
                   help="source CSV path (default: <out stem>.sources.csv)")
    _common(p)
    return parser


def read_config(path):
    """``key = value`` lines; ``#`` comments and blank lines ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (t.strip() for t in line.split("=", 1))
            out[key.replace("-", "_")] = value.strip("\"'")
    return out


def _apply_config(parser, argv):
    """Parse ``argv``, filling unset options from ``--config`` when given."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    try:
        values = read_config(args.config)
    except OSError as exc:
        raise FileNotFoundError(f"config file not found: {args.config}") from exc
    injected = []
    for key, value in values.items():
        if key not in actions or key in ("help", "config"):
            parser.error(f"unknown config key {key!r} for '{args.command}'")
        act = actions[key]
        flag = act.option_strings[-1]
        if act.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                injected.append(flag)
        elif act.nargs == "+":
            injected += [flag, *value.split()]
        else:
            injected += [flag, value]
    # config first so explicit flags (later on the command line) win
    return parser.parse_args([args.command, *injected, *argv[1:]])


# ---------------------------------------------------------------- helpers


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _versions():
    import scipy
    import sklearn

    return {"decayscope": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "python": platform.python_version()}


def _config_dict(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("threads",)}


def write_manifest(path, args, inputs, outputs, extra=None):
    cfg = _config_dict(args)
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    manifest = {
        "command": args.command,
        "inputs": {str(p): _sha256(p) for p in inputs if p},
        "outputs": [str(p) for p in outputs],
        "config": cfg,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "versions": _versions(),
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    _dump_json(path, manifest)


def _dump_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    return str(o)


def _require_file(path, flag):
    if path is None:
        raise UsageError(f"{flag} is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"file not found: {path}")
    return path


def _load_sample(args):
    """DistancedSample from --sample or --obs/--sources, plus the input paths."""
    if args.sample and args.obs:
        raise UsageError("give either --sample or --obs, not both")
    if args.sample:
        _require_file(args.sample, "--sample")
        return read_sample(args.sample, d_max=args.max_km), [args.sample]
    if not args.obs:
        raise UsageError("one of --sample or --obs is required")
    _require_file(args.obs, "--obs")
    _require_file(args.sources, "--sources")
    sources = read_sources_csv(args.sources)
    flt = FilterConfig(max_distance_km=args.max_km,
                       allowed_groups=set(args.groups) if args.groups else None,
                       allowed_periods=set(args.periods) if args.periods else None,
                       min_outcome=args.min_outcome)
    sample = stream_ingest(args.obs, sources, flt, chunk_rows=args.chunk_rows,
                           max_rejects=args.max_rejects, n_workers=args.threads)
    return sample, [args.obs, args.sources]


def _curve(args, sample):
    bw = "cross_validation" if args.bandwidth == "cv" else args.bandwidth
    h = resolve_bandwidth(bw, sample.distances, sample.outcomes, args.kernel, args.order,
                          cv_folds=args.cv_folds, random_state=getattr(args, "seed", 0))
    grid = args.grid if args.grid is not None else None
    return fit_decay_curve(sample, grid, h, args.kernel, args.order)


def _out_dir(args):
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------- commands


def cmd_ingest(args):
    sample, inputs = _load_sample(args)
    write_sample(args.out, sample)
    summary = summarize(sample).to_dict()
    extra = {"audit": sample.audit.to_dict() if sample.audit else None, "summary": summary}
    if sample.periods is not None:
        extra["periods"] = period_summary(sample).to_dict()
    write_manifest(f"{args.out}.manifest.json", args, inputs, [args.out], extra)
    print(json.dumps({"n": sample.n, **summary}, sort_keys=True))
    return 0


def cmd_fit(args):
    sample, inputs = _load_sample(args)
    out = _out_dir(args)
    curve = _curve(args, sample)
    curve.write(out / "curve.csv", out / "curve.json")
    groups = True if args.fixed_effects else None
    fit = fit_exponential(sample, groups)
    record = fit.to_dict()
    if args.hac:
        if sample.lat is None:
            raise UsageError("--hac needs coordinates; use --obs/--sources input")
        res = hac_for_fit(sample, fit, HacConfig(bandwidth_km=args.hac_bw_km), groups)
        record = fit.to_dict()
        record["hac"] = res.to_dict()
    _dump_json(out / "exponential.json", record)
    outputs = [out / "curve.csv", out / "curve.json", out / "exponential.json"]
    write_manifest(out / "manifest.json", args, inputs, outputs)
    print(json.dumps({"h": curve.h.h, "n": curve.n, "kappa": fit.kappa, "A": fit.A},
                     sort_keys=True))
    return 0


def cmd_boundary(args):
    sample, inputs = _load_sample(args)
    out = _out_dir(args)
    curve = _curve(args, sample)
    interpolate = not args.grid_rule
    records = []
    for eps in args.epsilon:
        est = estimate_boundary(curve, eps, interpolate)
        if est.found and args.ci == "plug-in":
            try:
                r = plug_in_ci(curve, est, args.alpha)
            except DecayScopeError as exc:
                est.ci_method = f"unavailable: {exc}"
            else:
                est.ci, est.ci_method = (r.lo, r.hi), "plug-in"
                v = r.variance
                rec = est.to_dict()
                rec["plug_in"] = {"bias": v.bias, "V": v.V, "V_source": v.V_source,
                                  "se_known_threshold": v.se, "se": v.se_total,
                                  "source_term": r.source_term}
                records.append(rec)
                continue
        elif args.ci == "bootstrap":
            boot = BootstrapConfig(B=args.boot_b, n_b=args.boot_nb, seed=args.seed,
                                   alpha=args.alpha, allow_small_B=args.allow_small_b)
            estimator = SpatialBoundaryEstimator(
                epsilon=eps, kernel=args.kernel,
                bandwidth="silverman" if args.bandwidth == "silverman" else curve.h.h,
                order=args.order, grid=curve.grid, interpolate=interpolate)
            res = bootstrap_boundary_ci(sample, estimator, boot, n_jobs=args.threads)
            est.ci, est.ci_method = (res.lo, res.hi), "bootstrap"
            rec = est.to_dict()
            rec["bootstrap"] = {k: v for k, v in res.to_dict().items() if k != "replicates"}
            records.append(rec)
            continue
        records.append(est.to_dict())
    result = {"h": curve.h.h, "n": curve.n, "kernel": curve.kernel.family, "boundaries": records}
    _dump_json(out / "boundary.json", result)
    write_manifest(out / "manifest.json", args, inputs, [out / "boundary.json"])
    print(json.dumps(result, sort_keys=True, default=_json_default))
    return 0


def cmd_compare(args):
    sample, inputs = _load_sample(args)
    out = _out_dir(args)
    curve = _curve(args, sample)
    fit = fit_exponential(sample)
    report = compare_methods(sample, fit, curve, args.bins, args.half_width, args.weighted)
    report.to_csv(out / "comparison.csv")
    report.to_json(out / "comparison.json")
    write_manifest(out / "manifest.json", args, inputs,
                   [out / "comparison.csv", out / "comparison.json"])
    print(json.dumps(report.overall, sort_keys=True))
    return 0


def cmd_spec_test(args):
    sample, inputs = _load_sample(args)
    out = _out_dir(args)
    h = None
    if args.bandwidth not in ("silverman", "cv"):
        h = args.bandwidth
    elif args.bandwidth == "cv":
        h = _curve(args, sample).h
    boot = BootstrapConfig(B=args.boot_b, n_b=max(args.boot_nb, 100), seed=args.seed,
                           alpha=args.alpha, allow_small_B=args.allow_small_b)
    res = specification_test(sample, args.grid, h, args.kernel, args.order, boot,
                             True if args.fixed_effects else None)
    _dump_json(out / "spec_test.json", res.to_dict())
    write_manifest(out / "manifest.json", args, inputs, [out / "spec_test.json"])
    print(json.dumps(res.to_dict(), sort_keys=True))
    return 0


def _form(args):
    if args.form == "exponential":
        return Exponential(args.A, args.kappa)
    if args.form == "quadratic":
        return QuadraticExponent(args.A, args.a, args.b)
    return TwoRegime(args.A, args.kappa_near, args.kappa_far, args.break_km)


def cmd_simulate(args):
    if args.noise_sd < 0:
        raise UsageError("--noise-sd must be non-negative")
    spec = SyntheticSpec(_form(args), args.noise_sd, args.n, args.seed, args.d_max,
                         args.distance_law, args.noise)
    rng = np.random.default_rng(args.seed)
    if args.n_sources == 1:
        sources = SourceSet(["s0"], [args.source_lat], [args.source_lon])
    else:
        sources = random_sources(args.n_sources, (args.source_lat - 3, args.source_lat + 3),
                                 (args.source_lon - 4, args.source_lon + 4), seed=args.seed)
    d = draw_distances(spec, rng)
    k = rng.integers(0, len(sources), args.n)
    bearing = rng.uniform(0.0, 360.0, args.n)
    lat, lon = destination_point(sources.lat[k], sources.lon[k], bearing, d)
    # with several sites a point may sit nearer another one; outcomes follow the nearest
    dist = sources.nearest(lat, lon)[0]
    y = apply_noise(spec, spec.form(dist), standard_errors(spec, rng, args.n))
    write_observations_csv(args.out, lat, lon, y, periods=args.period)
    src_out = args.sources_out or str(Path(args.out).with_suffix("")) + ".sources.csv"
    write_sources_csv(src_out, sources)
    write_manifest(f"{args.out}.manifest.json", args, [], [args.out, src_out])
    print(json.dumps({"n": args.n, "out": args.out, "sources": src_out}, sort_keys=True))
    return 0


COMMANDS = {"ingest": cmd_ingest, "fit": cmd_fit, "boundary": cmd_boundary,
            "compare": cmd_compare, "spec-test": cmd_spec_test, "simulate": cmd_simulate}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"decayscope: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"decayscope: error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"decayscope {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"decayscope {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DecayScopeError, OSError, ValueError, ArithmeticError) as exc:
        print(f"decayscope {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
