"""Command-line front end.

Exit codes: 0 success, 1 invalid file contents (model or CSV), 2 usage
errors (bad flags, missing files), 3 dimension or row-count mismatch.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, engine, oracle, reports, samplers
from .graph import DimensionMismatchError, GraphError, load_model, save_model

METHODS = ("rescale", "revealcancel", "revealcancel-mean", "exact", "kernel", "ime")


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SHAPPROP_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise UsageError(f"SHAPPROP_THREADS must be an integer, got {env!r}") from None


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {path}")
    return p


def _load_graph(path: str):
    return load_model(_existing(path).read_bytes())


def _features(path: str, target: str | None, dim: int | None = None):
    header, data = reports.read_table(_existing(path))
    names, X, y = reports.split_target(header, data, target)
    if dim is not None and X.shape[1] != dim:
        raise MismatchError(
            f"{path}: has {X.shape[1]} feature columns ({', '.join(names[:5])}"
            f"{', ...' if len(names) > 5 else ''}) but the model expects {dim}")
    return names, X, y


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    spec = bench.CorrgroupsSpec(args.n, args.d, args.rho, args.noise_var, args.seed,
                                exact_moments=not args.iid)
    X, y = bench.gen_corrgroups(spec)
    header = [f"x{i}" for i in range(spec.d)] + ["y"]
    reports.write_table(args.out, header, np.column_stack([X, y]).tolist())
    reports.write_manifest(args.out, "gen", vars(spec), args.seed)
    return 0


def cmd_fit_stack(args) -> int:
    _, X, y = _features(args.data, args.target_column)
    if y is None:
        raise UsageError(f"{args.data}: no target column {args.target_column!r}")
    graph = bench.fit_stack(X, y, hidden=args.hidden, n_trees=args.trees, max_depth=args.depth,
                            learning_rate=args.learning_rate, seed=args.seed)
    Path(args.out).write_bytes(save_model(graph))
    reports.write_manifest(args.out, "fit-stack", {
        "hidden": args.hidden, "trees": args.trees, "depth": args.depth,
        "learning_rate": args.learning_rate}, args.seed, inputs=[args.data])
    return 0


def _background(spec: str, X: np.ndarray, dim: int, target: str | None, seed: int):
    if spec.startswith("kmeans:"):
        try:
            k = int(spec.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad --background {spec!r}; expected kmeans:<k>") from None
        if not 0 < k <= len(X):
            raise UsageError(f"kmeans:{k} needs 1 <= k <= {len(X)} data rows")
        return bench.kmeans(X, k, seed=seed), []
    _, B, _ = _features(spec, target, dim)
    if len(B) == 0:
        raise UsageError(f"{spec}: background file has no rows")
    return B, [spec]


def cmd_explain(args) -> int:
    graph = _load_graph(args.model)
    names, X, _ = _features(args.data, args.target_column, graph.input_dim)
    B, bg_inputs = _background(args.background, X, graph.input_dim, args.target_column, args.seed)
    threads = _threads(args)
    m = args.method
    if m in ("rescale", "revealcancel", "revealcancel-mean"):
        phi = engine.explain_many(graph, X, B, engine.RuleConfig.from_name(m), args.output_index,
                                  threads)
    elif m == "exact":
        if graph.input_dim > oracle.MAX_FEATURES:
            raise UsageError(f"--method exact supports at most {oracle.MAX_FEATURES} features")
        phi = np.array([oracle.shapley_background(graph, x, B, args.output_index) for x in X])
    else:
        n = args.n_samples or (2000 if m == "kernel" else 4000)
        est = samplers.kernel_shap if m == "kernel" else samplers.ime_shap
        try:
            phi = np.array([est(graph, x, B, samplers.SamplerConfig(n, args.seed + i, m),
                                args.output_index) for i, x in enumerate(X)])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    phi = phi.reshape(len(X), graph.input_dim)
    reports.write_table(args.out, names, phi.tolist())
    reports.write_manifest(args.out, "explain", {
        "method": m, "background": args.background, "output_index": args.output_index,
        "n_samples": args.n_samples, "threads": threads}, args.seed,
        inputs=[args.model, args.data, *bg_inputs])
    return 0


def cmd_ablate(args) -> int:
    graph = _load_graph(args.model)
    _, X, y = _features(args.data, args.target_column, graph.input_dim)
    if y is None:
        raise UsageError(f"{args.data}: no target column {args.target_column!r}")
    _, Xtr, _ = _features(args.train_data, args.target_column, graph.input_dim)
    inputs = [args.model, args.data, args.train_data]
    if args.attributions == "random":
        A = samplers.make_rng(args.seed).standard_normal(X.shape)
        method = "random"
    else:
        _, A = reports.read_table(_existing(args.attributions))
        inputs.append(args.attributions)
        if A.shape != X.shape:
            raise MismatchError(
                f"{args.attributions}: attributions are {A.shape[0]}x{A.shape[1]} but "
                f"{args.data} is {X.shape[0]}x{X.shape[1]}")
        method = args.method or Path(args.attributions).stem
    means = Xtr.mean(axis=0)
    curve = bench.keep_absolute_mask(lambda Z: graph(Z, args.output_index), A, X, y, means, method)
    reports.write_table(args.out, ["features_kept", "r_squared"], curve.rows())
    report = Path(str(args.out) + ".json")
    reports.write_json(report, "ablation", {
        "method": method, "auc": curve.auc(), "train_means": means.tolist(),
        "points": [list(p) for p in curve.rows()]})
    reports.write_manifest(args.out, "ablate", {"method": method}, args.seed, inputs=inputs,
                           extra_outputs=[report])
    return 0


def cmd_toy(args) -> int:
    study = bench.toy_revealcancel_study(args.seed, args.n)
    rules = list(study.errors)
    header = ["sample", "x1", "x2", "x3", "x4", *rules]
    rows = ([k, *map(float, study.foregrounds[k]), *(float(study.errors[r][k]) for r in rules)]
            for k in range(args.n))
    reports.write_table(args.out, header, rows)
    report = Path(str(args.out) + ".json")
    reports.write_json(report, "toy", {"seed": args.seed, "n": args.n,
                                       "mean_abs_error": study.aggregate()})
    reports.write_manifest(args.out, "toy", {"n": args.n}, args.seed, extra_outputs=[report])
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shapprop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output file")

    g = sub.add_parser("gen", help="generate a Corrgroups dataset (CSV with a y column)")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--d", type=int, default=60)
    g.add_argument("--rho", type=float, default=0.99)
    g.add_argument("--noise-var", type=float, default=1e-4)
    g.add_argument("--iid", action="store_true",
                   help="plain draws instead of matching the sample covariance exactly")
    common(g)
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit-stack", help="fit an MLP extractor into boosted trees")
    f.add_argument("--data", required=True)
    f.add_argument("--target-column", default="y")
    f.add_argument("--hidden", type=int, default=8)
    f.add_argument("--trees", type=int, default=50)
    f.add_argument("--depth", type=int, default=3)
    f.add_argument("--learning-rate", type=float, default=0.1)
    common(f)
    f.set_defaults(func=cmd_fit_stack)

    e = sub.add_parser("explain", help="write per-sample attributions as CSV")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--background", required=True, help="CSV file or kmeans:<k>")
    e.add_argument("--method", required=True, choices=METHODS)
    e.add_argument("--n-samples", type=int, default=None, help="sampler budget")
    e.add_argument("--output-index", type=int, default=0)
    e.add_argument("--target-column", default="y")
    e.add_argument("--threads", type=int, default=None)
    common(e)
    e.set_defaults(func=cmd_explain)

    a = sub.add_parser("ablate", help="keep-absolute (mask) curve as CSV")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True, help="test CSV including the target column")
    a.add_argument("--train-data", required=True, help="CSV whose means are used for masking")
    a.add_argument("--attributions", required=True, help="attribution CSV or 'random'")
    a.add_argument("--method", default=None, help="label for the curve")
    a.add_argument("--output-index", type=int, default=0)
    a.add_argument("--target-column", default="y")
    common(a)
    a.set_defaults(func=cmd_ablate)

    t = sub.add_parser("toy", help="RevealCancel toy study error table")
    t.add_argument("--n", type=int, default=100)
    common(t)
    t.set_defaults(func=cmd_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors (and --help) this way
        return exc.code or 0
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"shapprop: error: {exc}", file=sys.stderr)
        return 2
    except (MismatchError, DimensionMismatchError) as exc:
        print(f"shapprop: dimension mismatch: {exc}", file=sys.stderr)
        return 3
    except (GraphError, reports.CsvError, ValueError) as exc:
        print(f"shapprop: invalid input: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
