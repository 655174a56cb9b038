"""Command-line entry point.

Subcommands: generate, train, search, evaluate, tune, benchmark, plot.
Every run writes its outputs plus one ``manifest.json`` into ``--out``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .benchmark import measure_episode, scaling, within_linear
from .classifier import parse_scorer_spec
from .dataio import load_dataset, save_dataset
from .errors import ActiveSearchError, InvalidInputError, InvalidParameterError, ValidationError
from .evaluation import (BudgetCurve, GridConfig, average_precision, budget_curve,
                         dataset_ap, default_checkpoints, episode_detections, nms,
                         read_detections, run_policy, tune_hyperparameters, write_curve,
                         write_detections)
from .forest import ForestConfig, ForestModel, train_forest
from .search import (Hyperparameters, initial_window, read_trace, run_episode,
                     write_snapshot, write_trace)
from .synthetic import SyntheticConfig, generate_synthetic
from .tabular import SCHEMA_VERSION, read_table, write_table

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared helpers


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path, obj) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path, kind: str) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"does not parse: {exc}", where=str(path)) from None
    if not isinstance(obj, dict):
        raise ValidationError("expected a JSON object", where=str(path))
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {version!r} for {kind}",
                              where=str(path), field="schema_version")
    return obj


def write_manifest(out_dir, command: str, args, inputs, outputs, started: float,
                   **extra) -> str:
    """One manifest per run: config snapshot, seeds, file digests, timing."""
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "tool_version": __version__,
        "config": config,
        "seeds": {"seed": getattr(args, "seed", None)},
        "inputs": {str(p): _digest(p) for p in inputs if p and os.path.isfile(p)},
        "outputs": {os.path.relpath(p, out_dir): _digest(p) for p in sorted(outputs)},
        "wall_clock_s": time.time() - started,
        **extra,
    }
    path = os.path.join(out_dir, "manifest.json")
    _write_json(path, manifest)
    return path


def _parse_int_list(text: str, name: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{name} expects comma-separated integers, got {text!r}") from None
    return values


def _theta_from_args(args) -> Hyperparameters:
    if args.theta:
        obj = _read_json(args.theta, "hyperparameters")
        try:
            theta = Hyperparameters.from_dict(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad hyperparameters: {exc}", where=args.theta) from None
    else:
        theta = Hyperparameters()
    overrides = {"lam": args.lam, "sigma_s": args.sigma_s, "sigma_c": args.sigma_c}
    d = {"lambda": theta.lam, "sigma_s": theta.sigma_s, "sigma_c": theta.sigma_c,
         "budget": theta.budget}
    for key, value in overrides.items():
        if value is not None:
            d["lambda" if key == "lam" else key] = value
    if args.budget is not None:
        d["budget"] = args.budget
    return Hyperparameters.from_dict(d)


def _class_name(args, dataset, model=None) -> str:
    if args.class_name:
        return args.class_name
    if model is not None:
        return model.class_name
    classes = dataset.classes()
    if len(classes) != 1:
        raise UsageError(f"--class is required; dataset has classes {classes}")
    return classes[0]


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> list:
    cfg = SyntheticConfig.load(args.config) if args.config else SyntheticConfig()
    if args.seed is not None:
        d = cfg.to_dict()
        d["seed"] = args.seed
        cfg = SyntheticConfig.from_dict(d)
    train, test = generate_synthetic(cfg)
    paths = [os.path.join(args.out, n) for n in ("train.jsonl", "test.jsonl", "config.json")]
    save_dataset(train, paths[0])
    save_dataset(test, paths[1])
    _write_json(paths[2], cfg.to_dict())
    args.seed = cfg.seed
    return [[args.config], paths, {}]


def cmd_train(args) -> list:
    dataset = load_dataset(args.dataset)
    class_name = _class_name(args, dataset)
    if class_name not in dataset.classes():
        raise InvalidInputError(f"class {class_name!r} has no ground truth in {args.dataset}")
    cfg = ForestConfig(n_trees=args.trees, images_per_tree=args.images_per_tree,
                       max_depth=args.max_depth, min_leaf=args.min_leaf,
                       n_candidates=args.candidates, n_bins=args.bins)
    seed = 0 if args.seed is None else args.seed
    args.seed = seed
    model = train_forest(dataset, class_name, cfg, rng_seed=seed, jobs=args.jobs)
    model.start_window = initial_window(dataset, class_name).as_array()
    path = os.path.join(args.out, "model.npz")
    model.save(path)
    return [[args.dataset], [path], {"forest": {"n_trees": model.n_trees,
                                                "meta": model.meta}}]


def _search_one(task):
    image, model, scorer, theta, policy, seed, snapshots, start = task
    if policy == "active":
        ep = run_episode(image, model, scorer, theta, start, snapshots=snapshots, timed=True)
    else:
        ep = run_policy([image], policy, scorer, budget=theta.budget, seed=seed)[image.id]
    return ep


def _map(fn, tasks, jobs: int):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    return [fn(t) for t in tasks]


def cmd_search(args) -> list:
    dataset = load_dataset(args.dataset)
    model = ForestModel.load(args.model) if args.model else None
    if args.policy == "active" and model is None:
        raise UsageError("--model is required for the active policy")
    class_name = _class_name(args, dataset, model)
    seed = 0 if args.seed is None else args.seed
    args.seed = seed
    scorer = parse_scorer_spec(args.scorer, dataset, class_name, seed=seed)
    theta = _theta_from_args(args)
    snapshots = _parse_int_list(args.emit_belief_snapshots or "", "emit-belief-snapshots")
    start = None
    if args.policy == "active" and model.start_window is None:
        raise ValidationError("model stores no start window; retrain it with this tool",
                              where=args.model)
    images = sorted(dataset, key=lambda im: im.id)
    tasks = [(im, model, scorer, theta, args.policy, seed, snapshots, start) for im in images]
    episodes = _map(_search_one, tasks, args.jobs)

    outputs = []
    dets = []
    query, update = [], []
    for im, ep in zip(images, episodes):
        assert len(set(ep.indices.tolist())) == len(ep), "repeated visit"
        path = os.path.join(args.out, "traces", f"{im.id}.tsv")
        write_trace(ep, path)
        outputs.append(path)
        dets.extend(episode_detections(ep))
        query.extend(ep.timings.get("forest_query", []))
        update.extend(ep.timings.get("belief_update", []))
        for t, beliefs in sorted(ep.snapshots.items()):
            snap = os.path.join(args.out, "snapshots", im.id, f"t{t:05d}.tsv")
            write_snapshot(beliefs, snap)
            outputs.append(snap)
            if args.plot:
                from .plotting import plot_belief_map
                svg = snap[:-4] + ".svg"
                plot_belief_map(im, beliefs, svg, visited=ep.indices[:t],
                                class_name=class_name, title=f"{im.id}, t = {t}")
                outputs.append(svg)
    det_path = os.path.join(args.out, "detections.tsv")
    write_detections(dets, det_path)
    outputs.append(det_path)
    timing = {}
    if query:
        per = np.array(query) + np.array(update)
        timing = {"iterations": int(per.size), "mean_ms": 1e3 * float(per.mean()),
                  "median_ms": 1e3 * float(np.median(per)),
                  "forest_query_mean_ms": 1e3 * float(np.mean(query)),
                  "belief_update_mean_ms": 1e3 * float(np.mean(update))}
    return [[args.dataset, args.model], outputs,
            {"theta": theta.to_dict(), "policy": args.policy, "class_name": class_name,
             "per_iteration": timing, "classifier_calls": len(dets)}]


def cmd_evaluate(args) -> list:
    dataset = load_dataset(args.dataset)
    class_name = _class_name(args, dataset)
    gt = {im.id: im.gt(class_name) for im in dataset}
    outputs, inputs = [], [args.dataset]
    report = {"class_name": class_name}
    if args.detections:
        inputs.append(args.detections)
        dets = read_detections(args.detections)
        unknown = sorted({d.image_id for d in dets} - set(gt))
        if unknown:
            raise ValidationError(f"detections for unknown image {unknown[0]!r}",
                                  where=args.detections)
        by_image: dict = {}
        for d in dets:
            by_image.setdefault(d.image_id, []).append(d)
        kept = [k for im in dataset for k in nms(by_image.get(im.id, []))]
        ap = average_precision(kept, gt)
        report.update(ap=ap, n_detections=len(dets), n_after_nms=len(kept))
    if args.traces:
        episodes = {}
        for im in dataset:
            path = os.path.join(args.traces, f"{im.id}.tsv")
            if os.path.exists(path):
                episodes[im.id] = read_trace(path, im.id)
                inputs.append(path)
        if not episodes:
            raise ValidationError("no trace files for any dataset image", where=args.traces)
        longest = max(len(ep) for ep in episodes.values())
        if args.checkpoints:
            cps = _parse_int_list(args.checkpoints, "checkpoints")
        else:
            cps = default_checkpoints(longest, args.step)
        curve = budget_curve(dataset, episodes, cps, class_name, policy=args.label)
        curve_path = os.path.join(args.out, "curve.tsv")
        write_curve(curve, curve_path)
        outputs.append(curve_path)
        from .plotting import plot_curves
        svg = os.path.join(args.out, "curve.svg")
        plot_curves([curve], svg, labels=[args.label], title=f"class {class_name}")
        outputs.append(svg)
        report.update(curve=curve.points, auc=curve.auc(),
                      ap_all_visits=dataset_ap(dataset, episodes, class_name))
        if "ap" not in report:
            report["ap"] = report["ap_all_visits"]
    if not args.detections and not args.traces:
        raise UsageError("give --detections and/or --traces")
    path = os.path.join(args.out, "report.json")
    _write_json(path, {"schema_version": SCHEMA_VERSION, **report})
    outputs.append(path)
    return [inputs, outputs, {"ap": report.get("ap")}]


def cmd_tune(args) -> list:
    dataset = load_dataset(args.dataset)
    model = ForestModel.load(args.model)
    class_name = _class_name(args, dataset, model)
    seed = 0 if args.seed is None else args.seed
    args.seed = seed
    scorer = parse_scorer_spec(args.scorer, dataset, class_name, seed=seed)
    grid = GridConfig.from_dict(_read_json(args.grid, "grid")) if args.grid else GridConfig()
    if args.checkpoints:
        cps = _parse_int_list(args.checkpoints, "checkpoints")
    else:
        cps = default_checkpoints(args.budget, args.step)
    factory = None
    if args.retrain_folds:
        def factory(train):
            return train_forest(train, class_name, model.config, rng_seed=seed, jobs=args.jobs)
    result = tune_hyperparameters(dataset, model, scorer, grid, args.folds, cps,
                                  class_name=class_name, seed=seed, forest_factory=factory)
    theta_path = os.path.join(args.out, "theta.json")
    _write_json(theta_path, {"schema_version": SCHEMA_VERSION, **result.best.to_dict()})
    table_path = os.path.join(args.out, "grid_scores.tsv")
    write_table(table_path, ("lambda", "sigma_s", "sigma_c", "auc"),
                ((r["lambda"], r["sigma_s"], r["sigma_c"], r["auc"]) for r in result.table))
    return [[args.dataset, args.model], [theta_path, table_path],
            {"best": result.best.to_dict(), "grid": grid.to_dict(), "grid_scores": result.table,
             "checkpoints": result.checkpoints, "folds": result.folds}]


def cmd_benchmark(args) -> list:
    model = ForestModel.load(args.model)
    seed = 0 if args.seed is None else args.seed
    args.seed = seed
    theta = _theta_from_args(args)
    sizes = _parse_int_list(args.sizes, "sizes")
    reports, slope, intercept = scaling(model, sizes, theta.budget, seed, theta, args.repeats)
    rows = [r.to_dict() for r in reports]
    inputs = [args.model]
    if args.dataset:
        dataset = load_dataset(args.dataset)
        class_name = _class_name(args, dataset, model)
        scorer = parse_scorer_spec(args.scorer, dataset, class_name, seed=seed)
        for im in sorted(dataset, key=lambda im: im.id)[:args.images]:
            r = measure_episode(im, model, scorer, theta).to_dict()
            rows.append({"image_id": im.id, **r})
        inputs.append(args.dataset)
    cols = ("image_id", "n_proposals", "n_trees", "iterations", "total_s", "mean_ms",
            "median_ms", "query_mean_ms", "update_mean_ms", "distance_evals_per_iteration",
            "max_path_length")
    table = os.path.join(args.out, "benchmark.tsv")
    write_table(table, cols, ([r.get("image_id", "synthetic")] + [r[c] for c in cols[1:]]
                              for r in rows))
    summary = {"fit_ms_per_proposal": slope, "fit_intercept_ms": intercept,
               "linear_within_2x": within_linear(reports, slope, intercept), "runs": rows}
    path = os.path.join(args.out, "report.json")
    _write_json(path, {"schema_version": SCHEMA_VERSION, **summary})
    return [inputs, [table, path], {"per_iteration": summary}]


def cmd_plot(args) -> list:
    from .evaluation import read_curve
    from .plotting import plot_belief_map, plot_curves
    outputs, inputs = [], []
    if args.curves:
        labels = args.labels.split(",") if args.labels else [
            os.path.splitext(os.path.basename(p))[0] for p in args.curves]
        if len(labels) != len(args.curves):
            raise UsageError("--labels must name every curve")
        curves = [read_curve(p, policy=lab) for p, lab in zip(args.curves, labels)]
        path = os.path.join(args.out, "curves.svg")
        plot_curves(curves, path, labels, title=args.title)
        outputs.append(path)
        inputs += args.curves
    if args.snapshot:
        if not (args.dataset and args.image):
            raise UsageError("--snapshot needs --dataset and --image")
        dataset = load_dataset(args.dataset)
        try:
            im = dataset[args.image]
        except KeyError:
            raise InvalidInputError(f"no image {args.image!r} in {args.dataset}") from None
        rows = read_table(args.snapshot, ("proposal_index", "belief"))
        beliefs = np.zeros(im.n_proposals)
        for r in rows:
            beliefs[int(r[0])] = float(r[1])
        visited = None
        if args.trace:
            visited = read_trace(args.trace, im.id).indices
            inputs.append(args.trace)
        path = os.path.join(args.out, f"beliefs_{im.id}.svg")
        plot_belief_map(im, beliefs, path, visited, class_name=args.class_name,
                        title=args.title)
        outputs.append(path)
        inputs += [args.dataset, args.snapshot]
    if not outputs:
        raise UsageError("give --curves and/or --snapshot")
    return [inputs, outputs, {}]


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--out", required=True, help="output directory")

    p = _Parser(prog="activesearch", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic benchmark")
    g.add_argument("--config", help="generator config (JSON)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train the context forest")
    t.add_argument("--dataset", required=True)
    t.add_argument("--class", dest="class_name")
    t.add_argument("--trees", type=int, default=10)
    t.add_argument("--images-per-tree", type=int, default=40)
    t.add_argument("--max-depth", type=int, default=15)
    t.add_argument("--min-leaf", type=int, default=5)
    t.add_argument("--candidates", type=int, default=100)
    t.add_argument("--bins", type=int, default=20)
    t.set_defaults(func=cmd_train)

    def theta_flags(q):
        q.add_argument("--theta", help="hyperparameter file written by tune")
        q.add_argument("--lambda", dest="lam", type=float)
        q.add_argument("--sigma-s", type=float)
        q.add_argument("--sigma-c", type=float)
        q.add_argument("--budget", type=int)

    s = sub.add_parser("search", parents=[common], help="run search episodes")
    s.add_argument("--dataset", required=True)
    s.add_argument("--model")
    s.add_argument("--class", dest="class_name")
    s.add_argument("--scorer", default="oracle:0.05")
    s.add_argument("--policy", choices=("active", "random", "exhaustive"), default="active")
    s.add_argument("--emit-belief-snapshots", metavar="K1,K2")
    s.add_argument("--plot", action="store_true", help="render snapshots as SVG")
    theta_flags(s)
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("evaluate", parents=[common], help="AP and AP-vs-budget curves")
    e.add_argument("--dataset", required=True, help="dataset holding the ground truth")
    e.add_argument("--class", dest="class_name")
    e.add_argument("--detections")
    e.add_argument("--traces", help="directory of per-image trace files")
    e.add_argument("--checkpoints", metavar="B1,B2")
    e.add_argument("--step", type=int, default=10)
    e.add_argument("--label", default="active")
    e.set_defaults(func=cmd_evaluate)

    u = sub.add_parser("tune", parents=[common], help="cross-validated grid search")
    u.add_argument("--dataset", required=True)
    u.add_argument("--model", required=True)
    u.add_argument("--class", dest="class_name")
    u.add_argument("--scorer", default="oracle:0.05")
    u.add_argument("--grid", help="grid file (JSON)")
    u.add_argument("--folds", type=int, default=2)
    u.add_argument("--checkpoints", metavar="B1,B2")
    u.add_argument("--budget", type=int, default=100)
    u.add_argument("--step", type=int, default=10)
    u.add_argument("--retrain-folds", action="store_true",
                   help="train a forest per fold instead of reusing --model")
    u.set_defaults(func=cmd_tune)

    b = sub.add_parser("benchmark", parents=[common], help="per-iteration overhead")
    b.add_argument("--model", required=True)
    b.add_argument("--dataset")
    b.add_argument("--class", dest="class_name")
    b.add_argument("--scorer", default="oracle:0.05")
    b.add_argument("--sizes", default="500,1000,2000")
    b.add_argument("--images", type=int, default=5)
    b.add_argument("--repeats", type=int, default=3)
    theta_flags(b)
    b.set_defaults(func=cmd_benchmark)

    pl = sub.add_parser("plot", parents=[common], help="SVG figures")
    pl.add_argument("--curves", nargs="+")
    pl.add_argument("--labels")
    pl.add_argument("--snapshot")
    pl.add_argument("--trace")
    pl.add_argument("--dataset")
    pl.add_argument("--image")
    pl.add_argument("--class", dest="class_name")
    pl.add_argument("--title")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        inputs, outputs, extra = args.func(args)
        write_manifest(args.out, args.command, args, inputs, outputs, started, **extra)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, InvalidInputError, InvalidParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ActiveSearchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
