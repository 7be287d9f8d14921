"""Command-line entry point: ``modnet {gen-data,train,eval,render-identities,report}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing
or corrupt inputs).
"""

import argparse
import datetime
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from modnet.dataset import DEFAULT_GRID, DatasetManifest, FormatError, generate_grid, load

log = logging.getLogger("modnet")


class UsageError(Exception):
    pass


def _env_seed():
    raw = os.environ.get("MODNET_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"MODNET_SEED must be an integer, got {raw!r}") from None


def _parse_grid(text):
    try:
        grid = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be comma-separated integers, got {text!r}") from None
    if len(grid) != 5 or any(g < 1 for g in grid):
        raise argparse.ArgumentTypeError(f"grid needs 5 positive sizes (shape,obj_hue,bg_hue,scale,orient), got {text!r}")
    if grid[0] > 4:
        raise argparse.ArgumentTypeError("at most 4 shapes are available")
    return grid


def _require(path, what):
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def cmd_gen_data(args):
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    manifest = DatasetManifest(image_shape=(args.size, args.size, 3), grid=args.grid, seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    generate_grid(manifest, out)
    print(f"wrote {manifest.count} images ({args.size}x{args.size}) to {out}")
    print("grid: " + ", ".join(f"{n}={g}" for n, g in zip(manifest.factor_names, manifest.grid)) + f"; seed={seed}")
    return 0


def cmd_train(args):
    from modnet.trainer import fit, load_config, summarize

    config_path = _require(args.config, "config file")
    data = _require(args.data, "dataset")
    try:
        config = load_config(config_path)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config {config_path}: {exc}") from exc
    seed = _env_seed()
    if seed is not None:
        config.seed = seed
    if args.resume and not (Path(args.out) / "checkpoints").exists():
        raise UsageError(f"nothing to resume in {args.out}")

    def progress(metrics):
        if metrics["step"] % max(1, config.steps // 10) == 0:
            log.info("step %d img=%.5f total=%.5f", metrics["step"], metrics["img"], metrics["total"])

    result = fit(config, data, args.out, resume=args.resume, progress=progress)
    summary = summarize(result.history)
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics: {result.metrics_path} ({summary['steps']} steps)")
    if summary["steps"]:
        print(f"final img loss (last 50 steps) {summary['img']:.6f}, total {summary['total']:.6f}")
    print(f"non-finite aborted steps: {result.state.nonfinite}")
    return 0


def _load_model(path):
    from modnet.modules import CheckpointError, load_checkpoint

    _require(path, "checkpoint")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


def _eval_settings(meta):
    from modnet.trainer import TrainConfig

    config = TrainConfig.from_dict(meta["config"]) if "config" in meta else TrainConfig()
    return config.weights(), config.eps_fd, config.max_pairs, config.seed


def cmd_eval(args):
    from modnet import evalkit

    pool, meta, _ = _load_model(args.checkpoint)
    try:
        ds = load(_require(args.data, "dataset"))
    except FormatError as exc:
        raise UsageError(str(exc)) from exc
    weights, eps_fd, max_pairs, seed = _eval_settings(meta)
    _, test = ds.split()
    table, records = evalkit.routing_table(pool, ds, test, weights, eps_fd, max_pairs, seed=seed)
    collapse = evalkit.collapse_metrics(records, pool.n, pool.m)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "routing_table.csv")
    (out / "routing_table.json").write_text(json.dumps(
        {"shape_names": table.shape_names, "counts": table.counts.tolist()}, indent=1))
    (out / "collapse.json").write_text(json.dumps(collapse, indent=1, sort_keys=True))
    with open(out / "routing_records.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps({"sample": r.sample, "shape_id": r.shape_id, "mask": r.mask,
                                 "identity": r.identity}) + "\n")
    evalkit.render_identities(pool, out / "identities")
    print(table.to_markdown())
    print(f"identity usage entropy {collapse['identity_entropy']:.4f}; wrote {out}")
    return 0


def cmd_render(args):
    from modnet import evalkit

    pool, _, _ = _load_model(args.checkpoint)
    _, paths = evalkit.render_identities(pool, args.out)
    print(f"wrote {len(paths) - 1} identity renders and a grid to {args.out}")
    return 0


def cmd_report(args):
    from modnet import evalkit

    run = _require(args.run_dir, "run directory")
    ev = run / "eval"
    table = None
    if (ev / "routing_table.json").exists():
        data = json.loads((ev / "routing_table.json").read_text())
        counts = np.array(data["counts"])
        totals = counts.sum(axis=1, keepdims=True)
        percent = np.divide(counts * 100.0, totals, out=np.zeros(counts.shape), where=totals > 0)
        table = evalkit.DecompositionTable(data["shape_names"], percent, counts)
    collapse = json.loads((ev / "collapse.json").read_text()) if (ev / "collapse.json").exists() else None
    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC")
    path = evalkit.report(run / "metrics.jsonl", table, ev / "identities", collapse, run,
                          title=f"Run report: {run.name}", header_note=f"Generated {stamp}")
    print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="modnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the factorial shapes dataset")
    p.add_argument("--out", required=True, help="output container file")
    p.add_argument("--seed", type=int, default=None, help="split seed (default: MODNET_SEED or 0)")
    p.add_argument("--grid", type=_parse_grid, default=DEFAULT_GRID,
                   help="sizes for shape,object_hue,background_hue,scale,orientation (default 4,6,6,4,8)")
    p.add_argument("--size", type=int, choices=(32, 64), default=32, help="image side in pixels")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a module pool")
    p.add_argument("--config", required=True, help="flat YAML config")
    p.add_argument("--data", required=True, help="dataset container file")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="routing table, collapse metrics and identity renders on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory (use <run>/eval for `report`)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render-identities", help="decode every identity transform on its own")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("report", help="markdown report for a run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"modnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit 1 instead of a traceback
        log.debug("failure", exc_info=True)
        print(f"modnet {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
