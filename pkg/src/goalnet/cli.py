"""Command-line entry points: synth, ingest, train, eval, predict, visualize, ablate.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .core import ConfigError, RunConfig, load_config

log = logging.getLogger("goalnet")

REPORT_NAME = "metrics.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _samples(manifest_path, cfg: RunConfig):
    from .data import DatasetManifest, slice_windows

    m = DatasetManifest.read(manifest_path)
    return slice_windows(m, cfg.model.obs_len, cfg.model.pred_len, cfg.stride)


def _image_root(args, manifest_path):
    return Path(args.image_root) if args.image_root else Path(manifest_path).resolve().parent


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import SyntheticSceneSpec, generate_synthetic, write_synthetic

    spec = SyntheticSceneSpec(image_size=(args.width, args.height), agent_count=args.agents)
    for split, n, offset in (("train", args.train, 0), ("val", args.val, 1), ("test", args.test, 2)):
        if n <= 0:
            continue
        manifest, images = generate_synthetic(spec, n, args.seed * 3 + offset, split, video_prefix=split[:2])
        path = write_synthetic(args.out, manifest, images)
        print(f"{split}: {len(manifest.records)} tracks -> {path}")
    return 0


def cmd_ingest(args) -> int:
    from .data import ingest_annotations

    manifests, report = ingest_annotations(args.source, args.source_kind, args.drop_occluded, args.default_split)
    out = Path(args.out)
    for split, m in sorted(manifests.items()):
        m.write(out / f"{split}.jsonl")
    print(json.dumps({"files": report.files, "tracks": report.tracks, "rejected_boxes": report.rejected_boxes,
                      "clamped_boxes": report.clamped_boxes, "gap_splits": report.gap_splits,
                      "per_split": dict(sorted(report.per_split.items()))}, indent=2))
    return 0


def train_run(cfg: RunConfig, train_manifest, out_dir, image_root=None, val_manifest=None, device="cpu",
              max_steps=None, resume=None):
    from .core import dump_config
    from .estimator import GoalNetForecaster

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    root = image_root or Path(train_manifest).resolve().parent
    X = _samples(train_manifest, cfg)
    X_val = _samples(val_manifest, cfg) if val_manifest else None
    est = GoalNetForecaster(cfg, image_root=root, device=device, max_steps=max_steps, out_dir=out_dir)
    est.fit(X, X_val=X_val, resume_from=resume)
    return est


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    image_root = Path(args.image_root) if args.image_root else None
    est = train_run(cfg, args.data, args.out, image_root, args.val, args.device, args.max_steps, args.resume)
    st = est.train_state_
    print(f"trained {st.step} steps over {st.epoch} epochs; checkpoints in {args.out}")
    return 0


def eval_run(checkpoint, manifest, out_dir, k=20, seed=None, nll_samples=None, image_root=None,
             device="cpu", expect_config: RunConfig | None = None):
    from .estimator import GoalNetForecaster

    est = GoalNetForecaster.load(checkpoint, image_root=image_root or Path(manifest).resolve().parent,
                                 device=device, k=k, run_config=expect_config)
    X = _samples(manifest, est.config_)
    report = est.evaluate(X, k=k, seed=seed, nll_samples=nll_samples)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write(out_dir / REPORT_NAME)
    return report


def cmd_eval(args) -> int:
    expect = load_config(args.config) if args.config else None
    report = eval_run(args.checkpoint, args.data, args.out, args.k, args.seed, args.nll_samples,
                      args.image_root, args.device, expect)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    from .estimator import GoalNetForecaster
    from .records import write_bundle

    est = GoalNetForecaster.load(args.checkpoint, image_root=_image_root(args, args.data), device=args.device)
    X = _samples(args.data, est.config_)
    if not 0 <= args.index < len(X):
        raise UsageError(f"--index {args.index} out of range (manifest has {len(X)} windows)")
    sample = X[args.index]
    bundle = est.predict([sample], k=args.k, seed=args.seed)[0]
    path = write_bundle(args.out, bundle, sample)
    print(f"{bundle.k} modes -> {path}")
    return 0


def cmd_visualize(args) -> int:
    from PIL import Image

    from .records import read_bundle
    from .viz import render_prediction

    bundle, sample = read_bundle(args.bundle)
    if args.image:
        image_path = Path(args.image)
    else:
        root = Path(args.image_root) if args.image_root else Path(args.bundle).resolve().parent
        image_path = root / sample.scene_image_ref
    with Image.open(image_path) as im:
        fig = render_prediction(bundle, sample, im, box_mode=args.box_mode)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.save(args.out)
    print(f"figure -> {args.out}")
    return 0


ABLATION_AXES = ("norm_kind", "act_kind", "downsample_kind", "use_attention_gate", "use_aspp",
                 "use_scene_features")
TABLE_METRICS = (("mse_05", "MSE 0.5s"), ("mse_10", "MSE 1.0s"), ("mse_15", "MSE 1.5s"),
                 ("cmse", "CMSE"), ("cfmse", "CFMSE"))


def ablation_grid(grid: dict) -> list[dict]:
    """Cartesian product of the axis values; an empty grid has no runs."""
    if not grid:
        return []
    unknown = set(grid) - set(ABLATION_AXES)
    if unknown:
        raise ConfigError(sorted(unknown)[0], f"not an ablation axis (choose from {', '.join(ABLATION_AXES)})")
    axes = sorted(grid)
    return [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]


def format_ablation_table(axes: list[str], rows: list[dict]) -> str:
    head = list(axes) + [label for _, label in TABLE_METRICS] + ["status"]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join("---" for _ in head) + "|"]
    for row in rows:
        cells = [str(row["settings"][a]) for a in axes]
        rep = row.get("report")
        cells += [f"{rep[key]:.1f}" if rep else "-" for key, _ in TABLE_METRICS]
        cells.append(row["status"])
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def ablate_run(base: RunConfig, grid: dict, train_manifest, test_manifest, out_dir, k=20, nll_samples=0,
               image_root=None, device="cpu") -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = ablation_grid(grid)
    rows = []
    for i, settings in enumerate(runs):
        run_dir = out_dir / f"run{i:03d}"
        row = {"settings": settings, "status": "ok", "report": None}
        try:
            cfg = replace(base, model=replace(base.model, **settings))
            train_run(cfg, train_manifest, run_dir, image_root, None, device)
            rep = eval_run(run_dir / "last.safetensors", test_manifest, run_dir, k, None, nll_samples,
                           image_root, device)
            row["report"] = rep.to_dict()
        except Exception as exc:  # noqa: BLE001 - one failed run must not stop the grid
            log.exception("ablation run %d failed", i)
            row["status"] = f"failed: {type(exc).__name__}: {exc}"
        rows.append(row)
    axes = sorted(grid)
    (out_dir / "ablation.md").write_text(format_ablation_table(axes, rows), encoding="utf-8")
    (out_dir / "ablation.json").write_text(json.dumps({"axes": axes, "rows": rows}, indent=2, sort_keys=True)
                                           + "\n", encoding="utf-8")
    return rows


def cmd_ablate(args) -> int:
    grid = yaml.safe_load(Path(args.grid).read_text(encoding="utf-8")) or {}
    if not isinstance(grid, dict) or not all(isinstance(v, list) for v in grid.values()):
        raise UsageError("grid file must map axis names to lists of values")
    base = _run_config(args)
    image_root = Path(args.image_root) if args.image_root else None
    rows = ablate_run(base, grid, args.train, args.test, args.out, args.k, args.nll_samples, image_root,
                      args.device)
    print((Path(args.out) / "ablation.md").read_text(encoding="utf-8"), end="")
    return 0 if all(r["status"] == "ok" for r in rows) else 2


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="goalnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="flat YAML config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--k", type=int, default=20)
        sp.add_argument("--device", default="cpu")
        sp.add_argument("--image-root", help="directory scene image refs are relative to")

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train", type=int, default=200)
    s.add_argument("--val", type=int, default=0)
    s.add_argument("--test", type=int, default=50)
    s.add_argument("--width", type=int, default=640)
    s.add_argument("--height", type=int, default=384)
    s.add_argument("--agents", type=int, default=5, help="agents per synthetic video")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="convert JAAD/PIE annotation XML to manifests")
    s.add_argument("source")
    s.add_argument("--source-kind", choices=["jaad", "pie"], required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--drop-occluded", action="store_true")
    s.add_argument("--default-split", default="train")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train a model")
    common(s, "run directory (checkpoints, log)")
    s.add_argument("--data", required=True, help="training manifest (.jsonl)")
    s.add_argument("--val", help="validation manifest; the plateau scheduler monitors its CFMSE")
    s.add_argument("--epochs", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--resume", help="checkpoint to resume from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    common(s, "directory for metrics.json")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="test manifest (.jsonl)")
    s.add_argument("--nll-samples", type=int, help="trajectories per sample for KDE-NLL (0 skips)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="predict one window and write a bundle")
    common(s, "bundle path (.json)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--index", type=int, default=0, help="window index within the manifest")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("visualize", help="render a bundle over its scene image")
    s.add_argument("--bundle", required=True)
    s.add_argument("--image", help="scene image (default: the sample's image ref under --image-root)")
    s.add_argument("--image-root")
    s.add_argument("--out", required=True, help="output image path")
    s.add_argument("--box-mode", type=int, help="overlay this mode's predicted boxes")
    s.set_defaults(func=cmd_visualize)

    s = sub.add_parser("ablate", help="train+eval over a grid of architecture settings")
    common(s, "directory for per-run outputs and the table")
    s.add_argument("--grid", required=True, help="YAML mapping axis -> list of values")
    s.add_argument("--train", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--nll-samples", type=int, default=0)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"goalnet {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"goalnet {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
