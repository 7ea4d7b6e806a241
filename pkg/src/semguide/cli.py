"""Command-line entry point: data generation, both training stages, inference,
evaluation, ablation grids and plots.

Every command writes into a staging directory that is moved into ``--out``
only on success, so a failed command leaves no partial outputs behind.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import shutil
import sys
import tempfile
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset as ds
from . import evaluator as ev
from .trainer import (
    Checkpoint,
    ConfigError,
    TrainConfig,
    apply_overrides,
    dump_config,
    parse_kv,
    read_metric_csv,
    train_caae,
    train_seg,
    write_metric_csv,
)

log = logging.getLogger("semguide")

EVAL_SEED_OFFSET = 1000
COMMANDS = ("gen-data", "train-caae", "train-seg", "infer", "eval", "ablate", "plot")


class UsageError(Exception):
    pass


@dataclass
class DataConfig:
    num_images: int = 200
    eval_images: int = 50
    image_size: int = 64
    num_classes: int = 3
    min_shapes: int = 1
    max_shapes: int = 3
    min_shape_size: int = 14
    max_shape_size: int = 26
    patch_size: int = 8
    seed: int = 0

    def spec(self, split: str) -> ds.DatasetSpec:
        kw = {f.name: getattr(self, f.name) for f in fields(ds.DatasetSpec) if hasattr(self, f.name)}
        if split == "eval":
            kw.update(num_images=self.eval_images, seed=self.seed + EVAL_SEED_OFFSET)
        return ds.DatasetSpec(**kw)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override (repeatable)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="semguide", description="Weakly supervised segmentation from image-level labels.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic VOC-style dataset")

    helps = {
        "train-caae": "stage 1: train the class-aware autoencoder",
        "train-seg": "stage 2: train the segmentation network against a frozen autoencoder",
        "infer": "export activation maps and pseudo-masks",
        "eval": "score pseudo-masks (or a directory of predicted masks) against ground truth",
        "ablate": "run a loss-flag, sigma or U ablation grid",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--data", type=Path, help="VOC-style dataset root")
        if name in ("train-seg", "ablate"):
            sp.add_argument("--caae", type=Path, help="CAAE checkpoint (default OUT/caae.ckpt)")
        if name in ("infer", "eval"):
            sp.add_argument("--seg", type=Path, help="segmentation checkpoint (default OUT/seg.ckpt)")
            sp.add_argument("--split", default="eval")
            sp.add_argument("--no-cra", action="store_true", help="use raw activation maps")
        if name in ("eval", "ablate"):
            sp.add_argument("--select-tau", action="store_true", help="pick tau_bg on the train split")
        if name == "eval":
            sp.add_argument("--pred", type=Path, help="directory of predicted <id>.png masks")
        if name == "ablate":
            sp.add_argument("--grid", required=True, choices=("loss-flags", "sigma", "U"))
    sub.add_parser("plot", parents=[common], help="plot loss curves and per-class IoU from CSVs")
    return p


def _overrides(args) -> dict[str, str]:
    values = parse_kv(args.config.read_text()) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return values


def _train_config(args, stage: str) -> TrainConfig:
    values = _overrides(args)
    values.pop("stage", None)
    return apply_overrides(TrainConfig.for_stage(stage), values)


def _load(data: Path | None, split: str, K: int | None = None):
    if data is None:
        raise UsageError("--data is required")
    return ds.load_voc_style(data, split, K)


def _existing(path: Path | None, default: Path, what: str) -> Path:
    path = path or default
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# commands; each writes into ``stage_dir``


def cmd_gen_data(args, stage_dir: Path) -> None:
    cfg = apply_overrides(DataConfig(), _overrides(args))
    for split in ("train", "eval"):
        items = [replace(it, image_id=f"{split}_{it.image_id}") for it in ds.generate_synthetic(cfg.spec(split))]
        ds.export_voc_style(items, stage_dir, split)
    (stage_dir / "data.cfg").write_text(dump_config(cfg))
    print(f"wrote {cfg.num_images} train / {cfg.eval_images} eval images")


def cmd_train_caae(args, stage_dir: Path) -> None:
    cfg = _train_config(args, "caae")
    data = _load(args.data, "train")
    ck = train_caae(data, cfg)
    ck.save(stage_dir / "caae.ckpt")
    write_metric_csv(ck.metric_log, stage_dir / "caae_log.csv")
    (stage_dir / "caae.cfg").write_text(dump_config(cfg))
    print(f"caae: {_final(ck.metric_log)}")


def _final(metric_log) -> str:
    last = max(e for e, _, _ in metric_log)
    return " ".join(f"{t}={v:.4f}" for e, t, v in metric_log if e == last)


def _run_seg(data, caae_path: Path, cfg: TrainConfig) -> Checkpoint:
    return train_seg(data, Checkpoint.load(caae_path), cfg)


def cmd_train_seg(args, stage_dir: Path) -> None:
    caae_path = _existing(args.caae, args.out / "caae.ckpt", "CAAE checkpoint")
    cfg = _train_config(args, "seg")
    data = _load(args.data, "train")
    ck = _run_seg(data, caae_path, cfg)
    ck.save(stage_dir / "seg.ckpt")
    write_metric_csv(ck.metric_log, stage_dir / "seg_log.csv")
    (stage_dir / "seg.cfg").write_text(dump_config(cfg))
    print(f"seg: {_final(ck.metric_log)}")


def _map_key(args) -> str:
    return "M" if getattr(args, "no_cra", False) else "fused"


def _score(model, cfg: TrainConfig, train, evalset, key: str, select_tau: bool, U: int | None = None):
    U = cfg.U if U is None else U
    tau = cfg.tau_bg
    if select_tau:
        tau, _ = ev.select_threshold([m[key] for m in ev.infer_maps(model, train, U)], train)
    maps = [m[key] for m in ev.infer_maps(model, evalset, U)]
    return tau, ev.evaluate_maps(maps, evalset, tau)


def cmd_infer(args, stage_dir: Path) -> None:
    seg_path = _existing(args.seg, args.out / "seg.ckpt", "segmentation checkpoint")
    ck = Checkpoint.load(seg_path)
    cfg = apply_overrides(ck.config, _overrides(args))
    data = _load(args.data, args.split, ck.model.config.num_classes)
    key = _map_key(args)
    maps = ev.infer_maps(ck.model, data, cfg.U)
    out = stage_dir / "maps"
    arrays = {}
    for item, m in zip(data, maps):
        ev.export_maps(m[key], item.label, out, item.image_id, cfg.tau_bg)
        arrays[item.image_id] = m[key].astype(np.float32)
    np.savez_compressed(stage_dir / "maps.npz", **arrays)
    print(f"wrote maps for {len(data)} images")


def cmd_eval(args, stage_dir: Path) -> None:
    if args.pred is not None:
        data = _load(args.data, args.split)
        K = data[0].num_classes
        conf = np.zeros((K + 1, K + 1), dtype=np.int64)
        for item in data:
            p = _existing(args.pred / f"{item.image_id}.png", args.pred, "predicted mask")
            pred = np.asarray(Image.open(p), dtype=np.uint8)
            conf += ev.confusion(pred, item.gt_mask, K)
        metrics = ev.metrics_from_confusion(conf)
    else:
        seg_path = _existing(args.seg, args.out / "seg.ckpt", "segmentation checkpoint")
        ck = Checkpoint.load(seg_path)
        cfg = apply_overrides(ck.config, _overrides(args))
        K = ck.model.config.num_classes
        evalset = _load(args.data, args.split, K)
        train = _load(args.data, "train", K) if args.select_tau else None
        _, metrics = _score(ck.model, cfg, train, evalset, _map_key(args), args.select_tau)
    ev.write_metrics_csv(metrics, stage_dir / "metrics.csv")
    print(metrics.summary())


def ablation_rows(grid: str, depth: int) -> list[dict]:
    """Settings for one ablation grid; CF stays on in the loss-flag grid."""
    if grid == "loss-flags":
        rows = []
        for cb, as_, ac in itertools.product((False, True), repeat=3):
            rows.append({"loss_cf": True, "loss_cb": cb, "loss_as": as_, "loss_ac": ac})
        # order as the columns of the loss ablation: by number of extra losses
        return sorted(rows, key=lambda r: (sum(r.values()), [not r[k] for k in ("loss_cb", "loss_as", "loss_ac")]))
    if grid == "sigma":
        return [{"sigma": s} for s in (0.025, 0.05, 0.075, 0.1)]
    if grid == "U":
        return [{"U": u} for u in range(1, depth + 1)]
    raise UsageError(f"unknown grid {grid!r}")


def run_ablation(grid: str, train, evalset, caae_path: Path, base: TrainConfig, select_tau: bool = False):
    """One row per grid setting: finite-loss flag, final total loss and eval metrics.

    Row ``i`` trains with seed ``base.seed + i``. The U grid only changes how
    maps are read out, so it trains a single network and scores it at every U.
    """
    rows = []
    if grid == "U":
        cfg = replace(base)
        ck = _run_seg(train, caae_path, cfg)
        final = _final_total(ck.metric_log)
        for setting in ablation_rows(grid, cfg.seg_depth):
            tau, m = _score(ck.model, cfg, train, evalset, "fused", select_tau, setting["U"])
            rows.append({**setting, "seed": cfg.seed, "final_loss": final, "tau_bg": tau, **_metric_cols(m)})
        return rows
    for i, setting in enumerate(ablation_rows(grid, base.seg_depth)):
        cfg = replace(base, seed=base.seed + i, **setting)
        ck = _run_seg(train, caae_path, cfg)
        tau, m = _score(ck.model, cfg, train, evalset, "fused", select_tau)
        rows.append({**setting, "seed": cfg.seed, "final_loss": _final_total(ck.metric_log), "tau_bg": tau, **_metric_cols(m)})
    return rows


def _final_total(metric_log) -> float:
    return [v for _, t, v in metric_log if t == "total"][-1]


def _metric_cols(m: ev.SegMetrics) -> dict:
    return {"miou": m.miou, "fp": m.fp_rate, "fn": m.fn_rate}


def write_rows_csv(rows: list[dict], path: Path) -> None:
    keys = list(rows[0])
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(f"{r[k]:.6f}" if isinstance(r[k], float) else str(r[k]) for k in keys))
    path.write_text("\n".join(lines) + "\n")


def cmd_ablate(args, stage_dir: Path) -> None:
    caae_path = _existing(args.caae, args.out / "caae.ckpt", "CAAE checkpoint")
    base = _train_config(args, "seg")
    train = _load(args.data, "train")
    evalset = _load(args.data, "eval", train[0].num_classes)
    rows = run_ablation(args.grid, train, evalset, caae_path, base, args.select_tau)
    name = f"ablate_{args.grid.replace('-', '_')}.csv"
    write_rows_csv(rows, stage_dir / name)
    for r in rows:
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))


def cmd_plot(args, stage_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    made = 0
    for name in ("caae_log.csv", "seg_log.csv"):
        path = args.out / name
        if not path.exists():
            continue
        rows = read_metric_csv(path)
        fig, ax = plt.subplots(figsize=(6, 4))
        for term in dict.fromkeys(t for _, t, _ in rows):
            pts = [(e, v) for e, t, v in rows if t == term]
            ax.plot(*zip(*pts), label=term)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(stage_dir / name.replace(".csv", ".png"), dpi=100)
        plt.close(fig)
        made += 1
    metrics = args.out / "metrics.csv"
    if metrics.exists():
        rows = [r.split(",") for r in metrics.read_text().splitlines()[1:] if not r.startswith("#")]
        cls = [r[0] for r in rows]
        iou = [float(r[1]) if r[1] else np.nan for r in rows]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(cls, iou)
        ax.set_ylim(0, 1)
        ax.set_xlabel("class (0 = background)")
        ax.set_ylabel("IoU")
        fig.tight_layout()
        fig.savefig(stage_dir / "iou.png", dpi=100)
        plt.close(fig)
        made += 1
    if not made:
        raise FileNotFoundError(f"no CSVs to plot in {args.out}")
    print(f"wrote {made} plot(s)")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-caae": cmd_train_caae,
    "train-seg": cmd_train_seg,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    stage_dir = Path(tempfile.mkdtemp(prefix=".staging-", dir=args.out))
    try:
        HANDLERS[args.command](args, stage_dir)
    except (UsageError, ConfigError) as err:
        shutil.rmtree(stage_dir, ignore_errors=True)
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # one-line cause, no traceback
        shutil.rmtree(stage_dir, ignore_errors=True)
        print(f"error: {err}", file=sys.stderr)
        return 2
    for item in sorted(stage_dir.iterdir()):
        dest = args.out / item.name
        if dest.is_dir():
            shutil.rmtree(dest)
        item.replace(dest)
    stage_dir.rmdir()
    return 0


if __name__ == "__main__":
    sys.exit(main())
