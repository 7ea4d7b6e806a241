"""Two-stage training: the class-aware autoencoder, then the segmentation network.

Both stages use SGD with momentum and a per-iteration poly learning-rate
decay. Data order and augmentation for epoch ``e`` are drawn from
``np.random.default_rng([seed, e])`` so a run resumed from an epoch
checkpoint replays exactly the same batches.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .caae import CAAEConfig, ClassAwareAutoEncoder
from .dataset import LabeledImage, augment, stack_batch
from .segnet import LOSS_TERMS, SegmentationNet, SegNetConfig, compute_seg_losses
from .transformer import load_archive, save_archive

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``last_good`` holds the checkpoint of the last finished epoch."""

    def __init__(self, message: str, last_good: "Checkpoint | None"):
        super().__init__(message)
        self.last_good = last_good


class FrozenWeightsChanged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "caae"
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0  # global norm; 0 disables
    crop_size: int = 64
    scale_min: float = 0.75
    scale_max: float = 1.25
    flip_prob: float = 0.5
    seed: int = 0
    # model
    patch_size: int = 8
    enc_dim: int = 96
    enc_depth: int = 6
    enc_heads: int = 3
    dec_depth: int = 4
    seg_dim: int = 96
    seg_depth: int = 6
    seg_heads: int = 3
    mlp_ratio: float = 4.0
    class_dim: int = 64
    token_merge: str = "sum"
    use_recon: bool = True
    # segmentation losses
    sigma: float = 0.075
    U: int = 4
    loss_cf: bool = True
    loss_cb: bool = True
    loss_as: bool = True
    loss_ac: bool = True
    loss_ss: bool = True
    pair_average: bool = False
    # evaluation
    tau_bg: float = 0.25

    def __post_init__(self):
        if self.stage not in ("caae", "seg"):
            raise ConfigError(f"stage must be 'caae' or 'seg', got {self.stage!r}")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if self.poly_power <= 0:
            raise ConfigError("poly_power must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.sigma <= 0:
            raise ConfigError("sigma must be > 0")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        base = {"caae": {}, "seg": dict(epochs=40, batch_size=8, base_lr=0.005, crop_size=64)}[stage]
        return cls(stage=stage, **{**base, **overrides})

    @property
    def loss_flags(self) -> dict[str, bool]:
        return {t: getattr(self, f"loss_{t}") for t in LOSS_TERMS}

    def caae_config(self, image_size: int, num_classes: int) -> CAAEConfig:
        return CAAEConfig(
            image_size=image_size,
            patch_size=self.patch_size,
            dim=self.enc_dim,
            depth=self.enc_depth,
            heads=self.enc_heads,
            mlp_ratio=self.mlp_ratio,
            decoder_depth=self.dec_depth,
            num_classes=num_classes,
            class_dim=self.class_dim,
            token_merge=self.token_merge,
        )

    def segnet_config(self, image_size: int, num_classes: int) -> SegNetConfig:
        return SegNetConfig(
            image_size=image_size,
            patch_size=self.patch_size,
            dim=self.seg_dim,
            depth=self.seg_depth,
            heads=self.seg_heads,
            mlp_ratio=self.mlp_ratio,
            num_classes=num_classes,
            class_dim=self.class_dim,
        )


# ---------------------------------------------------------------------------
# config files: one ``key = value`` per line, ``#`` starts a comment


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError as err:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from err
    return raw


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def apply_overrides(obj, values: dict[str, str]):
    """Return a copy of dataclass ``obj`` with string ``values`` coerced onto its fields."""
    types = {f.name: f.type for f in fields(obj)}
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    coerced = {k: _coerce(k, types[k], v) if isinstance(v, str) else v for k, v in values.items()}
    return replace(obj, **coerced)


def load_config(path: str | os.PathLike, base=None, overrides: dict | None = None):
    base = base if base is not None else TrainConfig()
    values = parse_kv(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return apply_overrides(base, values)


def dump_config(obj) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(obj).items())


# ---------------------------------------------------------------------------
# schedule


def poly_lr(iteration: int, max_iter: int, base_lr: float, power: float = 0.9) -> float:
    if iteration > max_iter:
        warnings.warn(f"iteration {iteration} beyond max_iter {max_iter}; lr clamped to 0")
        return 0.0
    return base_lr * (1 - iteration / max_iter) ** power


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    stage: str
    model: torch.nn.Module
    config: TrainConfig
    iteration: int = 0
    epoch: int = 0
    metric_log: list = field(default_factory=list)  # (epoch, term, value)
    optimizer_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def save(self, path: str | os.PathLike) -> None:
        arrays = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        arrays.update({f"optim/{k}": v for k, v in self.optimizer_state.items()})
        meta = {
            "stage": self.stage,
            "model_config": asdict(self.model.config),
            "train_config": asdict(self.config),
            "iteration": self.iteration,
            "epoch": self.epoch,
            "metric_log": [list(r) for r in self.metric_log],
            "extra": self.extra,
        }
        save_archive(path, arrays, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        arrays, meta = load_archive(path)
        stage = meta["stage"]
        if stage == "caae":
            model = ClassAwareAutoEncoder(CAAEConfig(**meta["model_config"]))
        elif stage == "seg":
            model = SegmentationNet(SegNetConfig(**meta["model_config"]))
        else:
            raise ValueError(f"{path}: unknown checkpoint stage {stage!r}")
        state = {k[6:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
        model.load_state_dict(state)
        optim = {k[6:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("optim/")}
        return cls(
            stage=stage,
            model=model,
            config=TrainConfig(**meta["train_config"]),
            iteration=meta["iteration"],
            epoch=meta["epoch"],
            metric_log=[tuple(r) for r in meta["metric_log"]],
            optimizer_state=optim,
            extra=meta.get("extra", {}),
        )


def weights_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def write_metric_csv(metric_log, path: str | os.PathLike) -> None:
    lines = ["epoch,term,value"] + [f"{e},{t},{v!r}" for e, t, v in metric_log]
    tmp = os.fspath(path) + ".tmp"
    Path(tmp).write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_metric_csv(path) -> list[tuple[int, str, float]]:
    rows = Path(path).read_text().splitlines()[1:]
    out = []
    for r in rows:
        e, t, v = r.split(",")
        out.append((int(e), t, float(v)))
    return out


# ---------------------------------------------------------------------------
# training loops


def _make_optimizer(model, config: TrainConfig, state: dict | None):
    opt = torch.optim.SGD(
        [p for p in model.parameters() if p.requires_grad],
        lr=config.base_lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    if state:
        named = dict(model.named_parameters())
        for name, buf in state.items():
            opt.state[named[name]]["momentum_buffer"] = buf.clone()
    return opt


def _optimizer_state(model, opt) -> dict:
    out = {}
    for name, p in model.named_parameters():
        buf = opt.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            out[name] = buf.detach().clone()
    return out


def _epoch_batches(dataset, config: TrainConfig, epoch: int):
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(len(dataset))
    size = config.crop_size
    for i in range(0, len(order), config.batch_size):
        items = [
            augment(dataset[j], (config.scale_min, config.scale_max), size, config.flip_prob, rng)
            for j in order[i : i + config.batch_size]
        ]
        yield stack_batch(items)


def _step(model, opt, loss, config: TrainConfig, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    opt.step()


def _iters_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train_caae(
    dataset: list[LabeledImage],
    config: TrainConfig,
    resume: Checkpoint | None = None,
    on_epoch=None,
) -> Checkpoint:
    """Train the autoencoder on similarity + reconstruction; returns a frozen checkpoint."""
    if config.stage != "caae":
        raise ConfigError(f"train_caae needs stage=caae, got {config.stage!r}")
    if not dataset:
        raise ValueError("empty dataset")
    torch.manual_seed(config.seed)
    K = dataset[0].num_classes
    if resume is not None:
        model, start, it, metric_log = resume.model, resume.epoch, resume.iteration, list(resume.metric_log)
    else:
        model = ClassAwareAutoEncoder(config.caae_config(dataset[0].pixels.shape[0], K))
        start, it, metric_log = 0, 0, []
    opt = _make_optimizer(model, config, resume.optimizer_state if resume else None)
    max_iter = config.epochs * _iters_per_epoch(len(dataset), config.batch_size)
    last_good = resume
    for epoch in range(start, config.epochs):
        model.train()
        sums = {"ss": 0.0, "recon": 0.0, "total": 0.0}
        n = 0
        for pixels, labels in _epoch_batches(dataset, config, epoch):
            parts = model.losses(pixels, labels, use_recon=config.use_recon)
            total = parts["total"].item()
            if not math.isfinite(total):
                raise TrainingDiverged(f"non-finite CAAE loss at epoch {epoch + 1}", last_good)
            _step(model, opt, parts["total"], config, poly_lr(it, max_iter, config.base_lr, config.poly_power))
            it += 1
            bs = len(labels)
            for k in sums:
                sums[k] += parts[k].item() * bs
            n += bs
        for k, v in sums.items():
            metric_log.append((epoch + 1, k, v / n))
        log.info("caae epoch %d: %s", epoch + 1, {k: round(v / n, 5) for k, v in sums.items()})
        last_good = Checkpoint("caae", copy.deepcopy(model), config, it, epoch + 1, list(metric_log), _optimizer_state(model, opt))
        if on_epoch is not None:
            on_epoch(last_good)
    freeze(model)
    return Checkpoint("caae", model, config, it, config.epochs, metric_log, _optimizer_state(model, opt))


def freeze(model: torch.nn.Module) -> torch.nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def train_seg(
    dataset: list[LabeledImage],
    caae_checkpoint: Checkpoint,
    config: TrainConfig,
    resume: Checkpoint | None = None,
    on_epoch=None,
) -> Checkpoint:
    """Train the segmentation network against the frozen autoencoder."""
    if config.stage != "seg":
        raise ConfigError(f"train_seg needs stage=seg, got {config.stage!r}")
    if caae_checkpoint.stage != "caae":
        raise ValueError("caae_checkpoint is not a CAAE checkpoint")
    if not dataset:
        raise ValueError("empty dataset")
    caae = freeze(caae_checkpoint.model)
    frozen_hash = weights_hash(caae)
    torch.manual_seed(config.seed)
    K = dataset[0].num_classes
    if resume is not None:
        model, start, it, metric_log = resume.model, resume.epoch, resume.iteration, list(resume.metric_log)
    else:
        model = SegmentationNet(config.segnet_config(dataset[0].pixels.shape[0], K))
        start, it, metric_log = 0, 0, []
    if not 1 <= config.U <= model.config.depth:
        raise ConfigError(f"U={config.U} must be in [1, {model.config.depth}]")
    opt = _make_optimizer(model, config, resume.optimizer_state if resume else None)
    max_iter = config.epochs * _iters_per_epoch(len(dataset), config.batch_size)
    last_good = resume
    terms = LOSS_TERMS + ("total",)
    for epoch in range(start, config.epochs):
        model.train()
        sums = dict.fromkeys(terms, 0.0)
        n = 0
        for pixels, labels in _epoch_batches(dataset, config, epoch):
            try:
                bundle = compute_seg_losses(
                    model, caae, pixels, labels, config.sigma, config.loss_flags, config.pair_average
                )
            except FloatingPointError as err:
                raise TrainingDiverged(f"epoch {epoch + 1}: {err}", last_good) from err
            _step(model, opt, bundle.total, config, poly_lr(it, max_iter, config.base_lr, config.poly_power))
            it += 1
            bs = len(labels)
            for k, v in bundle.as_dict().items():
                sums[k] += v * bs
            n += bs
        if weights_hash(caae) != frozen_hash:
            raise FrozenWeightsChanged(f"CAAE weights changed during epoch {epoch + 1}")
        for k in terms:
            metric_log.append((epoch + 1, k, sums[k] / n))
        log.info("seg epoch %d: %s", epoch + 1, {k: round(v / n, 5) for k, v in sums.items()})
        last_good = Checkpoint(
            "seg", copy.deepcopy(model), config, it, epoch + 1, list(metric_log), _optimizer_state(model, opt),
            {"caae_hash": frozen_hash},
        )
        if on_epoch is not None:
            on_epoch(last_good)
    return Checkpoint(
        "seg", model, config, it, config.epochs, metric_log, _optimizer_state(model, opt),
        {"caae_hash": frozen_hash},
    )
