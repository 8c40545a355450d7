"""Pretraining loop: corrupt, reconstruct, score with the composite loss, step Adam."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backbone_io import BackboneStructure, PairManifest, ensure_dir, load_pair, write_structure
from .errors import ConfigError, EmptySplit, NonFiniteLoss, NonFiniteValue
from .geometry import corrupt_structure
from .loss import LossTargets, composite_loss, prepare_targets
from .model import DesaeConfig, ModelParams, forward, init_params, load_checkpoint, reconstruct, save_checkpoint

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "lr", "global", "fragment", "pair", "neighbor", "distance", "total",
               "val_total", "wall_time")
VAL_EPOCH = 2**32 - 1  # fixed epoch slot for validation corruption


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr_init: float = 1e-3
    lr_min: float = 1e-6
    batch_size: int = 16
    corruption_fraction: float = 0.10
    seed: int = 0
    checkpoint_every: int = 1
    grad_clip: float = 1.0
    max_steps: int = 0  # 0 means epochs * batches_per_epoch

    def __post_init__(self):
        for name in ("epochs", "batch_size", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (self.lr_init > 0 and self.lr_min >= 0 and self.grad_clip > 0):
            raise ConfigError("lr_init and grad_clip must be positive, lr_min non-negative")
        if not 0.0 < self.corruption_fraction <= 1.0:
            raise ConfigError("corruption_fraction must lie in (0, 1]")
        if self.seed < 0 or self.max_steps < 0:
            raise ConfigError("seed and max_steps must be non-negative")


def lr_schedule(step: int, total_steps: int, lr_init: float, lr_min: float = 1e-6) -> float:
    """Cosine annealing from ``lr_init`` at step 0 to ``lr_min`` at ``total_steps``."""
    if total_steps <= 0:
        return lr_init
    frac = min(max(step, 0), total_steps) / total_steps
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * frac))


def corruption_seed(base_seed: int, epoch: int, item_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([base_seed, epoch, zlib.crc32(item_id.encode("utf-8"))])


# ---------------------------------------------------------------- config files


def _coerce(cls, section: dict) -> dict:
    types = {f.name: type(f.default) for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in section.items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        kind = types[key]
        try:
            if kind is bool:
                out[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif kind is int:
                out[key] = int(raw)
            else:
                out[key] = kind(raw)
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for {key}") from None
    return out


def load_config(path) -> tuple[TrainConfig, DesaeConfig]:
    """Read an INI file with optional ``[train]`` and ``[model]`` sections."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    unknown = set(parser.sections()) - {"train", "model"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    train = dict(parser["train"]) if parser.has_section("train") else {}
    model = dict(parser["model"]) if parser.has_section("model") else {}
    return TrainConfig(**_coerce(TrainConfig, train)), DesaeConfig(**_coerce(DesaeConfig, model))


def dump_config(train_cfg: TrainConfig, model_cfg: DesaeConfig) -> str:
    lines = ["[train]"]
    lines += [f"{k} = {v}" for k, v in dataclasses.asdict(train_cfg).items()]
    lines += ["", "[model]"]
    lines += [f"{k} = {v}" for k, v in model_cfg.to_dict().items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- training


@dataclass
class TrainItem:
    item_id: str
    structure: BackboneStructure
    targets: LossTargets

    @classmethod
    def from_structure(cls, item_id: str, s: BackboneStructure) -> "TrainItem":
        s.validate(min_length=2)
        return cls(item_id, s, prepare_targets(s))


@dataclass
class TrainResult:
    params: ModelParams
    optimizer: ad.AdamState
    history: list[dict] = field(default_factory=list)
    step: int = 0


def item_loss(item: TrainItem, params: ModelParams, model_cfg: DesaeConfig, fraction: float, seed):
    corrupted, _ = corrupt_structure(item.structure, fraction, seed)
    out = forward(corrupted, model_cfg, params)
    return composite_loss(out.coords_per_layer, item.targets)


def evaluate_loss(items: list[TrainItem], params: ModelParams, model_cfg: DesaeConfig,
                  fraction: float, base_seed: int) -> float:
    """Mean total loss on items with a fixed corruption per item."""
    frozen = ModelParams({k: ad.Tensor(v.data) for k, v in params.tensors.items()})
    totals = [item_loss(it, frozen, model_cfg, fraction, corruption_seed(base_seed, VAL_EPOCH, it.item_id)).total
              for it in items]
    return float(np.mean(totals))


def _checkpoint_extra(cfg: TrainConfig, epoch: int, step: int, best: float) -> dict:
    return {"train_config": dataclasses.asdict(cfg), "epoch": epoch, "step": step, "best": best}


def train_items(items: list[TrainItem], cfg: TrainConfig, model_cfg: DesaeConfig, out_dir=None,
                val_items: list[TrainItem] | None = None, resume=None, log_every_step=None) -> TrainResult:
    """Run the optimisation over pre-built items, consumed in the given order.

    Writes ``train_log.csv``, ``last.ckpt`` and ``best.ckpt`` under ``out_dir``
    when one is given.  ``log_every_step``, if set, is called as
    ``fn(step, breakdowns)`` after each optimiser step.
    """
    if not items:
        raise EmptySplit("no training structures")
    out_dir = ensure_dir(out_dir) if out_dir is not None else None
    batches = [items[i:i + cfg.batch_size] for i in range(0, len(items), cfg.batch_size)]
    total_steps = cfg.epochs * len(batches)
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)

    start_epoch, step, best = 0, 0, math.inf
    if resume is not None:
        ck = load_checkpoint(resume, expected=model_cfg)
        params = ck.params
        optimizer = ad.Adam(list(params), lr=cfg.lr_init)
        optimizer.state = ck.optimizer or ad.AdamState()
        start_epoch = int(ck.extra.get("epoch", -1)) + 1
        step = int(ck.extra.get("step", optimizer.state.step))
        best = float(ck.extra.get("best", math.inf))
    else:
        params = init_params(model_cfg, cfg.seed)
        optimizer = ad.Adam(list(params), lr=cfg.lr_init)

    log_path = out_dir / "train_log.csv" if out_dir is not None else None
    if log_path is not None and (resume is None or not log_path.exists()):
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_COLUMNS)

    def save(name: str, epoch: int) -> None:
        if out_dir is not None:
            save_checkpoint(out_dir / name, model_cfg, params, optimizer.state,
                            _checkpoint_extra(cfg, epoch, step, best))

    def keep_last_good(epoch: int) -> None:
        # parameters are still those of the last successful step
        if out_dir is not None and not (out_dir / "last.ckpt").exists():
            save("last.ckpt", epoch - 1)

    history = []
    with ad.training_mode(True):
        for epoch in range(start_epoch, cfg.epochs):
            if step >= total_steps:
                break
            t0 = time.perf_counter()
            sums = dict.fromkeys(("global", "fragment", "pair", "neighbor", "distance", "total"), 0.0)
            seen = 0
            lr = lr_schedule(step, total_steps, cfg.lr_init, cfg.lr_min)
            for batch in batches:
                if step >= total_steps:
                    break
                lr = lr_schedule(step, total_steps, cfg.lr_init, cfg.lr_min)
                optimizer.zero_grad()
                breakdowns = []
                for item in batch:
                    try:
                        lb = item_loss(item, params, model_cfg, cfg.corruption_fraction,
                                       corruption_seed(cfg.seed, epoch, item.item_id))
                        if not math.isfinite(lb.total):
                            raise NonFiniteValue("loss")
                        ad.backward(lb.tensor / float(len(batch)))
                    except NonFiniteValue as exc:
                        keep_last_good(epoch)
                        raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, item {item.item_id}") from exc
                    breakdowns.append(lb)
                grads, _ = ad.clip_grad_norm(optimizer.grads(), cfg.grad_clip)
                if not all(np.all(np.isfinite(g)) for g in grads):
                    keep_last_good(epoch)
                    raise NonFiniteLoss(f"non-finite gradient at epoch {epoch}")
                optimizer.step(lr=lr, grads=grads)
                step += 1
                for lb in breakdowns:
                    for k, v in lb.as_dict().items():
                        sums[k] += v
                seen += len(breakdowns)
                if log_every_step is not None:
                    log_every_step(step, breakdowns)
            row = {"epoch": epoch, "step": step, "lr": lr}
            row.update({k: v / max(seen, 1) for k, v in sums.items()})
            score = row["total"]
            row["val_total"] = math.nan
            if val_items:
                row["val_total"] = evaluate_loss(val_items, params, model_cfg, cfg.corruption_fraction, cfg.seed)
                score = row["val_total"]
            row["wall_time"] = time.perf_counter() - t0
            history.append(row)
            logger.info("epoch %d step %d lr %.3g total %.4f val %.4f", epoch, step, lr, row["total"],
                        row["val_total"])
            if log_path is not None:
                with open(log_path, "a", newline="") as fh:
                    csv.writer(fh).writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                                             for c in LOG_COLUMNS])
            if score < best:
                best = score
                save("best.ckpt", epoch)
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1 or step >= total_steps:
                save("last.ckpt", epoch)
    return TrainResult(params, optimizer.state, history, step)


def _split_items(manifest: PairManifest, split: str) -> list[TrainItem]:
    items = []
    for row in manifest.split(split):
        _, exp = load_pair(row)
        items.append(TrainItem.from_structure(row.pair_id, exp))
    return items


def train(manifest: PairManifest, cfg: TrainConfig, model_cfg: DesaeConfig, out_dir, resume=None) -> TrainResult:
    """Pretrain on the experimental structures of the train split.

    The val split, when present, supplies a held-out reconstruction loss that
    picks ``best.ckpt``; there is no early stopping.
    """
    if not manifest.split("train"):
        raise EmptySplit("manifest has no train rows")
    items = _split_items(manifest, "train")
    val_items = _split_items(manifest, "val")
    return train_items(items, cfg, model_cfg, out_dir, val_items=val_items, resume=resume)


def debias(checkpoint, structures: list[BackboneStructure], output_dir=None) -> list[BackboneStructure]:
    """Pass structures through the autoencoder uncorrupted; optionally write them out."""
    ck = load_checkpoint(checkpoint) if not hasattr(checkpoint, "params") else checkpoint
    out_dir = ensure_dir(output_dir) if output_dir is not None else None
    t0 = time.perf_counter()
    results = []
    for s in structures:
        rebuilt = reconstruct(s, ck.config, ck.params)
        results.append(rebuilt)
        if out_dir is not None:
            write_structure(rebuilt, out_dir / f"{s.id}.pdb")
    elapsed = time.perf_counter() - t0
    if structures:
        logger.info("debiased %d structures in %.2fs (%.1f per second)", len(structures), elapsed,
                    len(structures) / max(elapsed, 1e-9))
    return results
