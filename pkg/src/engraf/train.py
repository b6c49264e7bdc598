"""Deterministic SGD training, joint coarse/fine evaluation, checkpoints,
and the architecture ablation runner.

Determinism contract: with ``deterministic=True`` and fixed (train config,
data, init seed), two runs produce bitwise-identical epoch histories and
checkpoints. All randomness flows from the config seed through seeded
streams; batch order is a pure function of (seed, epoch).
"""

from __future__ import annotations

import copy
import json
import math
import os
import time
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .data import AugmentPolicy, ImageDataset, batch_iter
from .errors import (
    ConfigMismatchError,
    DuplicateEntryError,
    EmptyDatasetError,
    InvalidConfigError,
    ManifestMismatchError,
    NonFiniteInputError,
    NonFiniteLossError,
    TruncatedBlobError,
)
from .loss import LossBreakdown, total_loss
from .model import EngrafConfig, EngrafNet, build_model, param_count
from .taxonomy import Taxonomy

__all__ = [
    "TrainConfig",
    "EvalMetrics",
    "EpochRecord",
    "AblationRow",
    "fit",
    "evaluate",
    "format_coarse_fine",
    "save_checkpoint",
    "load_checkpoint",
    "run_ablation",
    "ablation_rows_to_tsv",
    "history_to_json",
]

MANIFEST_FILE = "manifest.json"
WEIGHTS_FILE = "weights.bin"
CHECKPOINT_FORMAT = "engraf-checkpoint-v1"


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyperparameters. The step schedule multiplies the learning rate
    by 0.1 at 50% and at 75% of the epoch budget."""

    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 150
    batch_size: int = 20
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidConfigError("weight_decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfigError("epochs and batch_size must be positive")

    @staticmethod
    def finetune_protocol(**overrides) -> "TrainConfig":
        """lr 0.001, batch 20: the small-batch fine-tune style recipe."""
        return TrainConfig(**overrides)

    @staticmethod
    def cifar_scratch(**overrides) -> "TrainConfig":
        """lr 0.1, batch 128: from-scratch training on 32x32 inputs."""
        base = dict(learning_rate=0.1, batch_size=128)
        base.update(overrides)
        return TrainConfig(**base)

    def lr_at_epoch(self, epoch: int) -> float:
        milestones = sorted({math.floor(self.epochs * 0.5),
                             math.floor(self.epochs * 0.75)} - {0})
        drops = sum(1 for m in milestones if epoch >= m)
        return self.learning_rate * (0.1 ** drops)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass
class EvalMetrics:
    """Joint accuracy report: fine from z0, coarse from the first coarse
    head (z2, else z4, else derived from the fine prediction)."""

    fine_top1: float
    coarse_top1: float
    per_head_top1: dict
    consistency_rate: float

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "EvalMetrics":
        return EvalMetrics(**d)


def format_coarse_fine(metrics: EvalMetrics) -> str:
    """Render the joint accuracies as `coarse-fine` percentage pairs."""
    return f"{100.0 * metrics.coarse_top1:.2f}-{100.0 * metrics.fine_top1:.2f}"


@dataclass
class EpochRecord:
    epoch: int
    loss: LossBreakdown  # detached (plain floats)
    metrics: EvalMetrics
    learning_rate: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss": {"per_head": dict(self.loss.per_head), "total": self.loss.total},
            "metrics": self.metrics.to_dict(),
            "learning_rate": self.learning_rate,
        }


def history_to_json(history: list[EpochRecord]) -> str:
    return json.dumps([r.to_dict() for r in history], indent=2)


def _argmax_rows(a: np.ndarray) -> np.ndarray:
    # np.argmax picks the first maximum, i.e. ties break to the lowest index
    return np.argmax(a, axis=1)


def evaluate(model, data: ImageDataset, tax: Taxonomy,
             batch_size: int = 256) -> EvalMetrics:
    """Eval-mode accuracy over all records (short final batch included)."""
    if len(data) == 0:
        raise EmptyDatasetError("evaluate over empty dataset")
    model.eval()
    head_hits: dict[str, int] = {}
    fine_hits = 0
    coarse_hits = 0
    consistent = 0
    total = 0
    parent = np.asarray(tax.parent, dtype=np.int64)
    with torch.no_grad():
        for batch in batch_iter(data, batch_size, shuffle_seed=None,
                                policy=AugmentPolicy.eval()):
            logits = model(torch.from_numpy(batch.inputs))
            present = {k: v.detach().cpu().numpy() for k, v in logits.present().items()}
            fine_pred = _argmax_rows(present["z0"])
            if "z2" in present:
                coarse_pred = _argmax_rows(present["z2"])
            elif "z4" in present:
                coarse_pred = _argmax_rows(present["z4"])
            else:
                coarse_pred = parent[fine_pred]
            for name, arr in present.items():
                kind_labels = (batch.fine_labels if name in ("z0", "z1", "z3")
                               else batch.coarse_labels)
                head_hits[name] = head_hits.get(name, 0) + int(
                    (_argmax_rows(arr) == kind_labels).sum())
            fine_hits += int((fine_pred == batch.fine_labels).sum())
            coarse_hits += int((coarse_pred == batch.coarse_labels).sum())
            consistent += int((parent[fine_pred] == coarse_pred).sum())
            total += len(batch.fine_labels)
    return EvalMetrics(
        fine_top1=fine_hits / total,
        coarse_top1=coarse_hits / total,
        per_head_top1={k: v / total for k, v in sorted(head_hits.items())},
        consistency_rate=consistent / total,
    )


def _check_fit_inputs(model: EngrafNet, train_data: ImageDataset,
                      eval_data: ImageDataset, tax: Taxonomy) -> None:
    cfg = model.config
    if cfg.num_fine != tax.num_fine or cfg.num_coarse != tax.num_coarse:
        raise ConfigMismatchError(
            f"model heads ({cfg.num_fine}/{cfg.num_coarse}) do not match "
            f"taxonomy ({tax.num_fine}/{tax.num_coarse})")
    for name, ds in (("train", train_data), ("eval", eval_data)):
        if len(ds) == 0:
            raise EmptyDatasetError(f"{name} dataset is empty")
        if ds.image_size != cfg.input_size:
            raise ConfigMismatchError(
                f"{name} images are {ds.image_size}px but model expects "
                f"{cfg.input_size}px")


def fit(model: EngrafNet, train_data: ImageDataset, eval_data: ImageDataset,
        tax: Taxonomy, cfg: TrainConfig, checkpoint_dir=None,
        log=None) -> tuple[EngrafNet, list[EpochRecord]]:
    """Train for cfg.epochs epochs of SGD with momentum and L2 decay.

    Returns the trained model and one EpochRecord per epoch (mean per-head
    train loss plus eval metrics). On a non-finite loss the parameters are
    rolled back to the last completed epoch, a checkpoint is written when
    checkpoint_dir is given, and NonFiniteLoss is raised.
    """
    _check_fit_inputs(model, train_data, eval_data, tax)
    was_deterministic = torch.are_deterministic_algorithms_enabled()
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    try:
        optimizer = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                                    momentum=cfg.momentum,
                                    weight_decay=cfg.weight_decay)
        policy = AugmentPolicy.train(crop=model.config.input_size)
        history: list[EpochRecord] = []
        last_good = copy.deepcopy(model.state_dict())
        last_metrics = None
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at_epoch(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            sums: dict[str, float] = {}
            steps = 0
            for step, batch in enumerate(batch_iter(
                    train_data, cfg.batch_size, shuffle_seed=cfg.seed,
                    epoch=epoch, policy=policy)):
                inputs = torch.from_numpy(batch.inputs)
                fine = torch.from_numpy(batch.fine_labels)
                coarse = torch.from_numpy(batch.coarse_labels)
                optimizer.zero_grad(set_to_none=True)
                try:
                    logits = model(inputs)
                    breakdown = total_loss(logits, fine, coarse,
                                           variant=model.config.variant)
                    finite = bool(torch.isfinite(breakdown.total.detach()))
                except NonFiniteInputError:
                    finite = False
                if not finite:
                    model.load_state_dict(last_good)
                    if checkpoint_dir is not None:
                        save_checkpoint(model, cfg, max(epoch - 1, 0),
                                        last_metrics, checkpoint_dir)
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch} step {step}",
                        epoch=epoch, step=step)
                breakdown.total.backward()
                optimizer.step()
                for name, term in breakdown.per_head.items():
                    sums[name] = sums.get(name, 0.0) + float(term.detach())
                steps += 1
            per_head = {k: v / steps for k, v in sorted(sums.items())}
            epoch_loss = LossBreakdown(per_head=per_head,
                                       total=sum(per_head.values()))
            metrics = evaluate(model, eval_data, tax)
            history.append(EpochRecord(epoch=epoch, loss=epoch_loss,
                                       metrics=metrics, learning_rate=lr))
            last_good = copy.deepcopy(model.state_dict())
            last_metrics = metrics
            if log is not None:
                log(f"epoch {epoch}: loss {epoch_loss.total:.4f} "
                    f"fine {metrics.fine_top1:.4f} coarse {metrics.coarse_top1:.4f} "
                    f"lr {lr:g}")
        return model, history
    finally:
        torch.use_deterministic_algorithms(was_deterministic)


# ---------------------------------------------------------------------------
# checkpoints

def _checkpoint_tensors(model: EngrafNet):
    """Parameters and BN running statistics, in state_dict order.

    num_batches_tracked counters are int64 and unused under fixed BN
    momentum, so they stay out of the f32 blob.
    """
    for name, tensor in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        if tensor.dtype != torch.float32:
            raise ManifestMismatchError(
                f"tensor {name} has dtype {tensor.dtype}; checkpoints store f32")
        yield name, tensor


def save_checkpoint(model: EngrafNet, train_cfg: TrainConfig | None,
                    epoch: int, metrics: EvalMetrics | None, directory) -> None:
    """Write manifest.json plus weights.bin (little-endian f32 blob)."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, tensor in _checkpoint_tensors(model):
        raw = tensor.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
        entries.append({"name": name, "dtype": "f32",
                        "shape": list(tensor.shape),
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "epoch": epoch,
        "metrics": metrics.to_dict() if metrics is not None else None,
        "tensors": entries,
    }
    with open(os.path.join(directory, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, WEIGHTS_FILE), "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(directory):
    """Restore (model, (model_config, train_config), epoch, metrics).

    The round trip is bitwise: parameters and running statistics match the
    saved model exactly.
    """
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    blob_path = os.path.join(directory, WEIGHTS_FILE)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        with open(blob_path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ManifestMismatchError(f"cannot read checkpoint in {directory}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ManifestMismatchError(f"unknown checkpoint format {manifest.get('format')!r}")
    model_cfg = EngrafConfig.from_dict(manifest["model_config"])
    train_cfg = (TrainConfig.from_dict(manifest["train_config"])
                 if manifest.get("train_config") else None)
    model = build_model(model_cfg, init_seed=0)

    expected = dict(_checkpoint_tensors(model))
    entries = manifest["tensors"]
    if len(entries) != len(expected):
        raise ManifestMismatchError(
            f"manifest lists {len(entries)} tensors, model has {len(expected)}")
    offset = 0
    state = {}
    for entry in entries:
        name = entry["name"]
        if name not in expected:
            raise ManifestMismatchError(f"unexpected tensor {name!r}")
        shape = tuple(entry["shape"])
        if shape != tuple(expected[name].shape):
            raise ManifestMismatchError(
                f"tensor {name!r}: manifest shape {shape}, "
                f"model shape {tuple(expected[name].shape)}")
        if entry["offset"] != offset:
            raise ManifestMismatchError(
                f"tensor {name!r}: offset {entry['offset']} not contiguous "
                f"(expected {offset})")
        nbytes = 4 * int(np.prod(shape)) if shape else 4
        if entry["length"] != nbytes:
            raise ManifestMismatchError(
                f"tensor {name!r}: length {entry['length']} != {nbytes}")
        offset += nbytes
    if len(blob) < offset:
        raise TruncatedBlobError(
            f"weights blob is {len(blob)} bytes, manifest needs {offset}")
    if len(blob) > offset:
        raise ManifestMismatchError(
            f"weights blob is {len(blob)} bytes, manifest accounts for {offset}")
    for entry in entries:
        start = entry["offset"]
        arr = np.frombuffer(blob[start:start + entry["length"]], dtype="<f4")
        state[entry["name"]] = torch.from_numpy(
            arr.reshape(entry["shape"]).copy())
    result = model.load_state_dict(state, strict=False)
    stray = [k for k in result.missing_keys if not k.endswith("num_batches_tracked")]
    if stray or result.unexpected_keys:
        raise ManifestMismatchError(
            f"state mismatch: missing {stray}, unexpected {result.unexpected_keys}")
    metrics = (EvalMetrics.from_dict(manifest["metrics"])
               if manifest.get("metrics") else None)
    return model, (model_cfg, train_cfg), int(manifest["epoch"]), metrics


# ---------------------------------------------------------------------------
# ablation grid

@dataclass
class AblationRow:
    variant: str
    graft_size: int | None
    fine_top1: float
    coarse_top1: float
    param_count: int
    wall_time_s: float

    def to_dict(self) -> dict:
        return asdict(self)


def _normalize_entry(entry) -> tuple[str, int | None]:
    variant, g = entry
    if variant not in ("resnet", "two_branch", "graft", "engraf"):
        raise InvalidConfigError(f"unknown variant {variant!r}")
    if variant in ("resnet", "two_branch"):
        return variant, None
    if g is None or g < 1:
        raise InvalidConfigError(f"variant {variant!r} needs a graft size >= 1")
    return variant, int(g)


def run_ablation(grid, train_data: ImageDataset, eval_data: ImageDataset,
                 tax: Taxonomy, train_cfg: TrainConfig,
                 base_config: EngrafConfig, init_seed: int = 0,
                 log=None) -> list[AblationRow]:
    """Train one model per (variant, graft_size) entry under identical
    seeds and data order, so row differences are architectural."""
    entries = [_normalize_entry(e) for e in grid]
    seen = set()
    for e in entries:
        if e in seen:
            raise DuplicateEntryError(f"grid entry {e} appears twice")
        seen.add(e)
    rows = []
    for variant, g in entries:
        cfg = EngrafConfig(
            variant=variant,
            num_fine=base_config.num_fine,
            num_coarse=base_config.num_coarse,
            backbone_depth=base_config.backbone_depth,
            graft_size=g if g is not None else base_config.graft_size,
            input_size=base_config.input_size,
            stem=base_config.stem,
            stage_widths=base_config.stage_widths,
            blocks_per_stage=base_config.blocks_per_stage,
        )
        model = build_model(cfg, init_seed=init_seed)
        start = time.perf_counter()
        model, history = fit(model, train_data, eval_data, tax, train_cfg, log=log)
        elapsed = time.perf_counter() - start
        final = history[-1].metrics
        rows.append(AblationRow(
            variant=variant, graft_size=g,
            fine_top1=final.fine_top1, coarse_top1=final.coarse_top1,
            param_count=param_count(model), wall_time_s=elapsed,
        ))
        if log is not None:
            log(f"ablation {variant} G={g}: fine {final.fine_top1:.4f} "
                f"coarse {final.coarse_top1:.4f} ({elapsed:.1f}s)")
    return rows


def ablation_rows_to_tsv(rows: list[AblationRow]) -> str:
    lines = ["variant\tgraft_size\tfine_top1\tcoarse_top1\tparam_count\twall_time_s"]
    for r in rows:
        g = "" if r.graft_size is None else str(r.graft_size)
        lines.append(f"{r.variant}\t{g}\t{r.fine_top1:.6f}\t{r.coarse_top1:.6f}"
                     f"\t{r.param_count}\t{r.wall_time_s:.3f}")
    return "\n".join(lines) + "\n"
