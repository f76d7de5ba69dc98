"""Cross-validated training of tile scorers and aggregation to patient scores."""

from __future__ import annotations

import csv
import io
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import cv2
import numpy as np
import torch
from PIL import Image

from .core import CohortManifest, ScoreRow, TileRecord, atomic_write_text, stable_hash
from .errors import (ConfigError, EmptyGroup, InvariantViolation, NonFiniteGradient, NumericError,
                     SingleClass, TooFewPatients, UnreadableImage)
from .metrics import auroc
from .nn import ArchitectureSpec, build_model
from .nn.tensor import log_softmax

log = logging.getLogger(__name__)


# --- folds ------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: Mapping[str, int]
    seed: int

    def fold(self, i: int) -> list[str]:
        return sorted(p for p, f in self.assignments.items() if f == i)

    def train_patients(self, i: int) -> list[str]:
        return sorted(p for p, f in self.assignments.items() if f != i)


def patient_labels(manifest: CohortManifest) -> dict[str, int]:
    labels: dict[str, int] = {}
    for s in manifest.slides:
        y = s.label(manifest.task)
        if y is None:
            raise InvariantViolation(f"patient {s.patient_id} unlabeled for {manifest.task.value}")
        if labels.setdefault(s.patient_id, y) != y:
            raise InvariantViolation(f"patient {s.patient_id} has conflicting labels")
    return labels


def stratified_kfold(manifest: CohortManifest, k: int = 5, seed: int = 0) -> FoldPlan:
    """Label-stratified k-fold plan over patients.

    Within each class patients are ordered by a seeded hash and dealt round
    robin; the negatives' deal continues where the positives' stopped so fold
    sizes stay within one of each other.
    """
    if k < 2:
        raise ConfigError("k must be >= 2")
    labels = patient_labels(manifest)
    pos = sorted((p for p, y in labels.items() if y == 1), key=lambda p: (stable_hash("fold", seed, p), p))
    neg = sorted((p for p, y in labels.items() if y == 0), key=lambda p: (stable_hash("fold", seed, p), p))
    if len(pos) < k or len(neg) < k:
        raise TooFewPatients(f"k={k} folds need >= {k} patients per class, got {len(pos)}:{len(neg)}")
    assignments = {p: i % k for i, p in enumerate(pos)}
    offset = len(pos) % k
    assignments.update({p: (offset + i) % k for i, p in enumerate(neg)})
    return FoldPlan(k, assignments, seed)


# --- loss and optimizer -------------------------------------------------------------

def class_weights(labels: Sequence[int]) -> torch.Tensor:
    """w_c = N / (2 N_c)."""
    y = np.asarray(labels)
    n = y.size
    counts = np.array([(y == 0).sum(), (y == 1).sum()])
    if (counts == 0).any():
        raise SingleClass("class weights need both classes")
    return torch.tensor(n / (2.0 * counts), dtype=torch.float32)


def weighted_ce(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Batch mean of w[y] * -log softmax(logits)[y]."""
    logp = log_softmax(logits, dim=-1)
    picked = logp.gather(1, labels.long().view(-1, 1)).squeeze(1)
    w = weights.to(logits.dtype)[labels.long()]
    return (-(w * picked)).mean()


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    class_weights: tuple[float, float] | None = None
    max_epochs: int = 20
    patience: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ConfigError("max_epochs must be >= 0 and batch_size >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam betas must be in [0, 1) and eps > 0")
        if self.class_weights is not None:
            if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
                raise ConfigError("class_weights must be two positive numbers")


@dataclass
class AdamState:
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: AdamState,
              cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("non-finite gradient")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.eps))
    return state


# --- data ---------------------------------------------------------------------------

MEAN, STD = 0.5, 0.25


@dataclass
class TileDataset:
    """Tile pixels as a float tensor with broadcast slide labels."""

    images: torch.Tensor                  # (N, 3, H, W) float32, standardised
    labels: torch.Tensor                  # (N,) int64
    tile_ids: list[str]
    patient_ids: list[str]

    def __len__(self) -> int:
        return len(self.tile_ids)

    def subset(self, patients: Iterable[str]) -> "TileDataset":
        keep = set(patients)
        idx = [i for i, p in enumerate(self.patient_ids) if p in keep]
        sel = torch.tensor(idx, dtype=torch.long)
        return TileDataset(self.images[sel], self.labels[sel], [self.tile_ids[i] for i in idx],
                           [self.patient_ids[i] for i in idx])

    def resized(self, px: int) -> "TileDataset":
        if self.images.shape[-1] == px:
            return self
        imgs = torch.nn.functional.interpolate(self.images, size=(px, px), mode="bilinear",
                                               align_corners=False)
        return TileDataset(imgs, self.labels, self.tile_ids, self.patient_ids)


def to_tensor(pixels: np.ndarray, px: int | None = None) -> torch.Tensor:
    if px is not None and pixels.shape[0] != px:
        pixels = cv2.resize(pixels, (px, px), interpolation=cv2.INTER_LINEAR)
    x = torch.from_numpy(np.array(pixels, copy=True)).permute(2, 0, 1).float() / 255.0
    return (x - MEAN) / STD


def load_tile_dataset(tiles: Sequence[TileRecord], manifest: CohortManifest,
                      root: str | Path | None = None, px: int | None = None) -> TileDataset:
    """Read selected tile PNGs; labels come from the slide's label for the manifest task."""
    slides = {s.slide_id: s for s in manifest.slides}
    base = Path(root) if root is not None else None
    imgs, labels, tids, pids = [], [], [], []
    for t in sorted(tiles, key=lambda t: t.tile_id):
        slide = slides.get(t.slide_id)
        if slide is None:
            raise InvariantViolation(f"tile {t.tile_id} from unknown slide")
        y = slide.label(manifest.task)
        path = Path(t.tile_path)
        if base is not None and not path.is_absolute():
            path = base / path
        try:
            with Image.open(path) as im:
                pixels = np.asarray(im.convert("RGB"))
        except (OSError, ValueError) as exc:
            raise UnreadableImage(f"{t.tile_id}: {exc}") from None
        imgs.append(to_tensor(pixels, px))
        labels.append(-1 if y is None else y)
        tids.append(t.tile_id)
        pids.append(slide.patient_id)
    if not imgs:
        raise EmptyGroup("no tiles to load")
    return TileDataset(torch.stack(imgs), torch.tensor(labels, dtype=torch.long), tids, pids)


# --- training -----------------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    best_state: dict | None = None
    adam: AdamState = field(default_factory=AdamState)


class EarlyStopping:
    """Tracks the best validation loss; stop after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int, state: TrainState | None = None):
        self.patience = patience
        self.state = state or TrainState()

    def update(self, epoch: int, val_loss: float, model: torch.nn.Module | None = None) -> bool:
        s = self.state
        s.epoch = epoch
        if val_loss < s.best_val_loss:
            s.best_val_loss = val_loss
            s.best_epoch = epoch
            s.epochs_since_improvement = 0
            if model is not None:
                s.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            s.epochs_since_improvement += 1
        return s.epochs_since_improvement >= self.patience


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    epoch_seconds: float


LOG_HEADER = ("epoch", "train_loss", "val_loss", "epoch_seconds")


def format_log(rows: Sequence[EpochLog]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), f"{r.epoch_seconds:.6f}"])
    return out.getvalue()


def _weights(cfg: TrainConfig, labels: torch.Tensor) -> torch.Tensor:
    if cfg.class_weights is not None:
        return torch.tensor(cfg.class_weights, dtype=torch.float32)
    return class_weights(labels.tolist())


def run_epoch(model: torch.nn.Module, data: TileDataset, cfg: TrainConfig,
              adam: AdamState | None = None, weights: torch.Tensor | None = None,
              generator: torch.Generator | None = None) -> float:
    """One shuffled pass of minibatch Adam; returns the tile-weighted mean training loss."""
    adam = adam if adam is not None else AdamState()
    weights = weights if weights is not None else _weights(cfg, data.labels)
    params = [p for p in model.parameters() if p.requires_grad]
    model.train()
    order = torch.randperm(len(data), generator=generator)
    total, seen = 0.0, 0
    for start in range(0, len(data), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        if idx.numel() < 2 and len(data) >= 2:
            continue  # batchnorm needs more than one sample
        loss = weighted_ce(model(data.images[idx]), data.labels[idx], weights)
        if not torch.isfinite(loss):
            raise NumericError("non-finite training loss")
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        adam_step(params, grads, adam, cfg)
        total += loss.item() * idx.numel()
        seen += idx.numel()
    return total / max(seen, 1)


def evaluate_loss(model: torch.nn.Module, data: TileDataset, weights: torch.Tensor,
                  batch_size: int = 64) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            n = data.labels[sl].numel()
            total += weighted_ce(model(data.images[sl]), data.labels[sl], weights).item() * n
    val = total / max(len(data), 1)
    if not math.isfinite(val):
        raise NumericError("non-finite validation loss")
    return val


def train_model(spec: ArchitectureSpec, train: TileDataset, val: TileDataset, cfg: TrainConfig,
                stream: int = 0) -> tuple[torch.nn.Module, list[EpochLog], TrainState]:
    """Train with early stopping on validation loss; returns the best-epoch model.

    ``stream`` (the fold index) separates initialisation and shuffling streams
    across concurrently trained folds.
    """
    train = train.resized(spec.input_px)
    val = val.resized(spec.input_px)
    model = build_model(spec, seed=stable_hash("init", cfg.seed, stream) % 2 ** 63)
    weights = _weights(cfg, train.labels)
    gen = torch.Generator().manual_seed(stable_hash("shuffle", cfg.seed, stream) % 2 ** 63)
    stopper = EarlyStopping(cfg.patience)
    logs: list[EpochLog] = []
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        train_loss = run_epoch(model, train, cfg, stopper.state.adam, weights, gen)
        val_loss = evaluate_loss(model, val, weights)
        logs.append(EpochLog(epoch, train_loss, val_loss, time.perf_counter() - t0))
        log.info("%s fold %d epoch %d: train %.4f val %.4f", spec.name, stream, epoch, train_loss, val_loss)
        if stopper.update(epoch, val_loss, model):
            break
    if stopper.state.best_state is not None:
        model.load_state_dict(stopper.state.best_state)
    model.eval()
    return model, logs, stopper.state


# --- prediction and aggregation -------------------------------------------------------

def predict_tiles(model: torch.nn.Module, data: TileDataset, batch_size: int = 64,
                  task: str = "MSI") -> list[ScoreRow]:
    """Positive-class softmax probability per tile."""
    model.eval()
    probs = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            logits = model(data.images[start:start + batch_size])
            probs.append(torch.softmax(logits.double(), dim=-1)[:, 1])
    p = torch.cat(probs).tolist() if probs else []
    return [ScoreRow(t, task, float(s), None if int(y) < 0 else int(y))
            for t, s, y in zip(data.tile_ids, p, data.labels.tolist())]


AGGREGATORS = ("mean", "median", "top_k_mean")


def _mean(values: list[float]) -> float:
    # the rounded quotient can land one ulp outside [min, max]
    return min(max(math.fsum(values) / len(values), min(values)), max(values))


def _reduce(values: list[float], method: str, top_k: int) -> float:
    if method == "mean":
        return _mean(values)
    if method == "median":
        return float(statistics.median(values))
    if method == "top_k_mean":
        return _mean(sorted(values, reverse=True)[:top_k])
    raise ConfigError(f"unknown aggregation {method!r}; expected one of {AGGREGATORS}")


def aggregate(tile_scores: Sequence[ScoreRow], patient_of: Mapping[str, str], method: str = "mean",
              top_k: int = 5, patients: Iterable[str] | None = None) -> list[ScoreRow]:
    """One score per patient from its tiles' scores, sorted by patient id.

    ``patient_of`` maps tile id to patient id.  When ``patients`` is given,
    each listed patient must own at least one tile.
    """
    if method not in AGGREGATORS:
        raise ConfigError(f"unknown aggregation {method!r}; expected one of {AGGREGATORS}")
    groups: dict[str, list[ScoreRow]] = {}
    for r in tile_scores:
        if r.entity_id not in patient_of:
            raise InvariantViolation(f"tile {r.entity_id} maps to no patient")
        groups.setdefault(patient_of[r.entity_id], []).append(r)
    wanted = sorted(set(patients)) if patients is not None else sorted(groups)
    out = []
    for pid in wanted:
        rows = groups.get(pid)
        if not rows:
            raise EmptyGroup(f"patient {pid} has no tiles")
        labels = {r.label for r in rows}
        label = labels.pop() if len(labels) == 1 else None
        out.append(ScoreRow(pid, rows[0].task, _reduce([r.score for r in rows], method, top_k), label))
    return out


# --- cross-validation -------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    model: torch.nn.Module
    logs: list[EpochLog]
    state: TrainState
    val_auroc: float | None
    val_scores: list[ScoreRow]


def cross_validate(spec: ArchitectureSpec, data: TileDataset, plan: FoldPlan, cfg: TrainConfig,
                   aggregation: str = "mean", task: str = "MSI") -> list[FoldResult]:
    """Train one model per fold; fold i is the validation split of model i."""
    results = []
    for i in range(plan.k):
        val_patients = plan.fold(i)
        tr, va = data.subset(plan.train_patients(i)), data.subset(val_patients)
        if len(tr) == 0 or len(va) == 0:
            raise EmptyGroup(f"fold {i} has no tiles in its train or validation split")
        model, logs, state = train_model(spec, tr, va, cfg, stream=i)
        tile_scores = predict_tiles(model, va.resized(spec.input_px), task=task)
        patient_scores = aggregate(tile_scores, dict(zip(va.tile_ids, va.patient_ids)), aggregation)
        try:
            val_auc = auroc([r.score for r in patient_scores], [r.label for r in patient_scores])
        except SingleClass:
            val_auc = None
        results.append(FoldResult(i, model, logs, state, val_auc, patient_scores))
    return results


def best_fold(results: Sequence[FoldResult]) -> FoldResult:
    """Highest validation AUROC; ties and missing AUROCs fall back to lowest validation loss."""
    return max(results, key=lambda r: (r.val_auroc if r.val_auroc is not None else -1.0,
                                       -r.state.best_val_loss, -r.fold))


def score_patients(models: Sequence[torch.nn.Module], data: TileDataset, input_px: int,
                   aggregation: str = "mean", task: str = "MSI") -> list[ScoreRow]:
    """Patient scores averaged over ``models`` (a single model or a fold ensemble)."""
    data = data.resized(input_px)
    patient_of = dict(zip(data.tile_ids, data.patient_ids))
    per_model = [aggregate(predict_tiles(m, data, task=task), patient_of, aggregation) for m in models]
    out = []
    for rows in zip(*per_model):
        out.append(ScoreRow(rows[0].entity_id, task, math.fsum(r.score for r in rows) / len(rows),
                            rows[0].label))
    return out


def write_log(rows: Sequence[EpochLog], path: str | Path) -> None:
    atomic_write_text(path, format_log(rows))
