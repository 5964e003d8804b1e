"""Metrics, dataset assembly from record streams, training, and the
head-count / feature-ablation experiments.

Crosswalk B is the positive class throughout; the generator targets a 50/50
A/B split so single-class precision/recall stay representative. Reported
experiment tables juxtapose synthetic results with the published reference
numbers (clearly labeled); the synthetic benchmark claims directions and
mechanisms, never the published magnitudes.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import features
from .features import FeatureWindow, mask_for_groups
from .geom import IntersectionGeometry
from .ingest import SAMPLE_EVERY, FrameRecord, VruTruth
from .model import (ModelConfig, ModelParams, backward_batch, bce_from_logits,
                    forward_batch, init_params)
from .optim import AdamWConfig, AdamWState, PlateauScheduler, adamw_step, clip_gradients
from .pipeline import Pipeline

POSITIVE_LABEL = "B"


# --- confusion counts and metrics ---------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, y_true: np.ndarray, y_pred: np.ndarray) -> "ConfusionCounts":
        y_true = np.asarray(y_true).astype(bool)
        y_pred = np.asarray(y_pred).astype(bool)
        return cls(tp=int(np.sum(y_pred & y_true)),
                   tn=int(np.sum(~y_pred & ~y_true)),
                   fp=int(np.sum(y_pred & ~y_true)),
                   fn=int(np.sum(~y_pred & y_true)))


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def metrics(c: ConfusionCounts) -> Metrics:
    """Accuracy, precision, recall, F1. Metrics with a zero denominator are
    reported as None (undefined), not as 0."""
    if c.total == 0:
        raise ValueError("metrics need at least one sample")
    acc = (c.tp + c.tn) / c.total
    precision = c.tp / (c.tp + c.fp) if (c.tp + c.fp) > 0 else None
    recall = c.tp / (c.tp + c.fn) if (c.tp + c.fn) > 0 else None
    if precision is None or recall is None or (precision + recall) == 0:
        f1 = None
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return Metrics(acc, precision, recall, f1)


# --- window dataset -------------------------------------------------------------


@dataclass
class WindowDataset:
    x: np.ndarray          # (N, 5, 16)
    y: np.ndarray          # (N,) 0 = crosswalk A, 1 = crosswalk B
    track_ids: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.x.shape[0]

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(self.x.tobytes())
        h.update(self.y.tobytes())
        h.update(self.track_ids.tobytes())
        return h.hexdigest()[:16]

    def subset(self, idx: np.ndarray) -> "WindowDataset":
        return WindowDataset(self.x[idx], self.y[idx], self.track_ids[idx])

    def masked(self, keep: np.ndarray) -> "WindowDataset":
        x = self.x * keep.astype(self.x.dtype)
        return WindowDataset(x, self.y.copy(), self.track_ids.copy())

    def split_by_track(self, seed: int, fractions=(0.70, 0.15, 0.15)
                       ) -> tuple["WindowDataset", "WindowDataset", "WindowDataset"]:
        """70/15/15 split on track ids; a track's windows never straddle splits."""
        ids = np.unique(self.track_ids)
        rng = np.random.default_rng(seed)
        rng.shuffle(ids)
        n = len(ids)
        n_tr = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        groups = (set(ids[:n_tr]), set(ids[n_tr:n_tr + n_val]), set(ids[n_tr + n_val:]))
        parts = []
        for grp in groups:
            idx = np.array([i for i in range(len(self)) if self.track_ids[i] in grp],
                           dtype=int)
            if idx.size == 0:
                raise ValueError("empty split; dataset has too few tracks")
            parts.append(self.subset(idx))
        return tuple(parts)


MATCH_MAX_DIST = 30.0   # px, mean over shared sampled frames
MATCH_MIN_SAMPLES = 3


def match_tracks_to_truth(track_samples: dict[int, dict[int, tuple[float, float]]],
                          truths: Sequence[VruTruth]) -> dict[int, VruTruth]:
    """Assign each tracker track to the ground-truth VRU it followed.

    Scored by mean center distance over sampled frames both sides observed;
    a truth may absorb several tracks (fragmented identities keep their
    label), unmatched tracks are dropped from the dataset.
    """
    truth_samples = [{f: (x, y) for f, x, y in t.samples} for t in truths]
    out: dict[int, VruTruth] = {}
    for tid, samples in track_samples.items():
        best: tuple[float, VruTruth] | None = None
        for truth, tsamp in zip(truths, truth_samples):
            common = [f for f in samples if f in tsamp]
            if len(common) < MATCH_MIN_SAMPLES:
                continue
            d = float(np.mean([
                np.hypot(samples[f][0] - tsamp[f][0], samples[f][1] - tsamp[f][1])
                for f in common]))
            if d <= MATCH_MAX_DIST and (best is None or d < best[0]):
                best = (d, truth)
        if best is not None:
            out[tid] = best[1]
    return out


def build_dataset(records: Iterable[FrameRecord], truths: Sequence[VruTruth],
                  geometry: IntersectionGeometry) -> WindowDataset:
    """Run the real tracking+feature pipeline over a stream and label the
    emitted windows with the matched ground-truth crosswalk."""
    pipe = Pipeline(geometry, params=None)
    windows: list[FeatureWindow] = []
    track_samples: dict[int, dict[int, tuple[float, float]]] = {}
    for rec in records:
        out = pipe.step(rec)
        windows.extend(out.windows)
        if rec.frame_idx % SAMPLE_EVERY == 0:
            for tid, track in pipe.table.tracks.items():
                if track.last_seen == rec.frame_idx:
                    track_samples.setdefault(tid, {})[rec.frame_idx] = track.center

    assignment = match_tracks_to_truth(track_samples, truths)
    xs, ys, tids = [], [], []
    for win in windows:
        truth = assignment.get(win.track_id)
        if truth is None:
            continue
        xs.append(win.matrix)
        ys.append(1.0 if truth.label == POSITIVE_LABEL else 0.0)
        tids.append(win.track_id)
    if not xs:
        raise ValueError("no labeled windows produced from the stream")
    return WindowDataset(np.stack(xs), np.asarray(ys), np.asarray(tids, dtype=int))


# --- training --------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 2.5e-4
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    seed: int = 0
    d_h: int = 256
    d_ff: int = 512
    n_heads: int = 2
    dropout: float = 0.5
    pooling: str = "mean"
    plateau_threshold: float = 1e-4
    lr_floor: float = 1e-6
    dtype: str = "float32"  # training profile; gradient checks run in float64

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in obj.items() if k in cls.__dataclass_fields__})

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_in=features.FEATURE_DIM, d_h=self.d_h,
                           n_heads=self.n_heads, d_ff=self.d_ff,
                           dropout=self.dropout, pooling=self.pooling)


@dataclass
class TrainResult:
    params: ModelParams
    train_loss: list[float]
    val_loss: list[float]
    lr_trace: list[float]
    best_epoch: int
    test_counts: ConfusionCounts
    test_metrics: Metrics
    wall_clock_s: float

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "epochs_run": len(self.val_loss),
            "test": self.test_metrics.to_dict(),
            "wall_clock_s": self.wall_clock_s,
        }


def _eval_loss(params: ModelParams, ds: WindowDataset, batch: int = 256) -> float:
    losses = []
    for i in range(0, len(ds), batch):
        _, cache = forward_batch(ds.x[i:i + batch], params)
        n = cache["logit"].shape[0]
        losses.append(bce_from_logits(cache["logit"], ds.y[i:i + batch]) * n)
    return float(sum(losses) / len(ds))


def evaluate_params(params: ModelParams, ds: WindowDataset,
                    batch: int = 256) -> ConfusionCounts:
    preds = []
    for i in range(0, len(ds), batch):
        p, _ = forward_batch(ds.x[i:i + batch], params)
        preds.append(p >= 0.5)
    return ConfusionCounts.from_predictions(ds.y.astype(bool), np.concatenate(preds))


def train(dataset: WindowDataset, cfg: TrainConfig) -> TrainResult:
    """Mini-batch AdamW training with clipping and plateau LR halving.

    Deterministic per seed: split, shuffles, init, and dropout masks all
    derive from cfg.seed. Returns the best-validation-loss parameters.
    """
    t0 = time.perf_counter()
    dtype = np.dtype(cfg.dtype)
    train_ds, val_ds, test_ds = dataset.split_by_track(cfg.seed)
    train_x = train_ds.x.astype(dtype)
    params = init_params(cfg.model_config(), seed=cfg.seed, dtype=dtype)
    opt_cfg = AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay)
    state = AdamWState.init(params)
    sched = PlateauScheduler(lr=cfg.lr, threshold=cfg.plateau_threshold,
                             floor=cfg.lr_floor)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    drop_rng = np.random.default_rng(cfg.seed + 2)

    best_val = np.inf
    best_epoch = 0
    best_params = params.copy()
    train_losses, val_losses, lrs = [], [], []
    n = len(train_ds)
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            xb, yb = train_x[idx], train_ds.y[idx]
            p, cache = forward_batch(xb, params, mode="train", rng=drop_rng)
            epoch_loss += bce_from_logits(cache["logit"], yb) * len(idx)
            grads = backward_batch(cache, yb, params)
            clip_gradients(grads, cfg.clip_norm)
            adamw_step(params, grads, state, opt_cfg)
        train_losses.append(epoch_loss / n)

        val_loss = _eval_loss(params, val_ds)
        val_losses.append(val_loss)
        opt_cfg.lr = sched.update(val_loss)
        lrs.append(opt_cfg.lr)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = params.copy()

    counts = evaluate_params(best_params, test_ds)
    return TrainResult(best_params, train_losses, val_losses, lrs, best_epoch,
                       counts, metrics(counts), time.perf_counter() - t0)


# --- experiments -------------------------------------------------------------------


@dataclass
class ExperimentReport:
    name: str
    rows: list[dict]
    seeds: dict
    dataset_hash: str
    epochs: int
    wall_clock_s: float
    notes: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "rows": self.rows, "seeds": self.seeds,
                "dataset_hash": self.dataset_hash, "epochs": self.epochs,
                "wall_clock_s": self.wall_clock_s, "notes": self.notes}


GROUP_ORDER = ("L", "M", "G", "P")


def ablation(dataset: WindowDataset, cfg: TrainConfig,
             groups: Sequence[str] = GROUP_ORDER) -> ExperimentReport:
    """Train the incremental feature chains (L, L+M, ...) on identical
    seeds and splits; masked slots are exactly zero."""
    chain = [g for g in GROUP_ORDER if g in set(groups)]
    if not chain:
        raise ValueError("ablation needs at least one feature group")
    t0 = time.perf_counter()
    rows = []
    for i in range(1, len(chain) + 1):
        active = chain[:i]
        keep = mask_for_groups(active)
        result = train(dataset.masked(keep), cfg)
        rows.append({"config": "+".join(active), "groups": list(active),
                     "masked_slots": int((~keep).sum()),
                     **result.test_metrics.to_dict(),
                     "best_epoch": result.best_epoch})
    return ExperimentReport(
        name="feature-ablation",
        rows=rows,
        seeds={"train": cfg.seed},
        dataset_hash=dataset.sha256(),
        epochs=cfg.epochs,
        wall_clock_s=time.perf_counter() - t0,
        notes="synthetic benchmark; direction-only comparison",
    )


REFERENCE_TWO_HEAD = {"accuracy": 0.9645, "precision": 0.9638,
                      "recall": 0.9668, "f1": 0.9653}


def head_sweep(dataset: WindowDataset, cfg: TrainConfig,
               heads: Sequence[int] = (1, 2, 4)) -> ExperimentReport:
    """Train 1/2/4-head configurations, identical everything else.

    Head slicing keeps the parameter count constant across the sweep. The
    report appends the published two-head reference row, clearly labeled as
    measured on a different (private) dataset.
    """
    t0 = time.perf_counter()
    rows = []
    for nh in heads:
        result = train(dataset, replace(cfg, n_heads=nh))
        rows.append({"config": f"{nh}-head", "n_heads": nh,
                     "n_params": result.params.n_params(),
                     **result.test_metrics.to_dict(),
                     "best_epoch": result.best_epoch})
    rows.append({"config": "2-head reference", "source": "paper, private dataset",
                 **REFERENCE_TWO_HEAD})
    return ExperimentReport(
        name="head-count-sweep",
        rows=rows,
        seeds={"train": cfg.seed},
        dataset_hash=dataset.sha256(),
        epochs=cfg.epochs,
        wall_clock_s=time.perf_counter() - t0,
        notes="reference row is not a synthetic result",
    )
