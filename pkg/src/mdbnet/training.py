"""K-fold training and evaluation of the dual-head network."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import SGD, AdamW, LrSchedule, load_checkpoint, save_checkpoint
from .blocks import MdbNet, MdbNetConfig
from .data.sample import Prepared, Sample, prepare
from .data.splits import StopDecision, TrainState, early_stop, kfold_split
from .errors import EmptyEvaluationRegion, InvalidSpec
from .losses import (
    ClassWeights,
    WeightingMode,
    class_frequencies,
    combined_loss,
    resample_mask,
    reweight_classes,
    smooth_ce,
    weighted_ce,
)
from .metrics import ConfusionMatrix, EvalReport, ScCounts, miou_of, sc_counts, ssc_mask

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Everything a training run depends on; serialised verbatim next to its outputs."""

    fusion: str = "late"
    block: str = "itrm"
    weighting: str = "kmeans"
    lam: float = 1.0
    smoothing: float = 0.1
    kmeans_k: int = 3
    resample_ratio: float = 2.0
    widths: tuple = (16, 32, 64)
    feature_channels: int = 16
    head_channels: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    head_lr: float = 1e-3
    head_weight_decay: float = 0.05
    epochs: int = 20
    patience: int = 15
    batch_size: int = 2
    folds: int = 3
    seed: int = 0
    eval_seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        WeightingMode(self.weighting)
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise InvalidSpec("epochs, batch_size and patience must be positive")

    def model_config(self, grid_dims, seed: int) -> MdbNetConfig:
        return MdbNetConfig(grid_dims=grid_dims, fusion=self.fusion, block=self.block, widths=self.widths,
                            feature_channels=self.feature_channels, head_channels=self.head_channels, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class FoldResult:
    fold_id: int
    report: EvalReport
    best_epoch: int
    epochs_run: int
    step_losses: list = field(default_factory=list)
    epoch_reports: list = field(default_factory=list)
    weights: ClassWeights | None = None
    state: dict = field(default_factory=dict)
    seconds: float = 0.0


def prepare_all(samples) -> list:
    return [prepare(s) for s in samples]


def fold_class_weights(prepared, config: TrainConfig) -> ClassWeights:
    if WeightingMode(config.weighting) is WeightingMode.RESAMPLE:
        return ClassWeights.uniform()
    freqs = class_frequencies([p.labels3d for p in prepared], [p.valid3d for p in prepared])
    return reweight_classes(freqs, config.kmeans_k, seed=config.seed)


def _batch(samples, prepared, idx, dtype):
    ftsdf = np.stack([prepared[i].ftsdf for i in idx]).astype(dtype)
    rgb = np.stack([samples[i].rgb for i in idx]).astype(dtype)
    pix = np.stack([prepared[i].pixel_index for i in idx])
    return ftsdf, rgb, pix


def batch_loss(model: MdbNet, samples, prepared, idx, config: TrainConfig, weights: ClassWeights, rng):
    """Combined loss ``lam * L_SS + L_SSC`` for the samples ``idx``."""
    logits3d, logits2d = model(*_batch(samples, prepared, idx, model.stem.weight.dtype))
    labels3d = np.stack([prepared[i].labels3d for i in idx])
    mask = np.stack([prepared[i].valid3d for i in idx])
    if WeightingMode(config.weighting) is WeightingMode.RESAMPLE:
        mask &= np.stack([resample_mask(prepared[i].labels3d, prepared[i].visibility3d, config.resample_ratio,
                                        seed=int(rng.integers(2 ** 31))) for i in idx])
    l_ssc = weighted_ce(logits3d, labels3d, weights, mask)
    labels2d = np.stack([prepared[i].labels2d for i in idx])
    l_ss = smooth_ce(logits2d, labels2d, config.smoothing)
    return combined_loss(l_ss, l_ssc, config.lam)


def predict(model: MdbNet, samples, prepared, idx, batch_size: int = 4) -> list:
    """Arg-max coarse label volumes for each sample in ``idx``."""
    was_training = model.training
    model.eval()
    out = []
    idx = list(idx)
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        logits3d, _ = model(*_batch(samples, prepared, chunk, model.stem.weight.dtype))
        out.extend(np.argmax(logits3d.data, axis=1).astype(np.uint8))
    model.train(was_training)
    return out


def evaluate_predictions(preds, prepared, fold_id: int = 0, eval_seed: int = 0) -> EvalReport:
    """SC counts and the SSC confusion matrix accumulated over all given scenes."""
    sc = ScCounts()
    cm = ConfusionMatrix()
    flags = []
    for k, (pred, prep) in enumerate(zip(preds, prepared)):
        gt = np.where(prep.valid3d, prep.labels3d, 255).astype(np.uint8)
        try:
            sc.add(sc_counts(pred, gt, prep.visibility3d, resample_seed=eval_seed + k))
        except EmptyEvaluationRegion:
            pass
        cm.update(pred, gt, ssc_mask(gt, prep.visibility3d))
    scores = sc.scores()
    flags.extend(scores.flags)
    iou = cm.class_iou()
    return EvalReport(scores.precision, scores.recall, scores.iou, [float(v) for v in iou], miou_of(iou),
                      fold_id, flags)


def build_optimizers(model: MdbNet, config: TrainConfig, total_steps: int):
    head = [p for n, p in model.named_parameters() if n.startswith("head.")]
    rest = [p for n, p in model.named_parameters() if not n.startswith("head.")]
    sgd = SGD(rest, LrSchedule.one_cycle(config.lr, total_steps), config.momentum, config.weight_decay)
    adamw = AdamW(head, LrSchedule.cosine_decay(config.head_lr, total_steps), config.head_weight_decay)
    return sgd, adamw


def train_fold(samples, prepared, train_idx, val_idx, config: TrainConfig, fold_id: int = 0,
               out_dir=None, max_steps: int | None = None) -> FoldResult:
    """Train one fold; keep the parameters of the best validation epoch.

    ``max_steps`` truncates training (used for quick loss-curve checks).
    """
    t0 = time.perf_counter()
    fold_seed = config.seed * 1000 + fold_id
    grid_dims = samples[0].grid.dims
    model = MdbNet(config.model_config(grid_dims, fold_seed))
    weights = fold_class_weights([prepared[i] for i in train_idx], config)
    bs = config.batch_size
    steps_per_epoch = int(np.ceil(len(train_idx) / bs))
    total_steps = steps_per_epoch * config.epochs
    sgd, adamw = build_optimizers(model, config, total_steps)
    rng = np.random.default_rng(fold_seed)
    state = TrainState(seed=fold_seed, fold_id=fold_id)
    best_state = model.state_dict()
    best_report = None
    losses, reports = [], []
    step = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(np.asarray(train_idx))
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            loss = batch_loss(model, samples, prepared, idx, config, weights, rng)
            sgd.zero_grad()
            adamw.zero_grad()
            loss.backward()
            sgd.step(step)
            adamw.step(step)
            losses.append(float(loss.data))
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        preds = predict(model, samples, prepared, val_idx)
        report = evaluate_predictions(preds, [prepared[i] for i in val_idx], fold_id, config.eval_seed)
        reports.append(report)
        log.info("fold %d epoch %d loss %.4f val mIoU %.2f SC-IoU %.2f", fold_id, epoch,
                 float(np.mean(losses[-steps_per_epoch:])), report.ssc_miou, report.sc_iou)
        if report.ssc_miou > state.best_miou:
            best_state = model.state_dict()
            best_report = report
        decision = early_stop(state, report.ssc_miou, config.patience)
        if decision is StopDecision.STOP or (max_steps is not None and step >= max_steps):
            break
    model.load_state_dict(best_state)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        opt_state = {f"sgd.{k}": v for k, v in sgd.state_dict().items()}
        opt_state.update({f"adamw.{k}": v for k, v in adamw.state_dict().items()})
        save_checkpoint(out_dir / f"fold{fold_id}.mdb", model.state_dict(), opt_state)
        weights.save(out_dir / f"fold{fold_id}_weights.txt")
        (out_dir / f"fold{fold_id}_log.json").write_text(json.dumps({
            "fold": fold_id, "best_epoch": state.best_epoch, "epochs_run": state.epoch,
            "step_losses": losses, "val_miou": [r.ssc_miou for r in reports],
            "val_sc_iou": [r.sc_iou for r in reports],
        }, indent=1))
    return FoldResult(fold_id, best_report, state.best_epoch, state.epoch, losses, reports, weights,
                      model.state_dict(), time.perf_counter() - t0)


def run_kfold(samples, config: TrainConfig, out_dir=None, prepared=None, folds=None) -> list:
    """Train ``config.folds`` models on seeded splits; returns the per-fold results."""
    prepared = prepare_all(samples) if prepared is None else prepared
    splits = kfold_split(len(samples), config.folds, config.seed)
    wanted = range(config.folds) if folds is None else folds
    return [train_fold(samples, prepared, *splits[f], config, f, out_dir) for f in wanted]


def load_model(checkpoint, config: TrainConfig, grid_dims, fold_id: int = 0) -> MdbNet:
    params, _ = load_checkpoint(checkpoint)
    model = MdbNet(config.model_config(grid_dims, config.seed * 1000 + fold_id))
    model.load_state_dict(params)
    model.eval()
    return model


def initial_loss_drop(losses, n_steps: int = 200, window: int = 10) -> float:
    """Relative drop of the training loss between the first and the last ``window`` of ``n_steps`` steps."""
    head = np.asarray(losses[:n_steps], dtype=np.float64)
    if head.size < 2 * window:
        raise ValueError(f"need at least {2 * window} losses, got {head.size}")
    first, last = head[:window].mean(), head[-window:].mean()
    return float(1.0 - last / first)


__all__ = [
    "FoldResult", "Prepared", "Sample", "TrainConfig", "batch_loss", "build_optimizers", "evaluate_predictions",
    "fold_class_weights", "initial_loss_drop", "load_model", "predict", "prepare_all", "run_kfold", "train_fold",
]
