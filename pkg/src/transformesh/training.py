"""Training loop: reference-substitution augmentation, weighted sequence loss, Adam."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import ConfigError, DivergenceError, NoSupervisedSlotError
from .model import AUGMENTED, MISSING, OBSERVED, MeshAE, SequenceBatch

logger = logging.getLogger(__name__)

WEIGHT_MODES = ("exp_index", "exp_capped")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1e-4
    weight_mode: str = "exp_capped"
    cap: int = 4

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}", key="alpha")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {WEIGHT_MODES}", key="weight_mode")
        if self.cap < 0:
            raise ConfigError("cap must be >= 0", key="cap")

    def slot_weights(self, n_slots: int) -> np.ndarray:
        t = np.arange(n_slots, dtype=np.float64)
        if self.weight_mode == "exp_capped":
            t = np.minimum(t, self.cap)
        return np.exp(t)

    def describe(self) -> str:
        if self.weight_mode == "exp_capped":
            return f"weights=exp(min(slot,{self.cap})) alpha={self.alpha!r}"
        return f"weights=exp(slot) alpha={self.alpha!r}"


@dataclass(frozen=True)
class AugmentationConfig:
    p_substitute: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_substitute < 1.0:
            raise ConfigError(f"p_substitute must be in [0, 1), got {self.p_substitute}", key="p_substitute")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    accumulate: int = 1  # subjects per optimizer step

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0", key="lr")
        if self.accumulate < 1:
            raise ConfigError("accumulate must be >= 1", key="accumulate")


def supervised_slots(batch: SequenceBatch) -> np.ndarray:
    return np.flatnonzero(batch.status != MISSING)


def sequence_loss(predictions, batch: SequenceBatch, cfg: LossConfig = LossConfig(), slots=None) -> Tensor:
    """``sum_t exp(w(t)) * mae(pred_t, true_t) - alpha * mae(pred_t, reference)`` over supervised slots.

    ``predictions`` is ``(S, N, 3)``; or, when ``slots`` is given, one row per
    listed slot (as returned by ``model.forward(batch, slots)``). Missing slots
    are skipped whatever their content.
    """
    sup = supervised_slots(batch)
    if sup.size == 0:
        raise NoSupervisedSlotError("every slot is missing; nothing to supervise")
    predictions = ad._as_tensor(predictions)
    if slots is None:
        rows, idx = sup, sup
    else:
        slots = np.asarray(slots, dtype=np.int64)
        keep = np.isin(slots, sup)
        rows, idx = np.flatnonzero(keep), slots[keep]
        missing = np.setdiff1d(sup, idx)
        if missing.size:
            raise ValueError(f"predictions lack supervised slots {missing.tolist()}")
    pred = predictions[rows] if len(rows) != predictions.shape[0] else predictions
    fit = ad.mean(ad.tabs(pred - batch.targets[idx]), axis=(1, 2))
    weights = cfg.slot_weights(batch.n_slots)[idx]
    loss = ad.tsum(fit * weights)
    if cfg.alpha:
        reg = ad.mean(ad.tabs(pred - batch.reference), axis=(1, 2))
        loss = loss - ad.scale(ad.tsum(reg), cfg.alpha)
    return loss


def augment_batch(batch: SequenceBatch, cfg: AugmentationConfig, rng: np.random.Generator) -> SequenceBatch:
    """Independently turn each observed slot after the first into an augmented one.

    An augmented slot shows the reference to the encoder but keeps its true
    shape as the loss target.
    """
    if cfg.p_substitute == 0.0:
        return batch
    eligible = np.flatnonzero(batch.status == OBSERVED)
    eligible = eligible[eligible > 0]
    flips = eligible[rng.random(len(eligible)) < cfg.p_substitute]
    if flips.size == 0:
        return batch
    status = batch.status.copy()
    status[flips] = AUGMENTED
    inputs = batch.inputs.copy()
    inputs[flips] = batch.reference
    return replace(batch, status=status, inputs=inputs)


def meshae_loss(model: MeshAE, batch: SequenceBatch) -> Tensor:
    """Mean per-slot reconstruction MAE over the observed shapes."""
    sup = np.flatnonzero(batch.status == OBSERVED)
    recon = model(batch.targets[sup])
    return ad.tsum(ad.mean(ad.tabs(recon - batch.targets[sup]), axis=(1, 2))) * (1.0 / len(sup))


def batch_loss(model, batch: SequenceBatch, cfg: LossConfig) -> Tensor:
    if isinstance(model, MeshAE):
        return meshae_loss(model, batch)
    slots = supervised_slots(batch)
    if slots.size == 0:
        raise NoSupervisedSlotError("every slot is missing; nothing to supervise")
    return sequence_loss(model(batch, slots), batch, cfg, slots)


@dataclass
class TrainState:
    epoch: int = 0
    best_epoch: int = -1
    best_val: float = float("inf")
    history: list = field(default_factory=list)  # dicts: epoch, train_loss, val_loss, wall_seconds
    best_params: dict | None = None


def _checkpoint_records(model, optimizer: Adam, state: TrainState, params: dict | None = None):
    params = model.state_dict() if params is None else params
    recs = [(f"model/{k}", v) for k, v in params.items()]
    recs += optimizer.state_records()
    recs += [("meta/epoch", np.array([state.epoch], dtype=np.float64)),
             ("meta/best_val", np.array([state.best_val]))]
    return recs


def restore_checkpoint(model, path, optimizer: Adam | None = None) -> int:
    """Load parameters (and optimizer moments if given); returns the stored epoch."""
    recs = ad.load_checkpoint(path)
    model.load_state_dict({k[len("model/"):]: v for k, v in recs.items() if k.startswith("model/")})
    if optimizer is not None:
        optimizer.load_state_records(recs)
    return int(recs["meta/epoch"][0])


def evaluate_loss(model, batches, loss_cfg: LossConfig, aug_cfg: AugmentationConfig) -> float:
    """Mean loss under a fixed augmentation draw, so epochs are comparable."""
    if not batches:
        return float("nan")
    rng = np.random.default_rng([aug_cfg.seed, 1])
    total = 0.0
    with ad.no_grad():
        for b in batches:
            total += batch_loss(model, augment_batch(b, aug_cfg, rng), loss_cfg).item()
    return total / len(batches)


LOG_FIELDS = ("epoch", "train_loss", "val_loss", "wall_seconds")


def _write_logs(run_path: Path, history: list) -> None:
    with open(run_path / "train_log.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), f"{row['wall_seconds']:.3f}"])
    # timing-free copy: reproducible byte for byte under fixed seeds
    with open(run_path / "losses.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS[:3])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])


def train(
    model,
    train_batches,
    val_batches=(),
    epochs: int = 50,
    optimizer_cfg: OptimizerConfig = OptimizerConfig(),
    loss_cfg: LossConfig = LossConfig(),
    aug_cfg: AugmentationConfig = AugmentationConfig(),
    run_dir=None,
    run_id: str = "run",
    restore_best: bool = True,
    callback=None,
) -> TrainState:
    """Fit ``model`` one subject at a time.

    Subjects are reshuffled every epoch from ``aug_cfg.seed``. With
    ``run_dir`` set, ``{run_dir}/{run_id}/`` receives ``train_log.csv``,
    ``losses.csv``, ``best.ckpt`` and ``last.ckpt``. At the end the best
    validation parameters are loaded back unless ``restore_best`` is False.
    ``callback(epoch, model, state)`` runs after every epoch.
    """
    train_batches = list(train_batches)
    val_batches = list(val_batches)
    train_ids = {b.subject_id for b in train_batches}
    overlap = train_ids & {b.subject_id for b in val_batches} - {""}
    if overlap:
        raise ConfigError(f"train and validation share subjects: {sorted(overlap)[:5]}")
    run_path = None
    if run_dir is not None:
        run_path = Path(run_dir) / run_id
        run_path.mkdir(parents=True, exist_ok=True)

    params = model.parameters()
    opt = Adam(params, optimizer_cfg.lr, optimizer_cfg.beta1, optimizer_cfg.beta2, optimizer_cfg.eps)
    state = TrainState()
    if epochs <= 0 or not train_batches:
        if run_path is not None:
            _write_logs(run_path, state.history)
        return state

    rng = np.random.default_rng(aug_cfg.seed)
    start = time.perf_counter()
    last_good = model.state_dict()

    def diverge(epoch, value):
        model.load_state_dict(last_good)
        if run_path is not None:
            ad.save_checkpoint(run_path / "last.ckpt", _checkpoint_records(model, opt, state))
            _write_logs(run_path, state.history)
        raise DivergenceError(f"non-finite loss {value} at epoch {epoch}")

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_batches))
        total = 0.0
        opt.zero_grad()
        pending = 0
        for i in order:
            batch = augment_batch(train_batches[i], aug_cfg, rng)
            loss = batch_loss(model, batch, loss_cfg)
            value = loss.item()
            if not np.isfinite(value):
                diverge(epoch, value)
            ad.backward(loss)
            total += value
            pending += 1
            if pending == optimizer_cfg.accumulate:
                opt.step()
                opt.zero_grad()
                pending = 0
                if not all(np.all(np.isfinite(p.data)) for p in params):
                    diverge(epoch, "in parameters")
                last_good = model.state_dict()
        if pending:
            opt.step()
            opt.zero_grad()
            last_good = model.state_dict()
        train_loss = total / len(train_batches)
        val_loss = evaluate_loss(model, val_batches, loss_cfg, aug_cfg)
        state.epoch = epoch
        score = val_loss if val_batches else train_loss
        if not np.isfinite(score):
            diverge(epoch, score)
        state.history.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
             "wall_seconds": time.perf_counter() - start}
        )
        if score < state.best_val:
            state.best_val, state.best_epoch = score, epoch
            state.best_params = model.state_dict()
            if run_path is not None:
                ad.save_checkpoint(run_path / "best.ckpt", _checkpoint_records(model, opt, state))
        logger.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if callback is not None:
            callback(epoch, model, state)

    if run_path is not None:
        ad.save_checkpoint(run_path / "last.ckpt", _checkpoint_records(model, opt, state))
        _write_logs(run_path, state.history)
    if restore_best and state.best_params is not None:
        model.load_state_dict(state.best_params)
    return state
