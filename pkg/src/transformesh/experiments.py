"""Evaluation protocols (interpolation, extrapolation, trajectory) and anomaly heatmaps."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError
from .mesh import save_mesh
from .model import CopyReference, MeshAE

logger = logging.getLogger(__name__)

PROTOCOLS = ("interpolation", "extrapolation", "trajectory")
FME_MIN_MONTH = 24


def mae(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(a) - np.asarray(b))))


def median_abs_deviation(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan")
    return float(np.median(np.abs(v - np.median(v))))


@dataclass
class ProtocolResult:
    """Raw per-(subject, slot) errors plus the per-subject values that get aggregated.

    For interpolation and extrapolation a subject contributes one slot, so
    both views coincide. For trajectory the subject value is the FME, the mean
    over its eligible months.
    """

    protocol: str
    model_name: str = ""
    records: list = field(default_factory=list)  # (subject_id, slot, month, mae)
    skipped: list = field(default_factory=list)  # (subject_id, reason)

    def subject_values(self) -> dict:
        per: dict = {}
        for sid, _, _, err in self.records:
            per.setdefault(sid, []).append(err)
        return {sid: float(np.mean(v)) for sid, v in per.items()}

    @property
    def values(self) -> np.ndarray:
        return np.array(list(self.subject_values().values()))

    @property
    def pooled_values(self) -> np.ndarray:
        return np.array([r[3] for r in self.records])

    @property
    def median(self) -> float:
        return float(np.median(self.values)) if self.records else float("nan")

    @property
    def mad(self) -> float:
        return median_abs_deviation(self.values)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_values())

    def to_csv(self, path) -> None:
        subj = self.subject_values()
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["subject_id", "slot", "month", "mae", "subject_error"])
            for sid, slot, month, err in self.records:
                w.writerow([sid, slot, month, repr(err), repr(subj[sid])])

    @classmethod
    def from_csv(cls, path, protocol: str = "") -> "ProtocolResult":
        res = cls(protocol)
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                res.records.append((row["subject_id"], int(row["slot"]), int(row["month"]), float(row["mae"])))
        return res


def _predict(model, traj, batch, slots) -> np.ndarray:
    """Predicted meshes at ``slots`` for any supported model kind."""
    if isinstance(model, MeshAE):
        # the autoencoder has no temporal path: it reconstructs the true shape it is shown
        return np.stack([model.reconstruct(traj.ground_truth[s]) for s in slots])
    return model.predict(batch, slots=list(slots))


def _name(model) -> str:
    if isinstance(model, CopyReference):
        return "copy_reference"
    return getattr(model.config, "preset", "") or getattr(model.config, "variant", type(model).__name__)


def run_interpolation(model, subjects) -> ProtocolResult:
    """Hide the middle observed visit (index floor(T/2) over attended visits) and predict it."""
    res = ProtocolResult("interpolation", _name(model))
    for s in subjects:
        obs = s.observed_months
        if len(obs) < 3:
            res.skipped.append((s.subject_id, f"{len(obs)} visits < 3"))
            continue
        month = obs[(len(obs) - 1) // 2]
        slot = s.months.index(month)
        pred = _predict(model, s, s.to_batch(hide={month}), [slot])[0]
        res.records.append((s.subject_id, slot, month, mae(pred, s.truth_at(month))))
    return res


def run_extrapolation(model, subjects) -> ProtocolResult:
    """Hide the last observed visit and predict it from the rest."""
    res = ProtocolResult("extrapolation", _name(model))
    for s in subjects:
        obs = s.observed_months
        if len(obs) < 2:
            res.skipped.append((s.subject_id, f"{len(obs)} visits < 2"))
            continue
        month = obs[-1]
        slot = s.months.index(month)
        pred = _predict(model, s, s.to_batch(hide={month}), [slot])[0]
        res.records.append((s.subject_id, slot, month, mae(pred, s.truth_at(month))))
    return res


def run_trajectory(model, subjects) -> ProtocolResult:
    """Baseline-only input; errors at every canonical month in [24, last observed month]."""
    res = ProtocolResult("trajectory", _name(model))
    for s in subjects:
        last = s.observed_months[-1]
        slots = [k for k, m in enumerate(s.months) if FME_MIN_MONTH <= m <= last]
        if not slots:
            res.skipped.append((s.subject_id, f"last visit at month {last} < {FME_MIN_MONTH}"))
            continue
        batch = s.to_batch(hide=set(s.months) - {0})
        preds = _predict(model, s, batch, slots)
        for slot, pred in zip(slots, preds):
            month = s.months[slot]
            res.records.append((s.subject_id, slot, month, mae(pred, s.truth_at(month))))
    return res


RUNNERS = {"interpolation": run_interpolation, "extrapolation": run_extrapolation, "trajectory": run_trajectory}


def run_protocol(name: str, model, subjects) -> ProtocolResult:
    return RUNNERS[name](model, subjects)


SUMMARY_FIELDS = (
    "model", "n_parameters",
    "interpolation_median_x100", "interpolation_mad_x100",
    "extrapolation_median_x100", "extrapolation_mad_x100",
    "trajectory_median_x100", "trajectory_mad_x100",
)


def summary_row(model_name: str, n_parameters: int, results: dict) -> dict:
    """One table row; errors scaled by 100, blank for protocols not run."""
    row = {"model": model_name, "n_parameters": n_parameters}
    for p in PROTOCOLS:
        r = results.get(p)
        row[f"{p}_median_x100"] = f"{100 * r.median:.4f}" if r else ""
        row[f"{p}_mad_x100"] = f"{100 * r.mad:.4f}" if r else ""
    return row


def write_summary(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


# ------------------------------------------------------------------ anomaly


def error_colors(errors: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Linear blue (min) to red (max) map; returns uint8 RGB and the endpoints."""
    lo, hi = float(errors.min()), float(errors.max())
    u = (errors - lo) / (hi - lo) if hi > lo else np.zeros_like(errors)
    rgb = np.stack([255.0 * u, np.zeros_like(u), 255.0 * (1.0 - u)], axis=1)
    return np.rint(rgb).astype(np.uint8), lo, hi


def _ratio(inside: float, outside: float) -> float:
    if outside == 0.0:
        return float("nan") if inside == 0.0 else float("inf")
    return inside / outside


@dataclass
class AnomalyResult:
    ratios: dict = field(default_factory=dict)  # subject_id -> inside/outside mean error, visits >= min month
    per_visit: list = field(default_factory=list)  # (subject_id, month, inside_mean, outside_mean)
    heatmaps: list = field(default_factory=list)  # written paths

    def fraction_above(self, threshold: float = 1.5) -> float:
        if not self.ratios:
            return float("nan")
        return float(np.mean([r >= threshold for r in self.ratios.values()]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["subject_id", "month", "inside_mean", "outside_mean", "ratio"])
            for sid, month, inside, outside in self.per_visit:
                w.writerow([sid, month, repr(inside), repr(outside), repr(_ratio(inside, outside))])


def check_training_manifest(training_groups: dict, eval_subjects) -> None:
    """``training_groups`` maps each training subject to its group; only normals allowed."""
    bad = sorted(sid for sid, g in training_groups.items() if g != "normal")
    if bad:
        raise ManifestError(f"anomaly model was trained on non-normal subjects: {bad[:5]}")
    overlap = sorted(set(training_groups) & {s.subject_id for s in eval_subjects})
    if overlap:
        raise ManifestError(f"evaluation subjects were used in training: {overlap[:5]}")


def run_anomaly(
    model,
    subjects,
    training_groups: dict,
    out_dir=None,
    min_month: int = FME_MIN_MONTH,
    template=None,
    inputs: str = "sequence",
) -> AnomalyResult:
    """Per-vertex error between the model's output and each observed visit.

    The whole observed sequence is fed in. Errors are Euclidean distances per
    vertex. With ``out_dir`` set, one vertex-colored PLY per visit is written.
    The inside/outside ratio uses the generator's atrophy ball and pools all
    visits at or after ``min_month``.
    """
    check_training_manifest(training_groups, subjects)
    res = AnomalyResult()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for s in subjects:
        obs = s.observed_months
        slots = [s.months.index(m) for m in obs]
        batch = s.to_batch() if inputs == "sequence" else s.to_batch(hide=set(s.months) - {0})
        preds = _predict(model, s, batch, slots)
        inside_mask = s.atrophy_mask()
        ins, outs = [], []
        for month, pred in zip(obs, preds):
            err = np.linalg.norm(pred - s.observed[month], axis=1)
            if out_dir is not None and template is not None:
                rgb, lo, hi = error_colors(err)
                path = out_dir / f"{s.subject_id}_month_{month:03}.ply"
                save_mesh(template.with_vertices(s.observed[month]), path, vertex_colors=rgb,
                          comments=[f"error_min {lo!r}", f"error_max {hi!r}"])
                res.heatmaps.append(path)
            if month >= min_month:
                res.per_visit.append((s.subject_id, month, float(err[inside_mask].mean()), float(err[~inside_mask].mean())))
                ins.append(err[inside_mask])
                outs.append(err[~inside_mask])
        if ins:
            res.ratios[s.subject_id] = _ratio(float(np.concatenate(ins).mean()), float(np.concatenate(outs).mean()))
    return res
