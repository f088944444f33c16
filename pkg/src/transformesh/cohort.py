"""Synthetic longitudinal mesh cohorts with known ground truth.

Every subject is the template warped by smooth random bumps (the baseline),
then shrunk over time: a slow global inward drift for everyone ("aging") plus,
for progressors, faster inward atrophy inside a ball around a fixed anomaly
vertex. Ground truth is kept for every canonical month; only the visits the
missingness model retains are "observed", with Gaussian noise added.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError
from .mesh import TriangleMesh, icosphere, load_mesh, save_mesh
from .model import MISSING, OBSERVED, SequenceBatch

logger = logging.getLogger(__name__)

GENERATOR_VERSION = "synth-cohort/1"
CANONICAL_MONTHS = (0, 6, 12, 18, 24, 36, 48, 72)
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


def make_template(subdivisions: int = 3) -> TriangleMesh:
    """Icosphere stretched 2:1:1, a rough stand-in for an elongated subcortical surface."""
    sphere = icosphere(subdivisions)
    return sphere.with_vertices(sphere.vertices * np.array([2.0, 1.0, 1.0]))


def anomaly_vertex(template: TriangleMesh) -> int:
    """Designated center of progressor atrophy: the vertex nearest (1, sqrt(3)/2, 0)."""
    target = np.array([1.0, np.sqrt(0.75), 0.0])
    return int(np.argmin(np.linalg.norm(template.vertices - target, axis=1)))


@dataclass(frozen=True)
class MissingnessProfile:
    """Attrition model.

    A fixed share of subjects attend every visit. Everybody else draws the
    index of their last visit from ``last_visit_probs`` and attends each
    visit before it with probability ``attend_prob``; a draw that happens to
    be complete loses one random intermediate visit.
    """

    complete_fraction: float = 0.03
    last_visit_probs: tuple = (0.14, 0.19, 0.18, 0.14, 0.12, 0.09, 0.07, 0.07)
    attend_prob: float = 0.64

    def expected_visits(self) -> float:
        q = self.attend_prob
        k = len(self.last_visit_probs) - 1
        e_nc = 0.0
        for last, p in enumerate(self.last_visit_probs):
            if last == 0:
                e = 1.0
            else:
                e = 2.0 + (last - 1) * q
                if last == k:
                    e -= q ** (k - 1)  # complete draws drop one visit
            e_nc += p * e
        return self.complete_fraction * (k + 1) + (1.0 - self.complete_fraction) * e_nc


@dataclass(frozen=True)
class SubjectSpec:
    subject_id: str
    group: str  # "normal" or "progressor"
    bump_centers: tuple
    bump_amplitudes: tuple
    bump_widths: tuple
    atrophy_center: int
    atrophy_radius: float
    atrophy_rate: float  # inward displacement per month at the atrophy center
    aging_rate: float  # global inward displacement per month
    noise_sigma: float
    visit_months: tuple
    seed: int

    def to_meta(self, split: str) -> dict:
        return {
            "subject_id": self.subject_id,
            "group": self.group,
            "split": split,
            "atrophy_center": self.atrophy_center,
            "atrophy_radius": repr(self.atrophy_radius),
            "atrophy_rate": repr(self.atrophy_rate),
            "aging_rate": repr(self.aging_rate),
            "noise_sigma": repr(self.noise_sigma),
            "schedule": ",".join(str(m) for m in self.visit_months),
            "bump_centers": ",".join(str(c) for c in self.bump_centers),
            "bump_amplitudes": ",".join(repr(a) for a in self.bump_amplitudes),
            "bump_widths": ",".join(repr(w) for w in self.bump_widths),
            "seed": self.seed,
        }


@dataclass(eq=False)
class Trajectory:
    spec: SubjectSpec
    months: tuple  # canonical schedule
    ground_truth: np.ndarray  # (S, N, 3), noise-free, every month
    observed: dict  # month -> (N, 3) noisy mesh, observed months only
    baseline_normals: np.ndarray = field(repr=False, default=None)

    @property
    def subject_id(self) -> str:
        return self.spec.subject_id

    @property
    def group(self) -> str:
        return self.spec.group

    @property
    def observed_months(self) -> list:
        return sorted(self.observed)

    @property
    def reference(self) -> np.ndarray:
        return self.observed[0]

    def truth_at(self, month: int) -> np.ndarray:
        return self.ground_truth[self.months.index(month)]

    def atrophy_mask(self) -> np.ndarray:
        """Vertices inside the atrophy ball (on the noise-free baseline)."""
        base = self.ground_truth[0]
        d = np.linalg.norm(base - base[self.spec.atrophy_center], axis=1)
        return d < self.spec.atrophy_radius

    def to_batch(self, hide=()) -> SequenceBatch:
        """Sequence over the canonical schedule; months in ``hide`` become missing."""
        visits = {m: v for m, v in self.observed.items() if m not in hide}
        return SequenceBatch.from_visits(self.reference, visits, self.months, self.subject_id)


def _falloff(d: np.ndarray, radius: float) -> np.ndarray:
    """Cosine taper: 1 at the center, 0 at and beyond ``radius``."""
    return np.where(d < radius, 0.5 * (1.0 + np.cos(np.pi * np.minimum(d, radius) / radius)), 0.0)


def generate_subject(template: TriangleMesh, spec: SubjectSpec, months=CANONICAL_MONTHS) -> Trajectory:
    rng = np.random.default_rng(spec.seed)
    diag = template.bbox_diagonal()
    tv = template.vertices
    tn = template.vertex_normals()
    bump = np.zeros(len(tv))
    for c, a, w in zip(spec.bump_centers, spec.bump_amplitudes, spec.bump_widths):
        d2 = np.sum((tv - tv[c]) ** 2, axis=1)
        bump += a * np.exp(-0.5 * d2 / (w * w))
    bump = np.clip(bump, -0.05 * diag, 0.05 * diag)
    base = tv + bump[:, None] * tn
    base_mesh = template.with_vertices(base)
    normals = base_mesh.vertex_normals()
    dist = np.linalg.norm(base - base[spec.atrophy_center], axis=1)
    local = _falloff(dist, spec.atrophy_radius)
    months = tuple(months)
    gt = np.empty((len(months), len(tv), 3))
    for k, m in enumerate(months):
        inward = spec.aging_rate * m + spec.atrophy_rate * m * local
        gt[k] = base - inward[:, None] * normals
    observed = {}
    for k, m in enumerate(months):
        noise = rng.normal(0.0, spec.noise_sigma, size=gt[k].shape) if spec.noise_sigma > 0 else 0.0
        if m in spec.visit_months:
            observed[m] = gt[k] + noise
    return Trajectory(spec, months, gt, observed, normals)


def _visit_pattern(rng: np.random.Generator, profile: MissingnessProfile, complete: bool, n_slots: int) -> list:
    if complete:
        return list(range(n_slots))
    last = int(rng.choice(len(profile.last_visit_probs), p=np.asarray(profile.last_visit_probs) / sum(profile.last_visit_probs)))
    slots = [0]
    if last > 0:
        middle = [k for k in range(1, last) if rng.random() < profile.attend_prob]
        if last == n_slots - 1 and len(middle) == n_slots - 2:
            middle.pop(int(rng.integers(len(middle))))
        slots += middle + [last]
    return slots


@dataclass(frozen=True)
class CohortConfig:
    n_subjects: int = 200
    fraction_progressors: float = 0.3
    seed: int = 42
    noise_fraction: float = 0.005  # sigma as a fraction of the template bbox diagonal
    aging_rate_range: tuple = (0.0015, 0.0035)
    atrophy_rate_range: tuple = (0.008, 0.016)
    atrophy_radius_range: tuple = (0.6, 0.8)
    n_bumps: int = 8
    profile: MissingnessProfile = MissingnessProfile()
    template_subdivisions: int = 3


@dataclass(eq=False)
class Cohort:
    template: TriangleMesh
    subjects: list
    splits: dict  # subject_id -> split
    config: CohortConfig
    months: tuple = CANONICAL_MONTHS

    def by_split(self, split: str, group: str | None = None) -> list:
        return [
            s for s in self.subjects
            if self.splits[s.subject_id] == split and (group is None or s.group == group)
        ]

    def subject(self, subject_id: str) -> Trajectory:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def mean_visits(self) -> float:
        return float(np.mean([len(s.observed) for s in self.subjects]))

    def complete_fraction(self) -> float:
        return float(np.mean([len(s.observed) == len(self.months) for s in self.subjects]))


def _terciles(values: np.ndarray) -> np.ndarray:
    if len(values) == 0:
        return np.zeros(0, dtype=int)
    ranks = np.argsort(np.argsort(values, kind="stable"), kind="stable")
    return (3 * ranks) // len(values)


def _stratified_split(groups, rates, rng: np.random.Generator) -> list:
    n = len(groups)
    out = [""] * n
    strata: dict = {}
    groups = np.asarray(groups)
    rates = np.asarray(rates)
    for g in sorted(set(groups.tolist())):
        idx = np.flatnonzero(groups == g)
        for t, i in zip(_terciles(rates[idx]), idx):
            strata.setdefault((g, int(t)), []).append(int(i))
    for key in sorted(strata):
        members = np.array(strata[key])
        members = members[rng.permutation(len(members))]
        k = len(members)
        n_val = int(round(SPLIT_FRACTIONS[1] * k))
        n_test = int(round(SPLIT_FRACTIONS[2] * k))
        for j, i in enumerate(members.tolist()):
            out[i] = "val" if j < n_val else "test" if j < n_val + n_test else "train"
    return out


def generate_cohort(
    n_subjects: int = 200,
    fraction_progressors: float = 0.3,
    seed: int = 42,
    profile: MissingnessProfile | None = None,
    config: CohortConfig | None = None,
) -> Cohort:
    """Deterministic cohort: same arguments give identical meshes, schedules and splits."""
    if n_subjects < 10:
        raise ValueError("a cohort needs at least 10 subjects")
    cfg = config or CohortConfig()
    cfg = CohortConfig(**{**cfg.__dict__, "n_subjects": n_subjects, "fraction_progressors": fraction_progressors,
                          "seed": seed, "profile": profile or cfg.profile})
    template = make_template(cfg.template_subdivisions)
    diag = template.bbox_diagonal()
    sigma = cfg.noise_fraction * diag
    center = anomaly_vertex(template)
    n_slots = len(CANONICAL_MONTHS)

    root = np.random.SeedSequence(seed)
    design_rng = np.random.default_rng(root.spawn(1)[0])
    n_prog = int(round(fraction_progressors * n_subjects))
    n_complete = int(round(cfg.profile.complete_fraction * n_subjects))
    is_prog = np.zeros(n_subjects, dtype=bool)
    is_prog[design_rng.permutation(n_subjects)[:n_prog]] = True
    is_complete = np.zeros(n_subjects, dtype=bool)
    is_complete[design_rng.permutation(n_subjects)[:n_complete]] = True

    subject_seeds = root.spawn(n_subjects + 1)[1:]
    subjects = []
    for i in range(n_subjects):
        rng = np.random.default_rng(subject_seeds[i])
        sid = f"S{i:04d}"
        group = "progressor" if is_prog[i] else "normal"
        slots = _visit_pattern(rng, cfg.profile, bool(is_complete[i]), n_slots)
        spec = SubjectSpec(
            subject_id=sid,
            group=group,
            bump_centers=tuple(int(c) for c in rng.integers(0, template.n_vertices, cfg.n_bumps)),
            bump_amplitudes=tuple(float(a) for a in rng.uniform(-0.025 * diag, 0.025 * diag, cfg.n_bumps)),
            bump_widths=tuple(float(w) for w in rng.uniform(0.4, 0.9, cfg.n_bumps)),
            atrophy_center=center,
            atrophy_radius=float(rng.uniform(*cfg.atrophy_radius_range)),
            atrophy_rate=float(rng.uniform(*cfg.atrophy_rate_range)) if group == "progressor" else 0.0,
            aging_rate=float(rng.uniform(*cfg.aging_rate_range)),
            noise_sigma=float(sigma),
            visit_months=tuple(CANONICAL_MONTHS[k] for k in slots),
            seed=int(rng.integers(0, 2**63 - 1)),
        )
        subjects.append(generate_subject(template, spec))
    rates = [s.spec.atrophy_rate if s.group == "progressor" else s.spec.aging_rate for s in subjects]
    split_list = _stratified_split([s.group for s in subjects], rates, design_rng)
    splits = {s.subject_id: sp for s, sp in zip(subjects, split_list)}
    return Cohort(template, subjects, splits, cfg)


# ------------------------------------------------------------------ archive


def _write_kv(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in items.items()), encoding="utf-8")


def _read_kv(path: Path) -> dict:
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_cohort(cohort: Cohort, directory) -> Path:
    """Write the archive: per-subject PLYs + ``subject.meta``, top-level ``cohort.manifest``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_mesh(cohort.template, directory / "template.ply", binary=True)
    for s in cohort.subjects:
        sub = directory / s.subject_id
        sub.mkdir(exist_ok=True)
        for m in s.observed_months:
            save_mesh(cohort.template.with_vertices(s.observed[m]), sub / f"month_{m:03}.ply", binary=True)
        for k, m in enumerate(cohort.months):
            save_mesh(cohort.template.with_vertices(s.ground_truth[k]), sub / f"gt_month_{m:03}.ply", binary=True)
        _write_kv(sub / "subject.meta", s.spec.to_meta(cohort.splits[s.subject_id]))
    cfg = cohort.config
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "seed": cfg.seed,
        "n_subjects": cfg.n_subjects,
        "fraction_progressors": repr(cfg.fraction_progressors),
        "noise_fraction": repr(cfg.noise_fraction),
        "months": ",".join(str(m) for m in cohort.months),
        "template_sha256": hashlib.sha256((directory / "template.ply").read_bytes()).hexdigest(),
    }
    for split in SPLITS:
        manifest[f"split.{split}"] = ",".join(s.subject_id for s in cohort.by_split(split))
    manifest["subjects"] = ",".join(s.subject_id for s in cohort.subjects)
    _write_kv(directory / "cohort.manifest", manifest)
    return directory


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x)


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x)


def load_cohort(directory) -> Cohort:
    directory = Path(directory)
    manifest_path = directory / "cohort.manifest"
    if not manifest_path.exists():
        raise ParseError(f"{directory}: no cohort.manifest")
    man = _read_kv(manifest_path)
    template = load_mesh(directory / "template.ply")
    months = _ints(man["months"])
    subjects, splits = [], {}
    for sid in man["subjects"].split(","):
        sub = directory / sid
        meta = _read_kv(sub / "subject.meta")
        spec = SubjectSpec(
            subject_id=sid,
            group=meta["group"],
            bump_centers=_ints(meta["bump_centers"]),
            bump_amplitudes=_floats(meta["bump_amplitudes"]),
            bump_widths=_floats(meta["bump_widths"]),
            atrophy_center=int(meta["atrophy_center"]),
            atrophy_radius=float(meta["atrophy_radius"]),
            atrophy_rate=float(meta["atrophy_rate"]),
            aging_rate=float(meta["aging_rate"]),
            noise_sigma=float(meta["noise_sigma"]),
            visit_months=_ints(meta["schedule"]),
            seed=int(meta["seed"]),
        )
        gt = np.stack([load_mesh(sub / f"gt_month_{m:03}.ply").vertices for m in months])
        observed = {m: load_mesh(sub / f"month_{m:03}.ply").vertices for m in spec.visit_months}
        traj = Trajectory(spec, months, gt, observed, template.with_vertices(gt[0]).vertex_normals())
        subjects.append(traj)
        splits[sid] = meta["split"]
    cfg = CohortConfig(
        n_subjects=int(man["n_subjects"]),
        fraction_progressors=float(man["fraction_progressors"]),
        seed=int(man["seed"]),
        noise_fraction=float(man["noise_fraction"]),
    )
    return Cohort(template, subjects, splits, cfg, months)
