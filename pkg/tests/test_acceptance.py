"""End-to-end acceptance criteria at desk scale (642-vertex template, D=64, S=8, n=200, seed 42).

Each test records a one-line PASS/FAIL verdict that is repeated in the
terminal summary. The trained models are shared module fixtures; the whole
file takes roughly ten minutes on one CPU core.
"""

import hashlib
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from oracles import bfs_distances, naive_spiral_conv, planar_grid
from transformesh import autodiff as ad
from transformesh.cli import main as cli_main
from transformesh.cohort import CANONICAL_MONTHS, generate_cohort, generate_subject
from transformesh.experiments import PROTOCOLS, run_anomaly, run_protocol
from transformesh.gradcheck import END_TO_END_TOLERANCE, OP_TOLERANCE, end_to_end_check, op_checks
from transformesh.hierarchy import build_hierarchy, qem_decimate
from transformesh.layers import SpiralConv
from transformesh.mesh import TriangleMesh, derive_adjacency, icosphere
from transformesh.model import MISSING, CopyReference, ModelConfig, build_model
from transformesh.spiral import FILLER, build_spiral_table
from transformesh.training import AugmentationConfig, LossConfig, OptimizerConfig, batch_loss, train

pytestmark = pytest.mark.slow

# training budget shared by the TTM/FCBN comparison
EPOCHS = 80
LR = 1e-3
ANOMALY_EPOCHS = 30


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(200, 0.3, 42)


@pytest.fixture(scope="module")
def hierarchy(cohort):
    return build_hierarchy(cohort.template, factors=(4, 4), spiral_lengths=9)


def _fit(preset, hierarchy, subjects_train, subjects_val, epochs):
    model = build_model(ModelConfig.preset_config(preset), hierarchy)
    train(model, [s.to_batch() for s in subjects_train], [s.to_batch() for s in subjects_val],
          epochs=epochs, optimizer_cfg=OptimizerConfig(lr=LR))
    return model


@pytest.fixture(scope="module")
def trained(cohort, hierarchy):
    t0 = time.perf_counter()
    models = {p: _fit(p, hierarchy, cohort.by_split("train"), cohort.by_split("val"), EPOCHS)
              for p in ("ttm", "fcbn")}
    return models, time.perf_counter() - t0


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_correctness(acceptance):
    t0 = time.perf_counter()
    ops = op_checks(0)
    e2e = end_to_end_check(0)
    elapsed = time.perf_counter() - t0
    worst_op = max(ops, key=lambda c: c.error)
    passed = (all(c.error <= OP_TOLERANCE for c in ops) and e2e.error <= END_TO_END_TOLERANCE and elapsed < 60)
    acceptance(1, passed, f"{len(ops)} ops, worst {worst_op.name} {worst_op.error:.1e} (<= {OP_TOLERANCE:g}); "
                          f"end-to-end {e2e.error:.1e} (<= {END_TO_END_TOLERANCE:g}); {elapsed:.1f}s (< 60s)")
    assert passed


# ---------------------------------------------------------------- 2


def _small_meshes():
    tetra = TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]),
                         np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]))
    h = build_hierarchy(icosphere(2), factors=(2, 2), spiral_lengths=9)
    return [tetra, icosphere(0), icosphere(1), icosphere(2)] + [lvl.mesh for lvl in h.levels[1:]]


def _spiral_matches_bfs(mesh, length) -> bool:
    adj = derive_adjacency(mesh)
    table = build_spiral_table(mesh, length)
    for i in range(mesh.n_vertices):
        row = [j for j in table.indices[i] if j != FILLER]
        dist = bfs_distances(adj, i)
        d = [dist[j] for j in row]
        if row[0] != i or len(set(row)) != len(row) or d != sorted(d):
            return False
        if not {j for j, dj in dist.items() if dj < d[-1]} <= set(row):
            return False
        if len(row) < length and len(row) != mesh.n_vertices:
            return False
    return True


def test_criterion_2_oracle_equivalence(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    meshes = _small_meshes()
    worst = 0.0
    tables_ok = True
    for mesh in meshes:
        assert mesh.n_vertices <= 200
        for length in (7, 9, 19):
            tables_ok &= _spiral_matches_bfs(mesh, length)
            table = build_spiral_table(mesh, length)
            layer = SpiralConv(table, 4, 6, rng)
            layer.linear.bias.data = rng.normal(size=6)
            x = rng.normal(size=(mesh.n_vertices, 4))
            want = naive_spiral_conv(x, table.indices, layer.linear.weight.data, layer.linear.bias.data)
            worst = max(worst, float(np.max(np.abs(layer(x).data - want))))
    elapsed = time.perf_counter() - t0
    passed = worst <= 1e-12 and tables_ok and elapsed < 10
    acceptance(2, passed, f"{len(meshes)} meshes (<= 200 vertices): spiral_conv max diff {worst:.1e} (<= 1e-12); "
                          f"BFS-ring tables {'match' if tables_ok else 'MISMATCH'}; {elapsed:.1f}s (< 10s)")
    assert passed


# ---------------------------------------------------------------- 3


def test_criterion_3_decimation_soundness(acceptance, hierarchy):
    coarse, _, _ = qem_decimate(planar_grid(5), 8)
    centered = coarse.vertices - coarse.vertices.mean(axis=0)
    residual = float(np.linalg.svd(centered, compute_uv=False)[-1])
    manifold = all(lvl.mesh.is_closed_manifold() and lvl.mesh.euler_characteristic() == 2
                   for lvl in hierarchy.levels)
    x = hierarchy.levels[0].mesh.vertices
    ratios = []
    for lvl in hierarchy.levels[:-1]:
        disp = np.max(np.linalg.norm(lvl.up @ (lvl.down @ x) - x, axis=1))
        ratios.append(disp / lvl.mesh.mean_edge_length())
        x = lvl.down @ x
    passed = residual < 1e-9 and manifold and max(ratios) < 1.0
    acceptance(3, passed, f"planar residual {residual:.1e} (< 1e-9); levels {hierarchy.vertex_counts()} closed, "
                          f"chi=2: {manifold}; up(down(x)) max displacement / edge length "
                          f"{', '.join(f'{r:.2f}' for r in ratios)} (< 1)")
    assert passed


# ---------------------------------------------------------------- 4


def test_criterion_4_masking_isolation(acceptance, cohort, hierarchy):
    model = build_model(ModelConfig.preset_config("ttm"), hierarchy)
    rng = np.random.default_rng(0)
    for p in model.decoder.parameters():  # make the output depend on the latents
        p.data = p.data + rng.normal(0.0, 0.01, size=p.data.shape)
    subj = next(s for s in cohort.by_split("train") if 3 <= len(s.observed) <= 6)
    batch = subj.to_batch()
    miss = batch.status == MISSING

    def loss_and_grads(b):
        model.zero_grad()
        loss = batch_loss(model, b, LossConfig())
        ad.backward(loss)
        return loss.item(), [p.grad.copy() for p in model.parameters()]

    base_out = model.predict(batch)
    base_loss, base_grads = loss_and_grads(batch)
    outputs_same = loss_same = grads_same = True
    for _ in range(3):
        inputs, targets = batch.inputs.copy(), batch.targets.copy()
        inputs[miss] = rng.normal(0, 10, size=inputs[miss].shape)
        targets[miss] = rng.normal(0, 10, size=targets[miss].shape)
        junk = replace(batch, inputs=inputs, targets=targets)
        outputs_same &= np.array_equal(model.predict(junk), base_out)
        loss, grads = loss_and_grads(junk)
        loss_same &= loss == base_loss
        grads_same &= all(np.array_equal(a, b) for a, b in zip(grads, base_grads))

    # central differences w.r.t. missing-slot coordinates: exactly zero
    probe = batch.inputs.copy()
    cfg = LossConfig()

    def f():
        with ad.no_grad():
            return batch_loss(model, replace(batch, inputs=probe), cfg).item()

    slot = int(np.flatnonzero(miss)[0])
    fd = []
    for v in rng.choice(probe.shape[1], 20, replace=False):
        for c in range(3):
            old = probe[slot, v, c]
            probe[slot, v, c] = old + 1e-3
            up = f()
            probe[slot, v, c] = old - 1e-3
            down = f()
            probe[slot, v, c] = old
            fd.append((up - down) / 2e-3)
    fd_zero = all(g == 0.0 for g in fd)
    passed = outputs_same and loss_same and grads_same and fd_zero
    acceptance(4, passed, f"{int(miss.sum())} missing slots perturbed: outputs bit-identical {outputs_same}, "
                          f"loss identical {loss_same}, parameter gradients identical {grads_same}, "
                          f"d loss / d missing content == 0 on {len(fd)} coords {fd_zero}")
    assert passed


# ---------------------------------------------------------------- 5


def test_criterion_5_overfit_single_subject(acceptance, cohort, hierarchy):
    # one fully observed, noise-free progressor so the loss can approach zero
    src = next(s for s in cohort.subjects if s.group == "progressor")
    subj = generate_subject(cohort.template, replace(src.spec, noise_sigma=0.0, visit_months=CANONICAL_MONTHS))
    model = build_model(ModelConfig.preset_config("ttm"), hierarchy)
    t0 = time.perf_counter()
    state = train(model, [subj.to_batch()], epochs=200, optimizer_cfg=OptimizerConfig(lr=5e-4),
                  aug_cfg=AugmentationConfig(p_substitute=0.0))
    elapsed = time.perf_counter() - t0
    losses = [h["train_loss"] for h in state.history]
    reduction = 1.0 - min(losses) / losses[0]
    passed = reduction >= 0.90 and elapsed < 300
    acceptance(5, passed, f"training loss {losses[0]:.4g} -> {min(losses):.4g}, reduction {100 * reduction:.1f}% "
                          f"(>= 90%) in 200 epochs, {elapsed:.0f}s (< 300s)")
    assert passed


# ---------------------------------------------------------------- 6


def test_criterion_6_protocol_ordering(acceptance, cohort, hierarchy, trained):
    models, train_seconds = trained
    t0 = time.perf_counter()
    test = cohort.by_split("test")
    med = {name: {p: run_protocol(p, m, test).median for p in PROTOCOLS}
           for name, m in [("ttm", models["ttm"]), ("fcbn", models["fcbn"]), ("copy", CopyReference())]}
    elapsed = train_seconds + time.perf_counter() - t0
    gains = {p: 1.0 - med["ttm"][p] / med["copy"][p] for p in PROTOCOLS}
    fcbn_ratio = med["ttm"]["interpolation"] / med["fcbn"]["interpolation"]
    full = {p: build_model(ModelConfig.preset_config(p, "full"), hierarchy).n_parameters() for p in ("ttm", "fcbn")}
    passed = (all(g >= 0.05 for g in gains.values()) and fcbn_ratio <= 1.02
              and full["ttm"] < full["fcbn"] and elapsed < 3600)
    table = "; ".join(f"{p} x100 ttm {100 * med['ttm'][p]:.3f} fcbn {100 * med['fcbn'][p]:.3f} "
                      f"copy {100 * med['copy'][p]:.3f} (gain {100 * gains[p]:.1f}%)" for p in PROTOCOLS)
    acceptance(6, passed, f"{table}; ttm/fcbn interpolation {fcbn_ratio:.4f} (<= 1.02); full-scale (D=512) params "
                          f"ttm {full['ttm']:,} < fcbn {full['fcbn']:,}; {elapsed:.0f}s (< 3600s)")
    assert passed


# ---------------------------------------------------------------- 7


def test_criterion_7_cohort_statistics(acceptance, cohort):
    mean_visits = cohort.mean_visits()
    complete = cohort.complete_fraction()
    passed = abs(mean_visits - 3.25) <= 0.325 and 0.01 <= complete <= 0.05
    acceptance(7, passed, f"mean visits {mean_visits:.3f} (3.25 +/- 10%), complete sequences "
                          f"{100 * complete:.1f}% (1-5%)")
    assert passed


# ---------------------------------------------------------------- 8


def test_criterion_8_anomaly_localization(acceptance, cohort, hierarchy):
    normals_train = cohort.by_split("train", "normal")
    normals_val = cohort.by_split("val", "normal")
    model = _fit("ttm", hierarchy, normals_train, normals_val, ANOMALY_EPOCHS)
    groups = {s.subject_id: s.group for s in normals_train + normals_val}
    progressors = [s for s in cohort.subjects if s.group == "progressor"]
    res = run_anomaly(model, progressors, groups)
    frac = res.fraction_above(1.5)
    passed = frac >= 0.70
    ratios = np.array(list(res.ratios.values()))
    acceptance(8, passed, f"{len(ratios)} progressors with visits >= 24 months: inside/outside error ratio "
                          f">= 1.5 in {100 * frac:.0f}% (>= 70%); median ratio {np.median(ratios):.2f}")
    assert passed


# ---------------------------------------------------------------- 9


def _digests(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(acceptance, tmp_path):
    runs = []
    for name in ("a", "b"):
        root = tmp_path / name
        common = ["--results-dir", str(root / "results"), "--cohort-dir", str(root / "cohort"),
                  "--hierarchy-path", str(root / "hier.bin"), "--epochs", "2"]
        for cmd in ("generate-cohort", "train", "evaluate"):
            assert cli_main([cmd] + common) == 0
        runs.append((_digests(root / "cohort"), (root / "results" / "run" / "losses.csv").read_bytes(),
                     _digests(root / "results" / "metrics")))
    (ca, la, ea), (cb, lb, eb) = runs
    passed = ca == cb and la == lb and ea == eb
    acceptance(9, passed, f"cohort archive {len(ca)} files identical {ca == cb}; losses.csv identical {la == lb}; "
                          f"{len(ea)} evaluation CSVs identical {ea == eb}")
    assert passed
