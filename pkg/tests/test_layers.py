import numpy as np
import pytest
from scipy import sparse

from oracles import naive_spiral_conv
from transformesh import autodiff as ad
from transformesh.errors import AllMaskedError, ShapeError
from transformesh.hierarchy import build_hierarchy
from transformesh.layers import (
    MultiHeadAttention, PositionEmbedding, SpiralConv, TransformerBlock, TransformerEncoder, pool,
    transformer_encode, unpool,
)
from transformesh.mesh import icosphere
from transformesh.spiral import SpiralTable, build_spiral_table


def _meshes():
    h = build_hierarchy(icosphere(2), factors=(2, 2), spiral_lengths=9)
    return [icosphere(0), icosphere(1), icosphere(2)] + [lvl.mesh for lvl in h.levels[1:]]


@pytest.mark.parametrize("mesh", _meshes(), ids=lambda m: f"N{m.n_vertices}")
@pytest.mark.parametrize("length", [5, 9, 14])
def test_spiral_conv_matches_naive_loop(mesh, length):
    rng = np.random.default_rng(length)
    table = build_spiral_table(mesh, length)
    layer = SpiralConv(table, 4, 6, rng)
    layer.linear.bias.data = rng.normal(size=6)
    x = rng.normal(size=(mesh.n_vertices, 4))
    got = layer(x).data
    want = naive_spiral_conv(x, table.indices, layer.linear.weight.data, layer.linear.bias.data)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_spiral_conv_with_filler_matches_naive(tetra):
    rng = np.random.default_rng(0)
    table = build_spiral_table(tetra, 6)
    assert table.has_filler()
    layer = SpiralConv(table, 3, 2, rng)
    x = rng.normal(size=(4, 3))
    want = naive_spiral_conv(x, table.indices, layer.linear.weight.data, layer.linear.bias.data)
    assert np.max(np.abs(layer(x).data - want)) <= 1e-12


def test_spiral_conv_length_one_identity(ico2):
    layer = SpiralConv(build_spiral_table(ico2, 1), 3, 3, np.random.default_rng(0), activation="identity")
    layer.linear.weight.data = np.eye(3)
    x = np.random.default_rng(1).normal(size=(ico2.n_vertices, 3))
    assert np.array_equal(layer(x).data, x)


def test_spiral_conv_constant_field_on_icosahedron():
    mesh = icosphere(0)  # vertex-transitive
    table = build_spiral_table(mesh, 12)
    assert not table.has_filler()
    layer = SpiralConv(table, 2, 5, np.random.default_rng(3))
    out = layer(np.tile([0.7, -1.2], (12, 1))).data
    assert np.allclose(out, out[0], atol=1e-14)


def test_spiral_conv_batched_and_shape_error(ico2):
    layer = SpiralConv(build_spiral_table(ico2, 9), 3, 4, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, ico2.n_vertices, 3))
    out = layer(x).data
    assert out.shape == (2, ico2.n_vertices, 4)
    assert np.allclose(out[1], layer(x[1]).data)
    with pytest.raises(ShapeError):
        layer(np.ones((ico2.n_vertices - 1, 3)))


def test_spiral_conv_gradients(ico2):
    rng = np.random.default_rng(0)
    layer = SpiralConv(build_spiral_table(icosphere(1), 7), 2, 3, rng)
    x = ad.Tensor(rng.normal(size=(42, 2)), requires_grad=True)
    w = rng.normal(size=(42, 3))
    ad.backward(ad.tsum(layer(x) * w))
    num = ad.numerical_gradient(lambda: float(np.sum(layer(x).data * w)), x.data)
    assert ad.relative_error(x.grad, num) < 1e-6


def test_pool_unpool_contracts():
    h = build_hierarchy(icosphere(2), factors=(4,))
    lvl = h.levels[0]
    c = np.full((162, 2), 3.5)
    assert np.allclose(pool(c, lvl.down).data, 3.5)
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(pool(x, sparse.identity(5, format="csr")).data, x)
    with pytest.raises(ShapeError):
        unpool(np.ones((7, 2)), lvl.up)
    v = lvl.mesh.vertices
    disp = np.linalg.norm(unpool(pool(v, lvl.down), lvl.up).data - v, axis=1)
    assert disp.max() < lvl.mesh.mean_edge_length()


def test_zero_blocks_is_seq_plus_pos():
    rng = np.random.default_rng(0)
    enc = TransformerEncoder(0, 8, 2, 4, rng, final_norm=False)
    seq = rng.normal(size=(4, 8))
    assert np.array_equal(enc(seq, np.zeros(4, bool)).data, seq + enc.pos.table.data)


def test_single_unmasked_slot_attends_to_itself():
    rng = np.random.default_rng(1)
    mha = MultiHeadAttention(8, 2, rng)
    x = rng.normal(size=(4, 8))
    mask = np.array([False, True, True, True])
    w = mha.attention_weights(x, mask).data
    assert np.allclose(w[..., 0], 1.0) and not w[..., 1:].any()
    out = mha(x, mask).data
    v0 = mha.v(x).data[0]
    expected = mha.out(np.tile(v0, (4, 1))).data
    assert np.allclose(out, expected, atol=1e-12)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(2)
    mha = MultiHeadAttention(12, 3, rng)
    for _ in range(10):
        mask = rng.random(6) < 0.5
        mask[rng.integers(6)] = False
        w = mha.attention_weights(rng.normal(size=(6, 12)), mask).data
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-10)
        assert not w[..., mask].any()


def test_masking_isolation_bit_identical():
    rng = np.random.default_rng(3)
    enc = TransformerEncoder(2, 16, 4, 6, rng)
    seq = rng.normal(size=(6, 16))
    mask = np.array([False, True, False, True, True, False])
    base = enc(seq, mask).data
    for _ in range(5):
        noisy = seq.copy()
        noisy[mask] = rng.normal(size=(mask.sum(), 16)) * 100
        out = enc(noisy, mask).data
        assert np.array_equal(out[~mask], base[~mask])


def test_all_masked_raises():
    enc = TransformerEncoder(1, 8, 2, 3, np.random.default_rng(0))
    with pytest.raises(AllMaskedError):
        enc(np.zeros((3, 8)), np.ones(3, bool))
    with pytest.raises(AllMaskedError):
        transformer_encode(np.zeros((3, 8)), np.ones(3, bool), enc.blocks, enc.pos)


def test_functional_encode_matches_module():
    rng = np.random.default_rng(4)
    enc = TransformerEncoder(2, 8, 2, 3, rng)
    seq = rng.normal(size=(3, 8))
    mask = np.array([False, False, True])
    assert np.array_equal(transformer_encode(seq, mask, enc.blocks, enc.pos, enc.norm).data, enc(seq, mask).data)


def test_heads_must_divide_width():
    with pytest.raises(ShapeError):
        TransformerBlock(10, 3, np.random.default_rng(0))


def test_position_embedding_init():
    pe = PositionEmbedding(8, 512, np.random.default_rng(0))
    assert pe.table.data.shape == (8, 512)
    assert abs(pe.table.data.std() - 0.02) < 0.002


def test_parameter_names_unique_and_ordered():
    enc = TransformerEncoder(2, 8, 2, 3, np.random.default_rng(0))
    names = [n for n, _ in enc.named_parameters()]
    assert len(names) == len(set(names))
    assert names == [n for n, _ in enc.named_parameters()]
    assert names[0] == "pos.table" and names[1].startswith("blocks.0.")
