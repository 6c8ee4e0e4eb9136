import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pgat.agnn import (
    PGAT,
    AttentionBlock,
    CheckpointError,
    SubgraphTensor,
    count_parameters,
    load_checkpoint,
    manifest_lines,
    parameter_vector,
    save_checkpoint,
    stack_subgraphs,
)
from pgat.numerics import DimensionError


def rand_graph(rng, n, dim, b=1):
    x = torch.as_tensor(rng.normal(size=(b, dim, n)))
    p = torch.as_tensor(rng.normal(size=(b, 3, n)))
    return SubgraphTensor(x, p, torch.ones(b, n, dtype=torch.bool))


def zero_residual_branches(model):
    with torch.no_grad():
        for layer in model.layers:
            for block in (layer.intra, layer.inter):
                block.mlp.last.weight.zero_()
                block.mlp.last.bias.zero_()


# -- scalar-loop oracle for one attention block -----------------------------

def loop_linear(w, b, col):
    return [sum(w[i][k] * col[k] for k in range(len(col))) + b[i] for i in range(len(w))]


def loop_norm(cols, gamma, beta, eps=1e-5):
    rows = len(cols[0])
    out = [list(c) for c in cols]
    for i in range(rows):
        vals = [c[i] for c in cols]
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        for j, c in enumerate(cols):
            out[j][i] = gamma[i] * (c[i] - mu) / math.sqrt(var + eps) + beta[i]
    return out


def loop_block(block: AttentionBlock, xr, xs, heads):
    """xr, xs: lists of node columns."""
    at = block.attn
    W = lambda lin: (lin.weight.tolist(), lin.bias.tolist())
    q = [loop_linear(*W(at.query), c) for c in xr]
    k = [loop_linear(*W(at.key), c) for c in xs]
    v = [loop_linear(*W(at.value), c) for c in xs]
    dim = len(xr[0])
    dk = dim // heads
    msgs = []
    for n in range(len(xr)):
        m = [0.0] * dim
        for h in range(heads):
            rows = range(h * dk, (h + 1) * dk)
            s = [sum(q[n][r] * k[j][r] for r in rows) / math.sqrt(dk) for j in range(len(xs))]
            top = max(s)
            e = [math.exp(x - top) for x in s]
            z = sum(e)
            for r in rows:
                m[r] = sum(e[j] / z * v[j][r] for j in range(len(xs)))
        msgs.append(loop_linear(*W(at.merge), m))
    h = [list(xr[n]) + msgs[n] for n in range(len(xr))]
    mlp = block.mlp
    for i, lin in enumerate(mlp.linears):
        h = [loop_linear(*W(lin), c) for c in h]
        if i < len(mlp.norms):
            h = loop_norm(h, mlp.norms[i].gamma.tolist(), mlp.norms[i].beta.tolist())
            h = [[max(0.0, x) for x in c] for c in h]
    return [[xr[n][i] + h[n][i] for i in range(dim)] for n in range(len(xr))]


def test_attention_block_matches_scalar_loops():
    torch.manual_seed(0)
    block = AttentionBlock(4, 2)
    rng = np.random.default_rng(0)
    xr, xs = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    out = block(torch.as_tensor(xr)[None], torch.ones(1, 2, dtype=torch.bool),
                torch.as_tensor(xs)[None], torch.ones(1, 3, dtype=torch.bool))[0]
    ref = np.array(loop_block(block, xr.T.tolist(), xs.T.tolist(), 2)).T
    assert np.abs(out.detach().numpy() - ref).max() < 1e-12


def test_single_sender_gets_all_weight():
    torch.manual_seed(1)
    block = AttentionBlock(4, 2)
    x_r = torch.randn(1, 4, 3, dtype=torch.float64)
    x_s = torch.randn(1, 4, 1, dtype=torch.float64)
    w = block.attn.weights(x_r, x_s, torch.ones(1, 1, dtype=torch.bool))
    assert torch.equal(w, torch.ones_like(w))


def test_zero_mlp_output_is_identity():
    model = PGAT(8, 2, 2, seed=0)
    zero_residual_branches(model)
    rng = np.random.default_rng(2)
    a, b = rand_graph(rng, 3, 8), rand_graph(rng, 5, 8)
    fa, fb = model(a, b)
    assert (fa - model.encode(a)).abs().max() < 1e-12
    assert (fb - model.encode(b)).abs().max() < 1e-12


def test_zero_layers_returns_encoding():
    model = PGAT(8, 0, 2, seed=0)
    rng = np.random.default_rng(3)
    a, b = rand_graph(rng, 4, 8), rand_graph(rng, 2, 8)
    fa, fb = model(a, b)
    assert torch.equal(fa, model.encode(a)) and torch.equal(fb, model.encode(b))


def test_encode_is_descriptor_plus_position_code():
    model = PGAT(8, 1, 2, seed=0)
    rng = np.random.default_rng(4)
    g = rand_graph(rng, 4, 8)
    code = model.pos_encoder(g.p, g.mask)
    assert torch.allclose(model.encode(g), g.x + code, atol=1e-15)


def test_output_shapes_follow_inputs():
    model = PGAT(8, 2, 2, seed=0)
    rng = np.random.default_rng(5)
    fa, fb = model(rand_graph(rng, 3, 8, b=2), rand_graph(rng, 6, 8, b=2))
    assert fa.shape == (2, 8, 3) and fb.shape == (2, 8, 6)


def test_dimension_errors():
    model = PGAT(8, 1, 2, seed=0)
    rng = np.random.default_rng(6)
    with pytest.raises(DimensionError):
        model(rand_graph(rng, 3, 6), rand_graph(rng, 3, 6))
    with pytest.raises(DimensionError):
        model(rand_graph(rng, 3, 8, b=2), rand_graph(rng, 3, 8, b=1))
    with pytest.raises(DimensionError):
        PGAT(10, 1, 4)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5), st.integers(2, 5), st.integers(1, 4))
def test_padding_does_not_change_valid_outputs(seed, na, nb, extra):
    rng = np.random.default_rng(seed)
    model = PGAT(8, 2, 2, seed=seed % 1000)
    a, b = rand_graph(rng, na, 8), rand_graph(rng, nb, 8)
    fa, fb = model(a, b)
    big_a = a.pad_to(na + extra)
    big_a.x[..., na:] = torch.as_tensor(rng.normal(size=(1, 8, extra)) * 1e3)
    big_a.p[..., na:] = torch.as_tensor(rng.normal(size=(1, 3, extra)) * 1e3)
    pa, pb = model(big_a, b)
    assert (pa[..., :na] - fa).abs().max() <= 1e-9
    assert (pb - fb).abs().max() <= 1e-9
    assert torch.all(pa[..., na:] == 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_node_permutation_is_equivariant(seed, n):
    rng = np.random.default_rng(seed)
    model = PGAT(8, 2, 2, seed=1)
    a, b = rand_graph(rng, n, 8), rand_graph(rng, 4, 8)
    perm = torch.as_tensor(rng.permutation(n))
    fa, fb = model(a, b)
    ga, gb = model(SubgraphTensor(a.x[..., perm], a.p[..., perm], a.mask[..., perm]), b)
    assert (ga - fa[..., perm]).abs().max() <= 1e-9
    assert (gb - fb).abs().max() <= 1e-9


def test_batch_entries_are_independent():
    rng = np.random.default_rng(7)
    model = PGAT(8, 2, 2, seed=2)
    a, b = rand_graph(rng, 4, 8, b=3), rand_graph(rng, 4, 8, b=3)
    fa, _ = model(a, b)
    one = lambda g: SubgraphTensor(g.x[1:2], g.p[1:2], g.mask[1:2])
    fa1, _ = model(one(a), one(b))
    assert (fa[1:2] - fa1).abs().max() <= 1e-12


def test_reset_is_seeded():
    a, b = PGAT(8, 2, 2, seed=3), PGAT(8, 2, 2, seed=3)
    assert torch.equal(parameter_vector(a), parameter_vector(b))
    assert not torch.equal(parameter_vector(a), parameter_vector(PGAT(8, 2, 2, seed=4)))


def test_default_parameter_count_near_twelve_million():
    model = PGAT(seed=None)
    total = count_parameters(model)
    assert total == 11_891_200
    assert abs(total - 12e6) / 12e6 < 0.05


def test_stack_subgraphs_pads_and_masks():
    t = stack_subgraphs([(np.ones((2, 4)), np.zeros((2, 3))), (np.ones((3, 4)), np.zeros((3, 3)))])
    assert t.x.shape == (2, 4, 3)
    assert t.mask.tolist() == [[True, True, False], [True, True, True]]
    assert torch.all(t.x[0, :, 2] == 0)


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    model = PGAT(8, 2, 2, seed=5)
    path = tmp_path / "m.pgat"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert (back.dim, back.num_layers, back.heads) == (8, 2, 2)
    assert torch.equal(parameter_vector(back), parameter_vector(model))
    assert (tmp_path / "m.pgat.manifest").read_text().splitlines() == manifest_lines(model)


def test_checkpoint_is_byte_stable(tmp_path):
    save_checkpoint(PGAT(8, 1, 2, seed=6), tmp_path / "a.pgat")
    save_checkpoint(PGAT(8, 1, 2, seed=6), tmp_path / "b.pgat")
    assert (tmp_path / "a.pgat").read_bytes() == (tmp_path / "b.pgat").read_bytes()


@pytest.mark.parametrize("damage", ["flip", "truncate", "empty"])
def test_checkpoint_corruption_detected(tmp_path, damage):
    path = tmp_path / "m.pgat"
    save_checkpoint(PGAT(8, 1, 2, seed=7), path)
    raw = bytearray(path.read_bytes())
    if damage == "flip":
        raw[40] ^= 0xFF
    elif damage == "truncate":
        raw = raw[: len(raw) // 2]
    else:
        raw = bytearray()
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.pgat")
