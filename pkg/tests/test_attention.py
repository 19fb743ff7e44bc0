import math

import numpy as np
import pytest
import torch

from ttamotion.attention import (
    BlockState,
    SparseRelayBlock,
    build_spatial_masks,
    build_temporal_masks,
    init_relays,
    masked_attention,
)
from ttamotion.motion import ShapeError, SkeletonTopology

CHAIN3 = SkeletonTopology(3, ((0, 1), (1, 2)))


def t(x, dtype=torch.float64):
    return torch.tensor(x, dtype=dtype)


def reference_attention(q, k, v, scale):
    """Dense softmax attention written out with numpy."""
    s = q @ k.T / scale
    w = np.exp(s - s.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


def test_uniform_weights_by_symmetry():
    out = masked_attention(t([[0.0]]), t([[0.0], [0.0]]), t([[1.0], [3.0]]), torch.ones(1, 2, dtype=torch.bool), 1.0)
    assert out.tolist() == [[2.0]]


def test_single_allowed_key():
    mask = torch.tensor([[True, False]])
    out = masked_attention(t([[0.0]]), t([[0.0], [0.0]]), t([[1.0], [3.0]]), mask, 1.0)
    assert out.tolist() == [[1.0]]


def test_two_key_softmax_against_scalar_oracle():
    out = masked_attention(t([[1.0]]), t([[1.0], [0.0]]), t([[1.0], [0.0]]), torch.ones(1, 2, dtype=torch.bool), 1.0)
    oracle = math.exp(1.0) / (math.exp(1.0) + math.exp(0.0))
    assert out.item() == pytest.approx(oracle, abs=1e-12)
    assert out.item() == pytest.approx(0.73106, abs=1e-5)


def test_empty_mask_row_rejected():
    mask = torch.tensor([[True, False], [False, False]])
    with pytest.raises(ValueError):
        masked_attention(t([[0.0], [1.0]]), t([[0.0], [0.0]]), t([[1.0], [3.0]]), mask, 1.0)


@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-6), (torch.float64, 1e-12)])
def test_weights_zero_off_mask_and_rows_normalised(dtype, tol):
    g = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(2, 7, 5, generator=g, dtype=dtype) for _ in range(3))
    mask = torch.rand(7, 7, generator=g) < 0.4
    mask[:, 3] = True
    _, w = masked_attention(q, k, v, mask, math.sqrt(5), return_weights=True)
    assert torch.all(w[:, ~mask] == 0)
    assert torch.all(w[:, mask] > 0)
    assert torch.max(torch.abs(w.sum(-1) - 1)) <= tol


def test_dense_mask_matches_reference():
    rng = np.random.default_rng(0)
    q, k, v = rng.normal(size=(6, 4)), rng.normal(size=(9, 4)), rng.normal(size=(9, 4))
    out = masked_attention(t(q, torch.float32), t(k, torch.float32), t(v, torch.float32),
                           torch.ones(6, 9, dtype=torch.bool), 2.0)
    assert np.max(np.abs(out.numpy() - reference_attention(q, k, v, 2.0))) <= 1e-6


# -- masks -----------------------------------------------------------------


def test_spatial_masks_two_joint_chain():
    jm, rm = build_spatial_masks(SkeletonTopology(2, ((0, 1),)))
    assert jm[0].tolist() == [True, True, True]
    assert rm.tolist() == [[True, True, True]]


def test_spatial_masks_star_against_edge_enumeration():
    bones = ((0, 1), (0, 2), (0, 3), (0, 4))
    jm, rm = build_spatial_masks(SkeletonTopology(5, bones))
    for i in range(5):
        allowed = {i, 5} | {c for p, c in bones if p == i} | {p for p, c in bones if c == i}
        assert {j for j in range(6) if jm[i, j]} == allowed
    assert {j for j in range(6) if jm[0, j]} == {0, 1, 2, 3, 4, 5}
    assert rm.all()


def test_temporal_masks():
    fm, rm = build_temporal_masks(1)
    assert fm.tolist() == [[True, True]] and rm.all()
    fm, rm = build_temporal_masks(3)
    assert fm[1].tolist() == [True, True, True, True]
    assert fm[0].tolist() == [True, True, False, True]
    assert fm[2].tolist() == [False, True, True, True]
    assert rm.shape == (1, 4) and rm.all()
    fm, _ = build_temporal_masks(6)
    for i in range(6):
        assert {j for j in range(7) if fm[i, j]} == {j for j in (i - 1, i, i + 1) if 0 <= j < 6} | {6}


# -- blocks ----------------------------------------------------------------


def make_block(topo=CHAIN3, L=4, C=6, H=2, d=3, seed=0):
    torch.manual_seed(seed)
    return SparseRelayBlock(topo, L, C, H, d).double()


def random_state(L, N, C, seed=1, batch=(2,)):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(*batch, L, N, C, generator=g, dtype=torch.float64)
    return BlockState(x, torch.randn(*batch, L, C, generator=g, dtype=torch.float64),
                      torch.randn(*batch, N, C, generator=g, dtype=torch.float64))


def test_single_joint_skeleton():
    block = make_block(SkeletonTopology(1, ()), L=3)
    x = torch.randn(1, 3, 1, 6, dtype=torch.float64)
    with torch.no_grad():
        for lin in (block.spatial.node.w_q, block.spatial.node.w_k, block.spatial.node.w_v,
                    block.spatial.relay.w_q, block.spatial.relay.w_k, block.spatial.relay.w_v):
            lin.weight.zero_()
    state = BlockState(x, x[..., 0, :], x.mean(-3))
    out = block.ssrt_forward(state)
    assert out.joint_features.shape == x.shape
    assert torch.isfinite(out.joint_features).all() and torch.isfinite(out.spatial_relay).all()
    assert block.spatial.node_mask.tolist() == [[True, True]]


def _uniform_oracle(proj, tokens, mask):
    """Average the value projections over each allowed set, then apply the output map (numpy)."""
    V = tokens @ proj.w_v.weight.detach().numpy().T
    m = mask.numpy().astype(float)
    avg = np.einsum("qk,...kc->...qc", m / m.sum(1, keepdims=True), V)
    return avg @ proj.w_o.weight.detach().numpy().T + proj.w_o.bias.detach().numpy()


def _zero_qk(att):
    with torch.no_grad():
        for p in (att.node, att.relay):
            p.w_q.weight.zero_()
            p.w_k.weight.zero_()


def test_ssrt_zero_query_key_is_uniform_average():
    block = make_block()
    _zero_qk(block.spatial)
    state = random_state(4, 3, 6)
    out = block.ssrt_forward(state)
    tokens = torch.cat([state.joint_features, state.spatial_relay[..., None, :]], -2).numpy()
    exp_nodes = _uniform_oracle(block.spatial.node, tokens, block.spatial.node_mask)
    exp_relay = _uniform_oracle(block.spatial.relay, tokens, block.spatial.relay_mask)[..., 0, :]
    assert np.allclose(out.joint_features.detach().numpy(), exp_nodes, atol=1e-12)
    assert np.allclose(out.spatial_relay.detach().numpy(), exp_relay, atol=1e-12)
    assert torch.equal(out.temporal_relay, state.temporal_relay)


def test_tsrt_zero_query_key_is_uniform_average():
    block = make_block()
    _zero_qk(block.temporal)
    state = random_state(4, 3, 6)
    out = block.tsrt_forward(state)
    traj = state.joint_features.transpose(-2, -3)
    tokens = torch.cat([traj, state.temporal_relay[..., None, :]], -2).numpy()
    exp = _uniform_oracle(block.temporal.node, tokens, block.temporal.node_mask)
    assert np.allclose(out.joint_features.transpose(-2, -3).detach().numpy(), exp, atol=1e-12)
    exp_relay = _uniform_oracle(block.temporal.relay, tokens, block.temporal.relay_mask)[..., 0, :]
    assert np.allclose(out.temporal_relay.detach().numpy(), exp_relay, atol=1e-12)
    assert torch.equal(out.spatial_relay, state.spatial_relay)


def test_tsrt_single_frame():
    block = make_block(L=1)
    assert block.temporal.node_mask.tolist() == [[True, True]]
    out = block.tsrt_forward(random_state(1, 3, 6))
    assert out.joint_features.shape == (2, 1, 3, 6)


def test_shapes_preserved_and_checked():
    block = make_block()
    state = random_state(4, 3, 6)
    for fn in (block.ssrt_forward, block.tsrt_forward, block):
        out = fn(state)
        assert [o.shape for o in out] == [s.shape for s in state]
    with pytest.raises(ShapeError):
        block(random_state(5, 3, 6))


def test_zero_block_is_identity():
    block = make_block()
    with torch.no_grad():
        for p in block.parameters():
            p.zero_()
    state = random_state(4, 3, 6)
    out = block(state)
    for o, s in zip(out, state):
        assert torch.equal(o, s)


def test_block_gradient_matches_finite_differences():
    block = make_block()
    state = random_state(4, 3, 6, batch=())
    x = state.joint_features.clone().requires_grad_(True)
    g = torch.Generator().manual_seed(7)
    w = [torch.randn(s.shape, generator=g, dtype=torch.float64) for s in state]

    def f(xv):
        out = block(BlockState(xv, state.spatial_relay, state.temporal_relay))
        return sum((o * wi).sum() for o, wi in zip(out, w))

    (grad,) = torch.autograd.grad(f(x), x)
    h = 1e-5
    for idx in [(0, 0, 0), (1, 2, 3), (3, 1, 5), (2, 0, 1)]:
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[idx] += h
        xm[idx] -= h
        fd = (f(xp) - f(xm)).item() / (2 * h)
        an = grad[idx].item()
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an))


def test_block_finite_for_large_inputs():
    block = make_block()
    state = random_state(4, 3, 6)
    big = BlockState(*(s * 1e3 for s in state))
    out = block(big)
    assert all(torch.isfinite(o).all() for o in out)


def test_joint_relabelling_permutes_ssrt_output():
    topo = SkeletonTopology(5, ((0, 1), (1, 2), (1, 3), (3, 4)))
    perm = [3, 0, 4, 2, 1]
    block = make_block(topo, seed=3)
    block_p = SparseRelayBlock(topo.permuted(perm), 4, 6, 2, 3).double()
    block_p.load_state_dict(block.state_dict())
    state = random_state(4, 5, 6)
    out = block.ssrt_forward(state)
    state_p = BlockState(state.joint_features[..., perm, :], state.spatial_relay, state.temporal_relay[..., perm, :])
    out_p = block_p.ssrt_forward(state_p)
    assert torch.allclose(out_p.joint_features, out.joint_features[..., perm, :], atol=1e-12)
    assert torch.allclose(out_p.spatial_relay, out.spatial_relay, atol=1e-12)


def test_init_relays_are_means():
    x = torch.randn(2, 4, 3, 5)
    s = init_relays(x)
    assert torch.allclose(s.spatial_relay, x.mean(2)) and torch.allclose(s.temporal_relay, x.mean(1))
