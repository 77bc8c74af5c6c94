import math
import random

import numpy as np
import pytest

import dsta.tensor as T
from dsta.attention import (
    AttentionScheme,
    QKVProjection,
    TokenGrid,
    attention_flops,
    count_attention_macs,
    joint_attention,
    key_mask,
    multi_head,
    scaled_attention,
    spatial_attention,
    temporal_attention,
)
from dsta.errors import ConfigError, ContractError, DimensionError
from dsta.model import ModelConfig
from dsta.tensor import Tensor

from conftest import rand_tensor


# -- independent brute-force oracle (explicit loops, no engine code) --------------


def oracle_attention(q_rows, k_rows, v_rows):
    dh = len(q_rows[0])
    out = []
    for q in q_rows:
        scores = [sum(qi * ki for qi, ki in zip(q, k)) / math.sqrt(dh) for k in k_rows]
        m = max(scores)
        exps = [math.exp(s - m) for s in scores]
        z = sum(exps)
        weights = [e / z for e in exps]
        assert abs(sum(weights) - 1.0) <= 1e-12
        assert all(0.0 <= w <= 1.0 for w in weights)
        out.append([sum(w * v[j] for w, v in zip(weights, v_rows)) for j in range(len(v_rows[0]))])
    return out


def rows_of(t):
    r, c = t.shape
    return [[t.data[i * c + j] for j in range(c)] for i in range(r)]


def make_grid(rng, n_patches, n_frames, dim, per_frame_cls=False):
    count = n_frames * (n_patches + 1) if per_frame_cls else n_frames * n_patches + 1
    return TokenGrid(rand_tensor((count, dim), rng), n_patches, n_frames, per_frame_cls)


def make_proj(rng, dim, heads):
    return QKVProjection(
        rand_tensor((dim, dim), rng),
        rand_tensor((dim, dim), rng),
        rand_tensor((dim, dim), rng),
        heads,
    )


def project_rows(grid, proj):
    """q/k/v rows computed independently with plain loops."""
    x = rows_of(grid.tokens)

    def apply(w):
        wr = rows_of(w)
        return [[sum(xi * wr[o][i] for i, xi in enumerate(row)) for o in range(len(wr))] for row in x]

    return apply(proj.wq), apply(proj.wk), apply(proj.wv)


def head_cols(rows, proj, head):
    dh = proj.head_dim
    return [r[head * dh : (head + 1) * dh] for r in rows]


# -- scaled attention ---------------------------------------------------------------


def test_single_key_returns_value(rng):
    q = rand_tensor((3, 4), rng)
    k = rand_tensor((1, 4), rng)
    v = rand_tensor((1, 4), rng)
    out = scaled_attention(q, k, v)
    for row in rows_of(out):
        assert row == pytest.approx(list(v.data), abs=1e-15)


def test_identical_keys_average_values(rng):
    q = rand_tensor((2, 4), rng)
    k_row = [rng.uniform(-1, 1) for _ in range(4)]
    k = Tensor.of([k_row] * 5)
    v = rand_tensor((5, 4), rng)
    out = rows_of(scaled_attention(q, k, v))
    vv = rows_of(v)
    expected = [sum(vv[i][j] for i in range(5)) / 5 for j in range(4)]
    for row in out:
        assert row == pytest.approx(expected, abs=1e-12)


def test_scaled_attention_matches_loop_oracle(rng):
    q = rand_tensor((3, 4), rng)
    k = rand_tensor((5, 4), rng)
    v = rand_tensor((5, 4), rng)
    got = rows_of(scaled_attention(q, k, v))
    want = oracle_attention(rows_of(q), rows_of(k), rows_of(v))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_scaled_attention_width_mismatch(rng):
    with pytest.raises(DimensionError):
        scaled_attention(rand_tensor((2, 4), rng), rand_tensor((3, 5), rng), rand_tensor((3, 5), rng))


# -- key-set sizes straight from the masks -------------------------------------------


def count_allowed(mask_tensor, row, size):
    return sum(1 for j in range(size) if mask_tensor.data[row * size + j] == 0.0)


def test_temporal_key_count_is_frames_plus_one():
    n, f = 4, 8
    s = f * n + 1
    mask = key_mask("temporal", n, f)
    for row in range(1, s):
        assert count_allowed(mask, row, s) == f + 1


def test_temporal_single_frame_two_keys():
    n, f = 4, 1
    mask = key_mask("temporal", n, f)
    s = f * n + 1
    for row in range(1, s):
        assert count_allowed(mask, row, s) == 2


def test_spatial_key_count_full_patch_grid():
    # 224x224 with 16-pixel patches: 196 patches, each query sees 197 keys
    n, f = 196, 1
    mask = key_mask("divided_spatial", n, f)
    s = f * n + 1
    for row in range(1, s):
        assert count_allowed(mask, row, s) == n + 1
    assert count_allowed(mask, 0, s) == s


def test_spatial_single_patch_two_keys():
    mask = key_mask("divided_spatial", 1, 3)
    s = 4
    for t in range(1, 4):
        assert count_allowed(mask, t, s) == 2


def test_joint_key_count_is_all_tokens():
    cfg = ModelConfig.paper_scale()
    assert cfg.n_frames * cfg.n_patches + 1 == 1569
    assert key_mask("joint", cfg.n_patches, cfg.n_frames) is None


# -- per-head ops vs brute force ------------------------------------------------------


def test_temporal_attention_matches_masked_oracle(rng):
    grid = make_grid(rng, 4, 2, 8)
    proj = make_proj(rng, 8, 2)
    q, k, v = project_rows(grid, proj)
    for head in range(2):
        got = rows_of(temporal_attention(grid, proj, head))
        qh, kh, vh = head_cols(q, proj, head), head_cols(k, proj, head), head_cols(v, proj, head)
        assert got[0] == [0.0] * proj.head_dim
        for t in range(1, 3):
            for p in range(1, 5):
                row = grid.patch_row(p, t)
                keys = [0] + [grid.patch_row(p, t2) for t2 in (1, 2)]
                want = oracle_attention([qh[row]], [kh[i] for i in keys], [vh[i] for i in keys])
                np.testing.assert_allclose(got[row], want[0], atol=1e-10)


def test_spatial_attention_matches_masked_oracle(rng):
    grid = make_grid(rng, 4, 2, 8)
    proj = make_proj(rng, 8, 2)
    q, k, v = project_rows(grid, proj)
    for head in range(2):
        got = rows_of(spatial_attention(grid, proj, head))
        qh, kh, vh = head_cols(q, proj, head), head_cols(k, proj, head), head_cols(v, proj, head)
        # shared classification token row attends everything
        want_cls = oracle_attention([qh[0]], kh, vh)
        np.testing.assert_allclose(got[0], want_cls[0], atol=1e-10)
        for t in range(1, 3):
            keys = [0] + [grid.patch_row(p, t) for p in range(1, 5)]
            for p in range(1, 5):
                row = grid.patch_row(p, t)
                want = oracle_attention([qh[row]], [kh[i] for i in keys], [vh[i] for i in keys])
                np.testing.assert_allclose(got[row], want[0], atol=1e-10)


def test_space_only_attention_matches_masked_oracle(rng):
    grid = make_grid(rng, 3, 2, 8, per_frame_cls=True)
    proj = make_proj(rng, 8, 2)
    q, k, v = project_rows(grid, proj)
    got = rows_of(spatial_attention(grid, proj, 1))
    qh, kh, vh = head_cols(q, proj, 1), head_cols(k, proj, 1), head_cols(v, proj, 1)
    block = 4
    for t in range(2):
        keys = list(range(t * block, (t + 1) * block))
        for row in keys:
            want = oracle_attention([qh[row]], [kh[i] for i in keys], [vh[i] for i in keys])
            np.testing.assert_allclose(got[row], want[0], atol=1e-10)


def test_joint_attention_matches_unmasked_oracle(rng):
    grid = make_grid(rng, 4, 2, 8)
    proj = make_proj(rng, 8, 2)
    q, k, v = project_rows(grid, proj)
    got = rows_of(joint_attention(grid, proj, 0))
    want = oracle_attention(head_cols(q, proj, 0), head_cols(k, proj, 0), head_cols(v, proj, 0))
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_joint_single_frame_equals_shared_cls_spatial(rng):
    grid = make_grid(rng, 5, 1, 8)
    proj = make_proj(rng, 8, 2)
    for head in range(2):
        a = rows_of(joint_attention(grid, proj, head))
        b = rows_of(spatial_attention(grid, proj, head))
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_scheme_contract_errors(rng):
    shared = make_grid(rng, 2, 2, 8)
    per_frame = make_grid(rng, 2, 2, 8, per_frame_cls=True)
    proj = make_proj(rng, 8, 2)
    wo = rand_tensor((8, 8), rng)
    with pytest.raises(ContractError):
        temporal_attention(per_frame, proj, 0)
    with pytest.raises(ContractError):
        joint_attention(per_frame, proj, 0)
    with pytest.raises(ContractError):
        multi_head(shared, proj, wo, AttentionScheme.JOINT, step="temporal")
    with pytest.raises(ContractError):
        multi_head(shared, proj, wo, AttentionScheme.SPACE_ONLY)
    with pytest.raises(ContractError):
        multi_head(per_frame, proj, wo, AttentionScheme.DIVIDED, step="spatial")
    with pytest.raises(ContractError):
        multi_head(shared, proj, wo, AttentionScheme.DIVIDED)  # missing step


def test_multi_head_rejects_indivisible_width(rng):
    with pytest.raises(ConfigError):
        QKVProjection(
            rand_tensor((6, 6), rng), rand_tensor((6, 6), rng), rand_tensor((6, 6), rng), 4
        )


# -- masked vs gathered agreement ------------------------------------------------------


def scheme_calls(scheme):
    if scheme is AttentionScheme.DIVIDED:
        return [("temporal",), ("spatial",)]
    return [(None,)]


@pytest.mark.parametrize("scheme", list(AttentionScheme))
def test_masked_and_gathered_paths_agree(scheme, rng):
    dim, heads = 8, 2
    for n in range(1, 5):
        for f in range(1, 5):
            for draw in range(3):
                grid = make_grid(rng, n, f, dim, per_frame_cls=scheme is AttentionScheme.SPACE_ONLY)
                proj = make_proj(rng, dim, heads)
                wo = rand_tensor((dim, dim), rng)
                for (step,) in scheme_calls(scheme):
                    masked = multi_head(grid, proj, wo, scheme, step=step, path="masked")
                    gathered = multi_head(grid, proj, wo, scheme, step=step, path="gathered")
                    np.testing.assert_allclose(
                        rows_of(masked), rows_of(gathered), atol=1e-10
                    )


def test_multi_head_single_head_equals_head_op_with_projection(rng):
    grid = make_grid(rng, 3, 2, 8)
    proj = make_proj(rng, 8, 1)
    wo = rand_tensor((8, 8), rng)
    got = multi_head(grid, proj, wo, AttentionScheme.JOINT, path="gathered")
    manual = T.matmul(joint_attention(grid, proj, 0), T.transpose(wo))
    np.testing.assert_allclose(rows_of(got), rows_of(manual), atol=1e-12)


def test_multi_head_concatenation_order(rng):
    grid = make_grid(rng, 3, 2, 8)
    proj = make_proj(rng, 8, 2)
    wo = rand_tensor((8, 8), rng)
    got = multi_head(grid, proj, wo, AttentionScheme.JOINT, path="gathered")
    heads = [joint_attention(grid, proj, h) for h in range(2)]
    manual = T.matmul(T.concat_cols(heads), T.transpose(wo))
    np.testing.assert_allclose(rows_of(got), rows_of(manual), atol=1e-12)


# -- locality invariants ----------------------------------------------------------------


def test_space_only_frame_locality_is_exact(rng):
    n, f, dim = 3, 3, 8
    proj = make_proj(rng, dim, 2)
    wo = rand_tensor((dim, dim), rng)
    base_grid = make_grid(rng, n, f, dim, per_frame_cls=True)
    base = multi_head(base_grid, proj, wo, AttentionScheme.SPACE_ONLY, path="masked")
    block = n + 1
    perturbed = base_grid.tokens.copy()
    for j in range(2 * block * dim, 3 * block * dim):  # frame 3
        perturbed.data[j] += 7.5
    out = multi_head(
        TokenGrid(perturbed, n, f, True), proj, wo, AttentionScheme.SPACE_ONLY, path="masked"
    )
    assert out.data[: 2 * block * dim] == base.data[: 2 * block * dim]


def test_temporal_position_locality(rng):
    # perturbing patch p' must not touch temporal outputs of other positions
    # (the shared token's key is held fixed within the call)
    n, f, dim = 4, 3, 8
    proj = make_proj(rng, dim, 2)
    grid = make_grid(rng, n, f, dim)
    base = temporal_attention(grid, proj, 0)
    perturbed = grid.tokens.copy()
    target_p = 2
    for t in range(1, f + 1):
        row = grid.patch_row(target_p, t)
        for j in range(dim):
            perturbed.data[row * dim + j] -= 3.25
    out = temporal_attention(TokenGrid(perturbed, n, f), proj, 0)
    for p in range(1, n + 1):
        if p == target_p:
            continue
        for t in range(1, f + 1):
            row = grid.patch_row(p, t)
            for j in range(proj.head_dim):
                assert out.data[row * proj.head_dim + j] == base.data[row * proj.head_dim + j]


# -- cost model ---------------------------------------------------------------------------


def test_flops_joint_equals_space_when_single_token():
    cfg = ModelConfig(height=8, width=8, patch=8, n_frames=1, dim=8, n_heads=2,
                      depth=1, mlp_dim=16)
    assert cfg.n_patches == 1
    assert attention_flops(cfg, AttentionScheme.JOINT) == attention_flops(
        cfg, AttentionScheme.SPACE_ONLY
    )


def test_flops_divided_below_joint_at_paper_geometry():
    cfg = ModelConfig.paper_scale()
    divided = attention_flops(cfg, AttentionScheme.DIVIDED)
    joint = attention_flops(cfg, AttentionScheme.JOINT)
    assert divided < joint
    assert divided / joint < 0.15


def test_flops_match_metered_counts_on_random_configs(rng):
    from dsta.bench import instrumented_block_macs

    for draw in range(10):
        cfg = ModelConfig(
            height=8 * rng.randint(1, 3),
            width=8,
            patch=8 // rng.choice((1, 2)),
            n_frames=rng.randint(1, 4),
            dim=8,
            n_heads=rng.choice((1, 2, 4)),
            depth=1,
            mlp_dim=8,
            scheme=rng.choice(list(AttentionScheme)),
        )
        assert instrumented_block_macs(cfg, seed=draw) == attention_flops(cfg, cfg.scheme)


def test_metering_counts_only_gathered_calls(rng):
    q = rand_tensor((3, 4), rng)
    k = rand_tensor((5, 4), rng)
    v = rand_tensor((5, 4), rng)
    with count_attention_macs() as meter:
        scaled_attention(q, k, v)
    assert meter.total == 2 * 3 * 5 * 4
    grid = make_grid(rng, 2, 2, 8)
    proj = make_proj(rng, 8, 2)
    wo = rand_tensor((8, 8), rng)
    with pytest.raises(ContractError):
        with count_attention_macs():
            multi_head(grid, proj, wo, AttentionScheme.JOINT, path="masked")
