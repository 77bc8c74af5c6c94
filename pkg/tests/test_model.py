import math
import random
from array import array

import numpy as np
import pytest

import dsta.tensor as T
from dsta.attention import AttentionScheme
from dsta.errors import CheckpointError, ConfigError, NumericError
from dsta.model import (
    Checkpoint,
    ModelConfig,
    VideoTransformer,
    embed,
    gradcheck_config,
    gradcheck_parameters,
    load_checkpoint,
    model_from_checkpoint,
    parameter_shapes,
    patchify,
    random_clip,
    save_checkpoint,
)
from dsta.tensor import Tensor

from conftest import rand_tensor


def np_of(t):
    return np.array(t.data, dtype=np.float64).reshape(t.shape)


TOY = dict(height=8, width=8, patch=4, n_frames=2, dim=8, n_heads=2, depth=1, mlp_dim=16)


def toy_cfg(scheme=AttentionScheme.DIVIDED, **over):
    kw = dict(TOY)
    kw.update(over)
    return ModelConfig(scheme=scheme, **kw)


# -- config -------------------------------------------------------------------------


def test_config_derived_quantities():
    cfg = ModelConfig.paper_scale()
    assert cfg.n_patches == 196
    assert cfg.head_dim == 64
    assert cfg.token_count == 1569


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(height=30, patch=8)
    with pytest.raises(ConfigError):
        ModelConfig(dim=65, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(depth=0)
    with pytest.raises(ConfigError):
        ModelConfig(num_classes=1)


# -- patchify ------------------------------------------------------------------------


def test_patch_count_at_paper_geometry():
    assert ModelConfig.paper_scale().n_patches == 196


def test_single_patch_is_flattened_frame(rng):
    cfg = ModelConfig(height=4, width=4, patch=4, n_frames=2, dim=8, n_heads=2,
                      depth=1, mlp_dim=16)
    clip = rand_tensor((4, 4, 3, 2), rng)
    patches = patchify(clip, cfg)
    assert patches.shape == (2, 1, 48)
    px = np_of(clip)
    for t in range(2):
        np.testing.assert_array_equal(
            np_of(patches)[t, 0], px[:, :, :, t].reshape(-1)
        )


def test_patchify_matches_convolution_oracle(rng):
    # patchify + linear projection is a stride-P convolution with kernel P
    cfg = toy_cfg()
    clip = rand_tensor((8, 8, 3, 2), rng)
    w = rand_tensor((cfg.dim, cfg.patch_values), rng)
    b = rand_tensor((cfg.dim,), rng)
    projected = np_of(T.add_bias(T.matmul(
        T.reshape(patchify(clip, cfg), (cfg.n_frames * cfg.n_patches, cfg.patch_values)),
        T.transpose(w)), b))
    px, wr, br = np_of(clip), np_of(w), np_of(b)
    p, gw = cfg.patch, cfg.grid_w
    for t in range(cfg.n_frames):
        for patch_i in range(cfg.n_patches):
            gy, gx = divmod(patch_i, gw)
            for d in range(cfg.dim):
                acc = 0.0
                ki = 0
                for py in range(p):
                    for pxx in range(p):
                        for c in range(3):
                            acc += wr[d, ki] * px[gy * p + py, gx * p + pxx, c, t]
                            ki += 1
                acc += br[d]
                got = projected[t * cfg.n_patches + patch_i, d]
                assert abs(got - acc) <= 1e-10


def test_patchify_rejects_wrong_shape(rng):
    with pytest.raises(ConfigError):
        patchify(rand_tensor((8, 8, 3, 3), rng), toy_cfg())


# -- embed ---------------------------------------------------------------------------


def test_embed_zero_everything_gives_zero_grid():
    cfg = toy_cfg()
    patches = Tensor.zeros((cfg.n_frames, cfg.n_patches, cfg.patch_values))
    model = VideoTransformer(cfg, seed=0)
    pe = model.patch_embed
    pos = model.pos
    zero_pe = type(pe)(Tensor.zeros(pe.weight.shape), Tensor.zeros(pe.bias.shape))
    zero_pos = type(pos)(
        spatial=Tensor.zeros(pos.spatial.shape),
        cls=Tensor.zeros(pos.cls.shape),
        temporal=Tensor.zeros(pos.temporal.shape),
    )
    grid = embed(patches, zero_pe, zero_pos, cfg)
    assert grid.tokens.shape == (cfg.n_frames * cfg.n_patches + 1, cfg.dim)
    assert all(v == 0.0 for v in grid.tokens.data)


def test_embed_matches_per_token_oracle(rng):
    cfg = toy_cfg()
    model = VideoTransformer(cfg, seed=3)
    patches = rand_tensor((cfg.n_frames, cfg.n_patches, cfg.patch_values), rng)
    grid = embed(patches, model.patch_embed, model.pos, cfg)
    tok = np_of(grid.tokens)
    w = np_of(model.patch_embed.weight)
    b = np_of(model.patch_embed.bias)
    e = np_of(model.pos.spatial)
    tt = np_of(model.pos.temporal)
    pr = np_of(patches)
    np.testing.assert_allclose(tok[0], np_of(model.pos.cls)[0], atol=1e-12)
    for t in range(cfg.n_frames):
        for p in range(cfg.n_patches):
            want = w @ pr[t, p] + b + e[p] + tt[t]
            np.testing.assert_allclose(tok[1 + t * cfg.n_patches + p], want, atol=1e-12)


# -- forward -------------------------------------------------------------------------


def test_zero_head_gives_uniform_softmax(rng):
    cfg = toy_cfg()
    model = VideoTransformer(cfg, seed=1)
    for v in (model.params["head.weight"], model.params["head.bias"]):
        for i in range(v.numel):
            v.data[i] = 0.0
    logits = model.forward(random_clip(cfg, seed=4))
    assert list(logits.data) == [0.0, 0.0]


def test_joint_equals_space_only_at_single_frame(rng):
    base = toy_cfg(scheme=AttentionScheme.JOINT, n_frames=1)
    joint_model = VideoTransformer(base, seed=5)
    space_model = VideoTransformer(base.with_scheme(AttentionScheme.SPACE_ONLY), seed=5)
    clip = random_clip(base, seed=6)
    a = joint_model.forward(clip)
    b = space_model.forward(clip)
    np.testing.assert_allclose(list(a.data), list(b.data), atol=1e-12)


def numpy_forward(model, clip):
    """Straight-line reimplementation of the whole forward pass."""
    cfg = model.cfg
    par = {k: np_of(v) for k, v in model.parameters().items()}
    p, gw = cfg.patch, cfg.grid_w
    n, f, d, a = cfg.n_patches, cfg.n_frames, cfg.dim, cfg.n_heads
    dh = d // a
    px = np_of(clip)
    patches = np.zeros((f * n, cfg.patch_values))
    for t in range(f):
        for pi in range(n):
            gy, gx = divmod(pi, gw)
            patches[t * n + pi] = px[gy * p : (gy + 1) * p, gx * p : (gx + 1) * p, :, t].reshape(-1)
    tok = patches @ par["patch_embed.weight"].T + par["patch_embed.bias"]
    tok += np.tile(par["pos.spatial"], (f, 1))
    if cfg.temporal_pos_emb:
        tok += np.repeat(par["pos.temporal"], n, axis=0)
    space_only = cfg.scheme is AttentionScheme.SPACE_ONLY
    if space_only:
        rows = []
        for t in range(f):
            rows.append(par["pos.cls"][0])
            rows.extend(tok[t * n : (t + 1) * n])
        x = np.array(rows)
    else:
        x = np.vstack([par["pos.cls"], tok])
    s = x.shape[0]

    def ln(v, g, b, eps=1e-6):
        mu = v.mean(axis=-1, keepdims=True)
        var = v.var(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * g + b

    def allowed_matrix(kind):
        allow = np.zeros((s, s), dtype=bool)
        if kind == "joint":
            allow[:] = True
        elif kind == "space":
            for t in range(f):
                base = t * (n + 1)
                allow[base : base + n + 1, base : base + n + 1] = True
        elif kind == "temporal":
            allow[0, 0] = True
            for t in range(f):
                for pi in range(n):
                    row = 1 + t * n + pi
                    allow[row, 0] = True
                    for t2 in range(f):
                        allow[row, 1 + t2 * n + pi] = True
        elif kind == "spatial":
            allow[0, :] = True
            for t in range(f):
                base = 1 + t * n
                allow[base : base + n, 0] = True
                allow[base : base + n, base : base + n] = True
        return allow

    def mha(v, prefix, kind):
        q = v @ par[f"{prefix}.wq"].T
        k = v @ par[f"{prefix}.wk"].T
        vv = v @ par[f"{prefix}.wv"].T
        allow = allowed_matrix(kind)
        outs = []
        for h in range(a):
            qh = q[:, h * dh : (h + 1) * dh]
            kh = k[:, h * dh : (h + 1) * dh]
            vh = vv[:, h * dh : (h + 1) * dh]
            sc = qh @ kh.T / math.sqrt(dh)
            sc = np.where(allow, sc, -np.inf)
            sc = sc - sc.max(axis=-1, keepdims=True)
            w = np.exp(sc)
            w = np.where(allow, w, 0.0)
            w = w / w.sum(axis=-1, keepdims=True)
            outs.append(w @ vh)
        out = np.concatenate(outs, axis=1) @ par[f"{prefix}.out"].T
        if kind == "temporal":
            out[0] = 0.0
        return out

    def gelu_np(v):
        from scipy.special import erf

        return v * 0.5 * (1.0 + erf(v / math.sqrt(2.0)))

    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        if cfg.scheme is AttentionScheme.DIVIDED:
            x = x + mha(ln(x, par[f"{pre}.ln_t.gamma"], par[f"{pre}.ln_t.beta"]),
                        f"{pre}.attn_t", "temporal")
            kind = "spatial"
        elif space_only:
            kind = "space"
        else:
            kind = "joint"
        x = x + mha(ln(x, par[f"{pre}.ln1.gamma"], par[f"{pre}.ln1.beta"]),
                    f"{pre}.attn", kind)
        h = ln(x, par[f"{pre}.ln2.gamma"], par[f"{pre}.ln2.beta"])
        h = gelu_np(h @ par[f"{pre}.mlp.w1"].T + par[f"{pre}.mlp.b1"])
        x = x + (h @ par[f"{pre}.mlp.w2"].T + par[f"{pre}.mlp.b2"])
    x = ln(x, par["norm.gamma"], par["norm.beta"])
    if space_only:
        cls = np.mean([x[t * (n + 1)] for t in range(f)], axis=0)
    else:
        cls = x[0]
    return cls @ par["head.weight"].T + par["head.bias"]


@pytest.mark.parametrize("scheme", list(AttentionScheme))
def test_forward_matches_independent_numpy_reimplementation(scheme):
    cfg = toy_cfg(scheme=scheme, n_frames=2)
    model = VideoTransformer(cfg, seed=11)
    clip = random_clip(cfg, seed=12)
    got = np.array(model.forward(clip).data)
    want = numpy_forward(model, clip)
    np.testing.assert_allclose(got, want, atol=1e-10)


@pytest.mark.parametrize("path", ["masked", "gathered"])
def test_forward_paths_agree_end_to_end(path):
    cfg = toy_cfg()
    model = VideoTransformer(cfg, seed=13)
    clip = random_clip(cfg, seed=14)
    auto = model.forward(clip, path="auto")
    explicit = model.forward(clip, path=path)
    np.testing.assert_allclose(list(auto.data), list(explicit.data), atol=1e-10)


def test_forward_raises_numeric_error_naming_block():
    cfg = toy_cfg()
    model = VideoTransformer(cfg, seed=15)
    bad = model.params["blocks.0.mlp.w2"]
    bad.data[0] = math.inf
    with pytest.raises(NumericError) as err:
        model.forward(random_clip(cfg, seed=16))
    assert "block 0" in str(err.value)


# -- structural invariants --------------------------------------------------------------


def permuted_clip(clip, order):
    h, w, c, f = clip.shape
    out = clip.copy()
    for base in range(0, clip.numel, f):
        for t, src in enumerate(order):
            out.data[base + t] = clip.data[base + src]
    return out


@pytest.mark.parametrize("scheme", list(AttentionScheme))
def test_frame_permutation_leaves_logits_unchanged_without_temporal_emb(scheme):
    cfg = toy_cfg(scheme=scheme, n_frames=4, temporal_pos_emb=False)
    model = VideoTransformer(cfg, seed=21)
    clip = random_clip(cfg, seed=22)
    order = [2, 0, 3, 1]
    base = model.forward(clip)
    shuffled = model.forward(permuted_clip(clip, order))
    np.testing.assert_allclose(list(base.data), list(shuffled.data), atol=1e-8)


@pytest.mark.parametrize("scheme", list(AttentionScheme))
def test_frame_permutation_permutes_activations(scheme):
    cfg = toy_cfg(scheme=scheme, n_frames=4, temporal_pos_emb=False)
    model = VideoTransformer(cfg, seed=21)
    clip = random_clip(cfg, seed=22)
    order = [2, 0, 3, 1]
    base = model.encode(clip)
    shuffled = model.encode(permuted_clip(clip, order))
    bg = model._grid(base)
    n = cfg.n_patches
    for new_t, old_t in enumerate(order):
        for p in range(1, n + 1):
            src = bg.patch_row(p, old_t + 1)
            dst = bg.patch_row(p, new_t + 1)
            got = [shuffled.data[dst * cfg.dim + j] for j in range(cfg.dim)]
            want = [base.data[src * cfg.dim + j] for j in range(cfg.dim)]
            np.testing.assert_allclose(got, want, atol=1e-8)


def test_frame_reversal_changes_logits_with_temporal_emb():
    cfg = toy_cfg(n_frames=4, temporal_pos_emb=True)
    model = VideoTransformer(cfg, seed=23)
    clip = random_clip(cfg, seed=24)
    base = model.forward(clip)
    reversed_logits = model.forward(permuted_clip(clip, [3, 2, 1, 0]))
    assert max(abs(u - v) for u, v in zip(base.data, reversed_logits.data)) > 1e-6


def test_space_only_frame_locality_end_to_end():
    cfg = toy_cfg(scheme=AttentionScheme.SPACE_ONLY, n_frames=3)
    model = VideoTransformer(cfg, seed=25)
    clip = random_clip(cfg, seed=26)
    zeroed = clip.copy()
    # zero frame 3 (t index 2) across all pixels
    f = cfg.n_frames
    for base in range(0, clip.numel, f):
        zeroed.data[base + 2] = 0.0
    base_tokens = model.encode(clip)
    new_tokens = model.encode(zeroed)
    grid = model._grid(base_tokens)
    for t, row in enumerate(grid.cls_rows()):
        same = all(
            new_tokens.data[row * cfg.dim + j] == base_tokens.data[row * cfg.dim + j]
            for j in range(cfg.dim)
        )
        assert same == (t != 2)


# -- full-model gradient check -----------------------------------------------------------


def test_full_model_gradcheck_divided():
    cfg = gradcheck_config(AttentionScheme.DIVIDED)
    model = VideoTransformer(cfg, seed=31)
    clip = random_clip(cfg, seed=32)
    errors = gradcheck_parameters(model, clip, step=1e-5)
    worst = max(errors.values())
    assert worst <= 1e-4, f"worst {worst:.3e} at " + max(errors, key=errors.get)


# -- checkpoints ----------------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg = toy_cfg()
    model = VideoTransformer(cfg, seed=41)
    path = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint(config=cfg, params=model.params), path)
    loaded = load_checkpoint(path)
    assert loaded.config == cfg
    assert list(loaded.params.keys()) == list(model.params.keys())
    for name, p in model.params.items():
        assert loaded.params[name].data.tobytes() == p.data.tobytes()
    again = model_from_checkpoint(loaded)
    clip = random_clip(cfg, seed=42)
    assert list(again.forward(clip).data) == list(model.forward(clip).data)


def test_checkpoint_size_formula(tmp_path):
    cfg = toy_cfg()
    model = VideoTransformer(cfg, seed=43)
    path = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint(config=cfg, params=model.params), path)
    blob = path.read_bytes()
    header_len = int.from_bytes(blob[8:12], "little")
    total = sum(p.numel for p in model.params.values())
    assert len(blob) == 12 + header_len + 8 * total


def test_checkpoint_rejects_edited_class_count(tmp_path):
    cfg = toy_cfg()
    model = VideoTransformer(cfg, seed=44)
    path = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint(config=cfg, params=model.params), path)
    blob = path.read_bytes()
    edited = blob.replace(b"config.num_classes=2", b"config.num_classes=3")
    assert edited != blob
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(edited)
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(bad)
    assert "head" in str(err.value)


def test_checkpoint_rejects_truncation(tmp_path):
    cfg = toy_cfg()
    model = VideoTransformer(cfg, seed=45)
    path = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint(config=cfg, params=model.params), path)
    blob = path.read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(blob[:-9])
    with pytest.raises(CheckpointError):
        load_checkpoint(cut)


def test_checkpoint_rejects_bad_magic(tmp_path):
    bad = tmp_path / "junk.ckpt"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_parameter_shapes_cover_all_schemes():
    for scheme in AttentionScheme:
        cfg = toy_cfg(scheme=scheme)
        shapes = parameter_shapes(cfg)
        model = VideoTransformer(cfg, seed=46)
        assert list(model.params.keys()) == list(shapes.keys())
        has_temporal_attn = any(".attn_t." in k for k in shapes)
        assert has_temporal_attn == (scheme is AttentionScheme.DIVIDED)
