"""The video transformer: patch embedding, encoder stack, head, checkpoints.

A clip [H, W, 3, F] is cut into N = HW/P^2 non-overlapping P x P patches per
frame, each linearly projected to width D and given a learned spatial
positional embedding (plus an optional learned temporal one). A learned
classification token is prepended (shared across the clip, or replicated
per frame under the space-only scheme). The encoder is a stack of pre-norm
transformer blocks whose attention policy comes from the configured scheme;
the classifier reads the final classification token (the average of the
per-frame copies under space-only).
"""

from __future__ import annotations

import random
import struct
import sys
from array import array
from dataclasses import dataclass, field, replace
from typing import Optional

from . import tensor as T
from .attention import AttentionScheme, QKVProjection, TokenGrid, multi_head
from .errors import CheckpointError, ConfigError, DimensionError, NumericError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and width settings; defaults are the desk-scale setup.

    ``paper_scale`` gives the full-size variant (224 x 224 x 8 frames,
    16-pixel patches, 12 layers, 12 heads, width 768, MLP 3072).
    """

    height: int = 32
    width: int = 32
    n_frames: int = 8
    channels: int = 3
    patch: int = 8
    dim: int = 64
    n_heads: int = 4
    depth: int = 2
    mlp_dim: int = 128
    scheme: AttentionScheme = AttentionScheme.DIVIDED
    num_classes: int = 2
    temporal_pos_emb: bool = True

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0 or self.patch <= 0:
            raise ConfigError("height, width and patch size must be positive")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"frame {self.height}x{self.width} is not divisible by patch {self.patch}"
            )
        if self.dim % self.n_heads:
            raise ConfigError(f"width {self.dim} not divisible by {self.n_heads} heads")
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.n_frames < 1 or self.channels < 1 or self.mlp_dim < 1:
            raise ConfigError("frames, channels and MLP width must be positive")

    @property
    def grid_h(self) -> int:
        return self.height // self.patch

    @property
    def grid_w(self) -> int:
        return self.width // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def patch_values(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def token_count(self) -> int:
        if self.scheme is AttentionScheme.SPACE_ONLY:
            return self.n_frames * (self.n_patches + 1)
        return self.n_frames * self.n_patches + 1

    @staticmethod
    def paper_scale(**overrides) -> "ModelConfig":
        base = dict(
            height=224, width=224, n_frames=8, patch=16, dim=768,
            n_heads=12, depth=12, mlp_dim=3072,
        )
        base.update(overrides)
        return ModelConfig(**base)

    def with_scheme(self, scheme: AttentionScheme) -> "ModelConfig":
        return replace(self, scheme=scheme)

    _FIELDS = (
        "height", "width", "n_frames", "channels", "patch", "dim", "n_heads",
        "depth", "mlp_dim", "scheme", "num_classes", "temporal_pos_emb",
    )

    def to_dict(self) -> dict:
        d = {}
        for name in self._FIELDS:
            v = getattr(self, name)
            if isinstance(v, AttentionScheme):
                v = v.value
            d[name] = v
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        kwargs = dict(d)
        if "scheme" in kwargs and not isinstance(kwargs["scheme"], AttentionScheme):
            kwargs["scheme"] = AttentionScheme.parse(str(kwargs["scheme"]))
        for flag in ("temporal_pos_emb",):
            if flag in kwargs:
                kwargs[flag] = bool(int(kwargs[flag])) if not isinstance(kwargs[flag], bool) else kwargs[flag]
        return ModelConfig(**kwargs)


@dataclass
class PatchEmbed:
    weight: Tensor  # [D, C*P*P]
    bias: Tensor  # [D]


@dataclass
class PositionalEmbedding:
    spatial: Tensor  # [N, D]
    cls: Tensor  # [1, D]
    temporal: Optional[Tensor] = None  # [F, D]


# -- parameter table ------------------------------------------------------------


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table; the single source of truth for checkpoints."""
    d, m = cfg.dim, cfg.mlp_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, cfg.patch_values),
        "patch_embed.bias": (d,),
        "pos.spatial": (cfg.n_patches, d),
        "pos.cls": (1, d),
    }
    if cfg.temporal_pos_emb:
        shapes["pos.temporal"] = (cfg.n_frames, d)
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        if cfg.scheme is AttentionScheme.DIVIDED:
            shapes[f"{pre}.ln_t.gamma"] = (d,)
            shapes[f"{pre}.ln_t.beta"] = (d,)
            for w in ("wq", "wk", "wv", "out"):
                shapes[f"{pre}.attn_t.{w}"] = (d, d)
        shapes[f"{pre}.ln1.gamma"] = (d,)
        shapes[f"{pre}.ln1.beta"] = (d,)
        for w in ("wq", "wk", "wv", "out"):
            shapes[f"{pre}.attn.{w}"] = (d, d)
        shapes[f"{pre}.ln2.gamma"] = (d,)
        shapes[f"{pre}.ln2.beta"] = (d,)
        shapes[f"{pre}.mlp.w1"] = (m, d)
        shapes[f"{pre}.mlp.b1"] = (m,)
        shapes[f"{pre}.mlp.w2"] = (d, m)
        shapes[f"{pre}.mlp.b2"] = (d,)
    shapes["norm.gamma"] = (d,)
    shapes["norm.beta"] = (d,)
    shapes["head.weight"] = (cfg.num_classes, d)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def _init_value_fill(name: str, shape: tuple[int, ...], rng: random.Random) -> array:
    n = 1
    for s in shape:
        n *= s
    if name.endswith(".gamma"):
        return array("d", [1.0] * n)
    if name.endswith((".beta", ".bias", ".b1", ".b2")):
        return array("d", bytes(8 * n))
    if name.startswith("pos."):
        return array("d", [rng.gauss(0.0, 0.02) for _ in range(n)])
    bound = 1.0 / (shape[-1] ** 0.5)  # fan_in is the input width of x @ w.T
    return array("d", [rng.uniform(-bound, bound) for _ in range(n)])


def init_parameters(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Deterministic parameter set: uniform +-1/sqrt(fan_in) weights,
    N(0, 0.02) positional/class embeddings, zero biases, unit gains."""
    rng = random.Random(f"dsta-init:{seed}")
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        params[name] = Tensor(shape, _init_value_fill(name, shape, rng), requires_grad=True)
    return params


# -- patch extraction -------------------------------------------------------------

_patch_idx_cache: dict[tuple, array] = {}


def patchify_indices(cfg: ModelConfig) -> array:
    """Flat gather indices mapping [H,W,C,F] pixels to [F,N,C*P*P] patches.

    Within a patch, values are laid out raster order (row, column, channel).
    """
    key = (cfg.height, cfg.width, cfg.channels, cfg.n_frames, cfg.patch)
    idx = _patch_idx_cache.get(key)
    if idx is not None:
        return idx
    h, w, c, f, p = key
    gw = w // p
    n = (h // p) * gw
    out = array("q", bytes(8 * f * n * c * p * p))
    pos = 0
    for t in range(f):
        for patch_i in range(n):
            gy, gx = divmod(patch_i, gw)
            for py in range(p):
                for px in range(p):
                    for ch in range(c):
                        y = gy * p + py
                        x = gx * p + px
                        out[pos] = ((y * w + x) * c + ch) * f + t
                        pos += 1
    _patch_idx_cache[key] = out
    return out


def patchify(clip, cfg: ModelConfig) -> Tensor:
    """Cut a clip into per-frame raster-ordered patch rows: [F, N, C*P*P]."""
    pixels = clip.pixels if hasattr(clip, "pixels") else clip
    expected = (cfg.height, cfg.width, cfg.channels, cfg.n_frames)
    if pixels.shape != expected:
        raise ConfigError(f"clip shape {pixels.shape} does not match config {expected}")
    return T.permute_flat(
        pixels, patchify_indices(cfg), (cfg.n_frames, cfg.n_patches, cfg.patch_values)
    )


_embed_idx_cache: dict[tuple, tuple[array, array]] = {}


def _embed_indices(n_patches: int, n_frames: int) -> tuple[array, array]:
    key = (n_patches, n_frames)
    cached = _embed_idx_cache.get(key)
    if cached is None:
        spatial = array("q", [p for _ in range(n_frames) for p in range(n_patches)])
        temporal = array("q", [t for t in range(n_frames) for _ in range(n_patches)])
        cached = _embed_idx_cache[key] = (spatial, temporal)
    return cached


def embed(patches: Tensor, pe: PatchEmbed, pos: PositionalEmbedding, cfg: ModelConfig) -> TokenGrid:
    """Project patches to width D, add positional terms, prepend class token."""
    if patches.ndim == 3:
        f, n, pv = patches.shape
        patches = T.reshape(patches, (f * n, pv))
    if patches.shape[1] != cfg.patch_values:
        raise DimensionError(
            f"patch width {patches.shape[1]} does not match C*P*P = {cfg.patch_values}"
        )
    rows = patches.shape[0]
    if rows != cfg.n_frames * cfg.n_patches:
        raise DimensionError(f"{rows} patches for {cfg.n_frames}x{cfg.n_patches} grid")
    tok = T.add_bias(T.matmul(patches, T.transpose(pe.weight)), pe.bias)
    spatial_idx, temporal_idx = _embed_indices(cfg.n_patches, cfg.n_frames)
    tok = T.add(tok, T.gather_rows(pos.spatial, spatial_idx))
    if cfg.temporal_pos_emb:
        if pos.temporal is None:
            raise ConfigError("temporal positional embedding enabled but not provided")
        tok = T.add(tok, T.gather_rows(pos.temporal, temporal_idx))
    if cfg.scheme is AttentionScheme.SPACE_ONLY:
        parts = []
        for t in range(cfg.n_frames):
            parts.append(pos.cls)
            parts.append(T.slice_rows(tok, t * cfg.n_patches, (t + 1) * cfg.n_patches))
        tokens = T.concat_rows(parts)
        return TokenGrid(tokens, cfg.n_patches, cfg.n_frames, per_frame_cls=True)
    tokens = T.concat_rows([pos.cls, tok])
    return TokenGrid(tokens, cfg.n_patches, cfg.n_frames)


# -- the model ---------------------------------------------------------------------


class VideoTransformer:
    """Parameter container plus the forward pass."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        if params is None:
            params = init_parameters(cfg, seed)
        else:
            expected = parameter_shapes(cfg)
            if list(params.keys()) != list(expected.keys()):
                raise ConfigError("parameter names do not match the configuration")
            for name, shape in expected.items():
                if params[name].shape != shape:
                    raise ConfigError(
                        f"parameter {name} has shape {params[name].shape}, expected {shape}"
                    )
        self.params = params

    # accessors ------------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    @property
    def patch_embed(self) -> PatchEmbed:
        return PatchEmbed(self.params["patch_embed.weight"], self.params["patch_embed.bias"])

    @property
    def pos(self) -> PositionalEmbedding:
        return PositionalEmbedding(
            spatial=self.params["pos.spatial"],
            cls=self.params["pos.cls"],
            temporal=self.params.get("pos.temporal"),
        )

    def _qkv(self, prefix: str) -> QKVProjection:
        p = self.params
        return QKVProjection(
            p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"], self.cfg.n_heads
        )

    # forward --------------------------------------------------------------

    def _grid(self, tokens: Tensor) -> TokenGrid:
        return TokenGrid(
            tokens,
            self.cfg.n_patches,
            self.cfg.n_frames,
            per_frame_cls=self.cfg.scheme is AttentionScheme.SPACE_ONLY,
        )

    def block_forward(self, x: Tensor, index: int, path: str = "auto") -> Tensor:
        """One pre-norm encoder block over a token matrix [S, D]."""
        cfg = self.cfg
        p = self.params
        pre = f"blocks.{index}"
        if cfg.scheme is AttentionScheme.DIVIDED:
            normed = T.layernorm(x, p[f"{pre}.ln_t.gamma"], p[f"{pre}.ln_t.beta"])
            t_out = multi_head(
                self._grid(normed), self._qkv(f"{pre}.attn_t"), p[f"{pre}.attn_t.out"],
                cfg.scheme, step="temporal", path=path,
            )
            x = T.add(x, t_out)
            step = "spatial"
        else:
            step = None
        normed = T.layernorm(x, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"])
        a_out = multi_head(
            self._grid(normed), self._qkv(f"{pre}.attn"), p[f"{pre}.attn.out"],
            cfg.scheme, step=step, path=path,
        )
        x = T.add(x, a_out)
        normed = T.layernorm(x, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
        h = T.add_bias(T.matmul(normed, T.transpose(p[f"{pre}.mlp.w1"])), p[f"{pre}.mlp.b1"])
        h = T.gelu(h)
        h = T.add_bias(T.matmul(h, T.transpose(p[f"{pre}.mlp.w2"])), p[f"{pre}.mlp.b2"])
        x = T.add(x, h)
        if T.nonfinite_count(x):
            raise NumericError(f"non-finite activations leaving block {index}")
        return x

    def encode(self, clip, path: str = "auto") -> Tensor:
        """Embed a clip and run all blocks plus the final norm; returns [S, D]."""
        patches = patchify(clip, self.cfg)
        grid = embed(patches, self.patch_embed, self.pos, self.cfg)
        x = grid.tokens
        for i in range(self.cfg.depth):
            x = self.block_forward(x, i, path)
        return T.layernorm(x, self.params["norm.gamma"], self.params["norm.beta"])

    def forward(self, clip, path: str = "auto") -> Tensor:
        """Classification logits for one clip, shape [num_classes]."""
        x = self.encode(clip, path)
        if self.cfg.scheme is AttentionScheme.SPACE_ONLY:
            cls_rows = self._grid(x).cls_rows()
            pooled = T.mean_rows(T.gather_rows(x, cls_rows))
        else:
            pooled = T.slice_rows(x, 0, 1)
        logits = T.add_bias(
            T.matmul(pooled, T.transpose(self.params["head.weight"])), self.params["head.bias"]
        )
        return T.reshape(logits, (self.cfg.num_classes,))


# -- checkpoint format --------------------------------------------------------------

CHECKPOINT_MAGIC = b"DSTA"
CHECKPOINT_VERSION = 1


def _f64_to_le_bytes(values: array) -> bytes:
    if sys.byteorder == "little":
        return values.tobytes()
    swapped = array("d", values)
    swapped.byteswap()
    return swapped.tobytes()


def _f64_from_le_bytes(blob: bytes) -> array:
    values = array("d")
    values.frombytes(blob)
    if sys.byteorder != "little":
        values.byteswap()
    return values


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Magic, version, length-prefixed text header, then raw little-endian f64."""
    lines = []
    for key, value in ckpt.config.to_dict().items():
        if isinstance(value, bool):
            value = int(value)
        lines.append(f"config.{key}={value}")
    for name, t in ckpt.params.items():
        dims = "x".join(str(s) for s in t.shape) if t.shape else "scalar"
        lines.append(f"param.{name}={dims}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for t in ckpt.params.values():
            if t.data.itemsize != 8:
                raise CheckpointError("parameters must be float64")
            fh.write(_f64_to_le_bytes(t.data))


def load_checkpoint(path) -> Checkpoint:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    with fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header_len = struct.unpack("<I", blob[8:12])[0]
    if len(blob) < 12 + header_len:
        raise CheckpointError(f"{path} is truncated inside the header")
    header = blob[12 : 12 + header_len].decode("utf-8")
    config_kv: dict[str, str] = {}
    param_shapes: dict[str, tuple[int, ...]] = {}
    for line in header.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key.startswith("config."):
            config_kv[key[len("config.") :]] = value
        elif key.startswith("param."):
            name = key[len("param.") :]
            shape = () if value == "scalar" else tuple(int(s) for s in value.split("x"))
            param_shapes[name] = shape
        else:
            raise CheckpointError(f"unrecognized header line {line!r}")
    typed: dict = {}
    for key, value in config_kv.items():
        if key == "scheme":
            typed[key] = value
        elif key == "temporal_pos_emb":
            typed[key] = bool(int(value))
        else:
            typed[key] = int(value)
    try:
        cfg = ModelConfig.from_dict(typed)
    except (ConfigError, TypeError, ValueError) as e:
        raise CheckpointError(f"invalid config in checkpoint header: {e}") from e
    expected = parameter_shapes(cfg)
    if list(param_shapes.keys()) != list(expected.keys()):
        missing = set(expected) ^ set(param_shapes)
        raise CheckpointError(f"parameter set mismatch, offending names: {sorted(missing)}")
    for name, shape in expected.items():
        if param_shapes[name] != shape:
            raise CheckpointError(
                f"parameter {name}: header shape {param_shapes[name]} "
                f"disagrees with config-implied {shape}"
            )
    payload = blob[12 + header_len :]
    params: dict[str, Tensor] = {}
    pos = 0
    for name, shape in param_shapes.items():
        n = 1
        for s in shape:
            n *= s
        nbytes = 8 * n
        if pos + nbytes > len(payload):
            raise CheckpointError(f"{path} is truncated in parameter {name}")
        values = _f64_from_le_bytes(payload[pos : pos + nbytes])
        pos += nbytes
        params[name] = Tensor(shape, values, requires_grad=True)
    if pos != len(payload):
        raise CheckpointError(f"{path} has {len(payload) - pos} trailing bytes")
    return Checkpoint(config=cfg, params=params, version=version)


def model_from_checkpoint(ckpt: Checkpoint) -> VideoTransformer:
    return VideoTransformer(ckpt.config, params=ckpt.params)


# -- verification -------------------------------------------------------------------

GRADCHECK_CONFIG = dict(
    height=8, width=8, patch=4, n_frames=2, dim=8, n_heads=2, depth=1, mlp_dim=16
)


def gradcheck_config(scheme: AttentionScheme, **overrides) -> ModelConfig:
    """Small geometry that keeps a full-model finite-difference sweep fast."""
    kwargs = dict(GRADCHECK_CONFIG)
    kwargs.update(overrides)
    return ModelConfig(scheme=scheme, **kwargs)


def random_clip(cfg: ModelConfig, seed: int = 0) -> Tensor:
    rng = random.Random(f"dsta-clip:{seed}")
    n = cfg.height * cfg.width * cfg.channels * cfg.n_frames
    return Tensor(
        (cfg.height, cfg.width, cfg.channels, cfg.n_frames),
        array("d", [rng.random() for _ in range(n)]),
    )


def gradcheck_parameters(
    model: VideoTransformer, clip, label: int = 0, step: float = 1e-5
) -> dict[str, float]:
    """Central-difference check of d(loss)/d(parameter) for every parameter.

    The loss is the cross entropy of the forward pass on ``clip`` against
    ``label``; returns each parameter's worst relative error.
    """

    def loss_fn(_ignored: Tensor) -> Tensor:
        logits = model.forward(clip)
        return T.cross_entropy(T.reshape(logits, (1, model.cfg.num_classes)), [label])

    return {
        name: T.gradcheck(loss_fn, param, step)
        for name, param in model.parameters().items()
    }
