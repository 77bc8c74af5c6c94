"""Synthetic state-change videos, clip sampling, and the dataset file format.

The state-change task: each item pair shares one set of frames showing a
soft blob whose intensity ramps up over time. The positive item keeps the
frames in ramp order (a state change); the negative item uses a random
non-monotone order of the exact same frames. Because the two classes use
identical frame multisets, any classifier blind to frame order is at
chance by construction; only temporal modeling can separate them.

Stored videos are little-endian float32, flat [H, W, C, F_total] row-major.
Clips handed to the model are float64 tensors [h, w, C, F] in [0, 1].
"""

from __future__ import annotations

import random
import sys
from array import array
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

from . import backend
from .errors import ConfigError, DataError
from .tensor import Tensor

if TYPE_CHECKING:
    from .model import ModelConfig

CHANNEL_GAINS = (1.0, 0.8, 0.6)
DATASET_MAGIC = "DSTADATA"
DATASET_VERSION = 1
CLASS_NAMES = ("no_change", "state_change")


class SyntheticTask(Enum):
    STATE_CHANGE = "state_change"
    # Control task: both pair items are shuffled, so labels carry no signal
    # and every classifier should sit at chance.
    FRAME_SHUFFLE_CONTROL = "frame_shuffle_control"

    @classmethod
    def parse(cls, name: str) -> "SyntheticTask":
        for member in cls:
            if member.value == name:
                return member
        raise ConfigError(f"unknown synthetic task {name!r}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Deterministic generator settings; everything flows from ``seed``.

    The default frame count matches the model's clip length on purpose:
    when stored videos are longer than the sampled window, a shuffled
    negative's window holds an arbitrary subset of ramp intensities while
    a positive's window holds consecutive ones, and that multiset gap is
    visible to order-blind models. Equal lengths keep the two classes
    indistinguishable except by frame order.
    """

    task: SyntheticTask = SyntheticTask.STATE_CHANGE
    image_size: int = 36
    frames: int = 8
    blob_radius: tuple[float, float] = (0.28, 0.45)  # fraction of image size
    ramp: tuple[float, float] = (0.15, 0.95)  # blob peak intensity, first to last frame
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 4:
            raise ConfigError("image_size must be at least 4")
        if self.frames < 2:
            raise ConfigError("need at least 2 frames for an ordering task")
        lo, hi = self.blob_radius
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"blob radius fractions {self.blob_radius} must be in (0, 1)")
        lo, hi = self.ramp
        if not 0 <= lo < hi <= 1:
            raise ConfigError(f"ramp {self.ramp} must be increasing within [0, 1]")
        if not 0 <= self.noise <= 0.5:
            raise ConfigError("noise level must be within [0, 0.5]")


@dataclass
class StoredVideo:
    video_id: str
    label: int
    split: str
    height: int
    width: int
    channels: int
    frames: int
    pixels: array  # float32, flat [H, W, C, F]


@dataclass
class ManifestItem:
    video_id: str
    label: int
    split: str
    offset: int  # byte offset into the payload
    n_values: int


@dataclass
class DatasetManifest:
    height: int
    width: int
    channels: int
    frames: int
    class_names: tuple[str, ...]
    items: list[ManifestItem] = field(default_factory=list)

    def __post_init__(self):
        last = -1
        seen: dict[str, set] = {}
        for item in self.items:
            if item.offset <= last:
                raise DataError("manifest offsets must be strictly increasing")
            last = item.offset
            seen.setdefault(item.split, set()).add(item.video_id)
        ids = [i.video_id for i in self.items]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate video ids in manifest")


@dataclass
class Dataset:
    manifest: DatasetManifest
    videos: list[StoredVideo]

    def split(self, name: str) -> list[StoredVideo]:
        return [v for v in self.videos if v.split == name]


@dataclass
class VideoClip:
    """Model-facing clip: float64 pixels [h, w, C, F] in [0, 1] plus label."""

    pixels: Tensor
    label: int
    source_id: str = ""


# -- generation --------------------------------------------------------------------


def _make_pair_frames(spec: SyntheticSpec, pair_rng: random.Random) -> list[array]:
    """One list of float32 frame buffers [H, W, C] with ramping blob intensity."""
    size = spec.image_size
    r = pair_rng.uniform(*spec.blob_radius) * size
    cx = pair_rng.uniform(r, size - r)
    cy = pair_rng.uniform(r, size - r)
    lo, hi = spec.ramp
    inv_r2 = 1.0 / (r * r)
    bump = [0.0] * (size * size)
    for y in range(size):
        dy2 = (y - cy) * (y - cy)
        for x in range(size):
            d2 = dy2 + (x - cx) * (x - cx)
            v = 1.0 - d2 * inv_r2
            bump[y * size + x] = v if v > 0.0 else 0.0
    frames = []
    denom = spec.frames - 1
    noise = spec.noise
    rnd = pair_rng.random
    for t in range(spec.frames):
        peak = lo + (hi - lo) * t / denom
        buf = array("f", bytes(4 * size * size * 3))
        pos = 0
        for y in range(size):
            row = y * size
            for x in range(size):
                b = bump[row + x] * peak
                for gain in CHANNEL_GAINS:
                    v = b * gain + (noise * rnd() if noise else 0.0)
                    buf[pos] = v if v < 1.0 else 1.0
                    pos += 1
        frames.append(buf)
    return frames


def _non_monotone_order(n: int, rng: random.Random) -> list[int]:
    """A permutation whose frame-intensity sequence is not monotone either way."""
    order = list(range(n))
    while True:
        rng.shuffle(order)
        if order != sorted(order) and order != sorted(order, reverse=True):
            return order


def _interleave(frames: list[array], order: list[int], spec: SyntheticSpec) -> array:
    """Assemble [H, W, C, F] storage from per-frame [H, W, C] buffers."""
    size = spec.image_size
    f_total = spec.frames
    out = array("f", bytes(4 * size * size * 3 * f_total))
    for t, src_t in enumerate(order):
        frame = frames[src_t]
        for p in range(size * size * 3):
            out[p * f_total + t] = frame[p]
    return out


def generate(
    spec: SyntheticSpec,
    count: int,
    *,
    val_fraction: float = 1 / 6,
    test_fraction: float = 0.0,
) -> Dataset:
    """Deterministically generate ``count`` items as positive/negative pairs.

    Items 2j and 2j+1 share one frame set (identical multisets across the
    classes); splits are assigned per pair so pairs never straddle splits.
    """
    if count < 1:
        raise ConfigError("count must be at least 1")
    if not 0 <= val_fraction + test_fraction < 1:
        raise ConfigError("val and test fractions must leave room for training items")
    n_pairs = (count + 1) // 2
    val_pairs = int(round(count * val_fraction)) // 2
    test_pairs = int(round(count * test_fraction)) // 2
    train_pairs = n_pairs - val_pairs - test_pairs
    if train_pairs < 1:
        raise ConfigError("split fractions leave no training pairs")
    videos: list[StoredVideo] = []
    for j in range(n_pairs):
        pair_rng = random.Random(f"{spec.seed}:pair:{j}")
        frames = _make_pair_frames(spec, pair_rng)
        identity = list(range(spec.frames))
        if spec.task is SyntheticTask.STATE_CHANGE:
            orders = (identity, _non_monotone_order(spec.frames, pair_rng))
        else:
            orders = (
                _non_monotone_order(spec.frames, pair_rng),
                _non_monotone_order(spec.frames, pair_rng),
            )
        if j < train_pairs:
            split = "train"
        elif j < train_pairs + val_pairs:
            split = "val"
        else:
            split = "test"
        for which, (label, order) in enumerate(zip((1, 0), orders)):
            index = 2 * j + which
            if index >= count:
                break
            videos.append(
                StoredVideo(
                    video_id=f"{spec.task.value}-{index:06d}",
                    label=label,
                    split=split,
                    height=spec.image_size,
                    width=spec.image_size,
                    channels=3,
                    frames=spec.frames,
                    pixels=_interleave(frames, order, spec),
                )
            )
    items = []
    offset = 0
    for v in videos:
        items.append(ManifestItem(v.video_id, v.label, v.split, offset, len(v.pixels)))
        offset += 4 * len(v.pixels)
    manifest = DatasetManifest(
        height=spec.image_size,
        width=spec.image_size,
        channels=3,
        frames=spec.frames,
        class_names=CLASS_NAMES,
        items=items,
    )
    return Dataset(manifest=manifest, videos=videos)


# -- on-disk format ----------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    """Text manifest header, then concatenated little-endian float32 payloads."""
    m = ds.manifest
    lines = [
        f"{DATASET_MAGIC} {DATASET_VERSION}",
        f"height {m.height}",
        f"width {m.width}",
        f"channels {m.channels}",
        f"frames {m.frames}",
        "classes " + " ".join(m.class_names),
        f"count {len(m.items)}",
    ]
    for item in m.items:
        lines.append(
            f"item {item.video_id} {item.label} {item.split} {item.offset} {item.n_values}"
        )
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for v in ds.videos:
            if sys.byteorder == "little":
                fh.write(v.pixels.tobytes())
            else:
                swapped = array("f", v.pixels)
                swapped.byteswap()
                fh.write(swapped.tobytes())


def load_dataset(path) -> Dataset:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    with fh:
        blob = fh.read()
    nl = blob.find(b"\nend\n")
    if nl < 0 or not blob.startswith(DATASET_MAGIC.encode("ascii")):
        raise DataError(f"{path} is not a dataset file")
    header = blob[: nl + 1].decode("ascii")
    payload = blob[nl + len(b"\nend\n") :]
    fields: dict[str, str] = {}
    items: list[ManifestItem] = []
    for line in header.splitlines()[1:]:
        parts = line.split()
        if parts[0] == "item":
            items.append(
                ManifestItem(parts[1], int(parts[2]), parts[3], int(parts[4]), int(parts[5]))
            )
        else:
            fields[parts[0]] = " ".join(parts[1:])
    try:
        manifest = DatasetManifest(
            height=int(fields["height"]),
            width=int(fields["width"]),
            channels=int(fields["channels"]),
            frames=int(fields["frames"]),
            class_names=tuple(fields["classes"].split()),
            items=items,
        )
    except KeyError as e:
        raise DataError(f"dataset header missing field {e}") from e
    if len(items) != int(fields.get("count", len(items))):
        raise DataError("item count does not match manifest header")
    videos = []
    for item in items:
        nbytes = 4 * item.n_values
        if item.offset + nbytes > len(payload):
            raise DataError(f"dataset payload truncated at item {item.video_id}")
        pixels = array("f")
        pixels.frombytes(payload[item.offset : item.offset + nbytes])
        if sys.byteorder != "little":
            pixels.byteswap()
        per_frame = manifest.height * manifest.width * manifest.channels
        videos.append(
            StoredVideo(
                video_id=item.video_id,
                label=item.label,
                split=item.split,
                height=manifest.height,
                width=manifest.width,
                channels=manifest.channels,
                frames=item.n_values // per_frame,
                pixels=pixels,
            )
        )
    return Dataset(manifest=manifest, videos=videos)


# -- clip sampling -----------------------------------------------------------------

_clip_idx_cache: dict[tuple, array] = {}


def _clip_indices(video_h: int, video_w: int, channels: int, video_f: int,
                  clip_h: int, clip_w: int, clip_f: int) -> array:
    """Base gather indices for a crop at (0, 0, 0); shift by an affine offset."""
    key = (video_h, video_w, channels, video_f, clip_h, clip_w, clip_f)
    idx = _clip_idx_cache.get(key)
    if idx is not None:
        return idx
    idx = array("q", bytes(8 * clip_h * clip_w * channels * clip_f))
    pos = 0
    for y in range(clip_h):
        for x in range(clip_w):
            for c in range(channels):
                base = ((y * video_w + x) * channels + c) * video_f
                for t in range(clip_f):
                    idx[pos] = base + t
                    pos += 1
    _clip_idx_cache[key] = idx
    return idx


def extract_clip(video: StoredVideo, cfg: "ModelConfig", t0: int, y0: int, x0: int) -> VideoClip:
    """Crop cfg.height x cfg.width at (y0, x0) and take cfg.n_frames from t0."""
    h, w, f = cfg.height, cfg.width, cfg.n_frames
    if video.height < h or video.width < w:
        raise DataError(
            f"video {video.video_id} is {video.height}x{video.width}, "
            f"smaller than the {h}x{w} crop"
        )
    if video.frames < f:
        raise DataError(f"video {video.video_id} has {video.frames} frames, needs {f}")
    if not (0 <= t0 <= video.frames - f and 0 <= y0 <= video.height - h
            and 0 <= x0 <= video.width - w):
        raise DataError(f"clip origin ({t0},{y0},{x0}) outside video {video.video_id}")
    if video.channels != cfg.channels:
        raise DataError(f"video has {video.channels} channels, config wants {cfg.channels}")
    idx = _clip_indices(video.height, video.width, video.channels, video.frames, h, w, f)
    offset = ((y0 * video.width + x0) * video.channels) * video.frames + t0
    n = len(idx)
    out = array("d", bytes(8 * n))
    backend.active.gather_f32(n, video.pixels, idx, offset, out)
    return VideoClip(Tensor((h, w, cfg.channels, f), out), video.label, video.video_id)


def sample_training_clip(video: StoredVideo, cfg: "ModelConfig", rng: random.Random) -> VideoClip:
    """Uniform consecutive-frame window plus one uniform spatial crop.

    Draw order is (t0, y0, x0), one ``randrange`` each.
    """
    if (video.frames < cfg.n_frames or video.height < cfg.height
            or video.width < cfg.width):
        raise DataError(
            f"video {video.video_id} ({video.height}x{video.width}x{video.frames}) "
            f"too small for {cfg.height}x{cfg.width}x{cfg.n_frames} clips"
        )
    t0 = rng.randrange(video.frames - cfg.n_frames + 1)
    y0 = rng.randrange(video.height - cfg.height + 1)
    x0 = rng.randrange(video.width - cfg.width + 1)
    return extract_clip(video, cfg, t0, y0, x0)


def _spread3(maximum: int) -> list[int]:
    return [0, maximum // 2, maximum]


def sample_inference_clips(
    video: StoredVideo,
    cfg: "ModelConfig",
    rng: random.Random,
    deterministic: bool = False,
) -> list[VideoClip]:
    """Three temporal windows x three spatial crops = exactly nine clips.

    Random mode draws (t0) then three (y0, x0) pairs per window.
    Deterministic mode uses evenly spaced windows and left/center/right
    crops at vertical center.
    """
    t_max = video.frames - cfg.n_frames
    y_max = video.height - cfg.height
    x_max = video.width - cfg.width
    if t_max < 0 or y_max < 0 or x_max < 0:
        raise DataError(f"video {video.video_id} too small for inference clips")
    clips = []
    if deterministic:
        for t0 in _spread3(t_max):
            for x0 in _spread3(x_max):
                clips.append(extract_clip(video, cfg, t0, y_max // 2, x0))
        return clips
    for _ in range(3):
        t0 = rng.randrange(t_max + 1)
        for _ in range(3):
            y0 = rng.randrange(y_max + 1)
            x0 = rng.randrange(x_max + 1)
            clips.append(extract_clip(video, cfg, t0, y0, x0))
    return clips


# -- resize ------------------------------------------------------------------------


def resize(frame: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of one [H, W, C] frame, corner-aligned.

    Output pixel (i, j) samples source coordinate
    (i * (H-1) / (out_h-1), j * (W-1) / (out_w-1)); a single output row or
    column samples coordinate 0.
    """
    if out_h <= 0 or out_w <= 0:
        raise ConfigError("resize targets must be positive")
    if frame.ndim != 3:
        raise DataError(f"resize expects [H, W, C], got {frame.shape}")
    h, w, c = frame.shape
    src = frame.data
    out = array("d", bytes(8 * out_h * out_w * c))
    sy = (h - 1) / (out_h - 1) if out_h > 1 else 0.0
    sx = (w - 1) / (out_w - 1) if out_w > 1 else 0.0
    pos = 0
    for i in range(out_h):
        fy = i * sy
        y0 = int(fy)
        y1 = min(y0 + 1, h - 1)
        wy = fy - y0
        for j in range(out_w):
            fx = j * sx
            x0 = int(fx)
            x1 = min(x0 + 1, w - 1)
            wx = fx - x0
            b00 = (y0 * w + x0) * c
            b01 = (y0 * w + x1) * c
            b10 = (y1 * w + x0) * c
            b11 = (y1 * w + x1) * c
            for ch in range(c):
                top = src[b00 + ch] * (1 - wx) + src[b01 + ch] * wx
                bot = src[b10 + ch] * (1 - wx) + src[b11 + ch] * wx
                out[pos] = top * (1 - wy) + bot * wy
                pos += 1
    return Tensor((out_h, out_w, c), out)
