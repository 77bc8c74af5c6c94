"""Cost-model and backend benchmarks.

Two tables: one comparing the three attention schemes (analytic
multiply-add model vs the count metered from an executed gathered forward,
plus measured wall time), and one comparing the compiled kernel backend
against the pure-Python fallback on the same workloads.
"""

from __future__ import annotations

import random
import time
from array import array
from dataclasses import dataclass, replace

from . import backend
from .attention import AttentionScheme, attention_flops, count_attention_macs
from .model import ModelConfig, VideoTransformer
from .tensor import Tensor


def _random_tokens(count: int, dim: int, seed: int) -> Tensor:
    rng = random.Random(f"bench-tokens:{seed}")
    return Tensor((count, dim), array("d", [rng.gauss(0.0, 1.0) for _ in range(count * dim)]))


def instrumented_block_macs(cfg: ModelConfig, seed: int = 0) -> int:
    """Multiply-adds metered from one executed gathered-path block."""
    block_cfg = replace(cfg, depth=1)
    model = VideoTransformer(block_cfg, seed=seed)
    x = _random_tokens(block_cfg.token_count, block_cfg.dim, seed)
    with count_attention_macs() as meter:
        model.block_forward(x, 0, path="gathered")
    return meter.total


@dataclass
class SchemeRow:
    scheme: str
    analytic_per_block: int
    metered_per_block: int
    masked_ms: float
    gathered_ms: float

    @property
    def consistent(self) -> bool:
        return self.analytic_per_block == self.metered_per_block


def scheme_table(cfg: ModelConfig, seed: int = 0) -> list[SchemeRow]:
    rows = []
    for scheme in AttentionScheme:
        scfg = replace(cfg, scheme=scheme, depth=1)
        model = VideoTransformer(scfg, seed=seed)
        x = _random_tokens(scfg.token_count, scfg.dim, seed)
        timings = {}
        for path in ("masked", "gathered"):
            start = time.perf_counter()
            model.block_forward(x, 0, path=path)
            timings[path] = (time.perf_counter() - start) * 1e3
        rows.append(
            SchemeRow(
                scheme=scheme.value,
                analytic_per_block=attention_flops(scfg, scheme),
                metered_per_block=instrumented_block_macs(scfg, seed),
                masked_ms=timings["masked"],
                gathered_ms=timings["gathered"],
            )
        )
    return rows


def format_scheme_table(rows: list[SchemeRow], cfg: ModelConfig) -> str:
    lines = [
        f"attention cost per block (multiply-adds), frames={cfg.n_frames} "
        f"patches={cfg.n_patches} dim={cfg.dim} heads={cfg.n_heads}",
        f"{'scheme':<8} {'analytic':>14} {'metered':>14} {'match':>6} "
        f"{'masked_ms':>10} {'gathered_ms':>12}",
    ]
    for r in rows:
        lines.append(
            f"{r.scheme:<8} {r.analytic_per_block:>14} {r.metered_per_block:>14} "
            f"{'yes' if r.consistent else 'NO':>6} {r.masked_ms:>10.2f} {r.gathered_ms:>12.2f}"
        )
    return "\n".join(lines)


# -- backend comparison ---------------------------------------------------------


@dataclass
class BackendRow:
    workload: str
    python_ms: float
    c_ms: float | None

    @property
    def speedup(self) -> float | None:
        if self.c_ms is None or self.c_ms == 0:
            return None
        return self.python_ms / self.c_ms


def _time_kernel(fn, *args, repeats: int = 3) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best * 1e3


def backend_table(seed: int = 0) -> list[BackendRow]:
    """Same workloads on both kernel sets; the compiled column is None if unbuilt."""
    rng = random.Random(f"bench-backend:{seed}")
    n = 96
    a = array("d", [rng.gauss(0.0, 1.0) for _ in range(n * n)])
    b = array("d", [rng.gauss(0.0, 1.0) for _ in range(n * n)])
    out = array("d", bytes(8 * n * n))
    rows_x = array("d", [rng.gauss(0.0, 1.0) for _ in range(256 * 64)])
    rows_out = array("d", bytes(8 * 256 * 64))
    gamma = array("d", [1.0] * 64)
    beta = array("d", bytes(8 * 64))
    xhat = array("d", bytes(8 * 256 * 64))
    inv_std = array("d", bytes(8 * 256))

    workloads = [
        (f"matmul {n}x{n}x{n}", "mm_nn", (n, n, n, a, b, out, False)),
        ("softmax 256x64", "softmax_mid", (256, 64, 1, rows_x, rows_out)),
        ("layernorm 256x64", "layernorm_rows",
         (256, 64, 1e-6, rows_x, gamma, beta, rows_out, xhat, inv_std)),
        ("gelu 16384", "gelu", (256 * 64, rows_x, rows_out)),
    ]
    table = []
    for label, kernel, args in workloads:
        py_ms = _time_kernel(getattr(backend.get("python"), kernel), *args)
        c_ms = None
        if backend.compiled_available():
            c_ms = _time_kernel(getattr(backend.get("c"), kernel), *args)
        table.append(BackendRow(label, py_ms, c_ms))

    def model_forward(kernels_name: str) -> None:
        with backend.use(kernels_name):
            cfg = ModelConfig()
            model = VideoTransformer(cfg, seed=seed)
            x = _random_tokens(cfg.token_count, cfg.dim, seed)
            model.block_forward(x, 0)

    py_ms = _time_kernel(model_forward, "python", repeats=1)
    c_ms = _time_kernel(model_forward, "c", repeats=1) if backend.compiled_available() else None
    table.append(BackendRow("encoder block forward (desk config)", py_ms, c_ms))
    return table


def format_backend_table(rows: list[BackendRow]) -> str:
    lines = [
        f"kernel backends: active={backend.name()}, compiled available="
        f"{'yes' if backend.compiled_available() else 'no'}",
        f"{'workload':<36} {'python_ms':>10} {'c_ms':>10} {'speedup':>8}",
    ]
    for r in rows:
        c_ms = f"{r.c_ms:.3f}" if r.c_ms is not None else "-"
        speedup = f"{r.speedup:.1f}x" if r.speedup is not None else "-"
        lines.append(f"{r.workload:<36} {r.python_ms:>10.3f} {c_ms:>10} {speedup:>8}")
    return "\n".join(lines)
