"""Pure-Python kernel set: the fallback backend and the readability reference.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature and, crucially, the same floating-point evaluation order, so the
two backends produce bit-identical results. Keep loop orders in sync when
editing either file.

Buffers are flat row-major float64 sequences (``array('d')`` or memoryviews
of one); index buffers are int64 (``array('q')``).
"""

import math

NAME = "python"
COMPILED = False


def mm_nn(m: int, k: int, n: int, a, b, out, acc: bool) -> None:
    """out[m,n] = a[m,k] @ b[k,n]; accumulates into out when acc is true."""
    if not acc:
        for i in range(m * n):
            out[i] = 0.0
    for i in range(m):
        arow = i * k
        orow = i * n
        for p in range(k):
            aip = a[arow + p]
            if aip == 0.0:
                continue
            brow = p * n
            for j in range(n):
                out[orow + j] += aip * b[brow + j]


def transpose(rows: int, cols: int, a, out) -> None:
    for i in range(rows):
        base = i * cols
        for j in range(cols):
            out[j * rows + i] = a[base + j]


def softmax_mid(outer: int, size: int, inner: int, x, out) -> None:
    """Softmax along the middle axis of an (outer, size, inner) view."""
    for o in range(outer):
        for c in range(inner):
            base = o * size * inner + c
            m = x[base]
            for i in range(1, size):
                v = x[base + i * inner]
                if v > m:
                    m = v
            total = 0.0
            for i in range(size):
                e = math.exp(x[base + i * inner] - m)
                out[base + i * inner] = e
                total += e
            for i in range(size):
                out[base + i * inner] /= total


def softmax_bwd_mid(outer: int, size: int, inner: int, y, dy, dx) -> None:
    """dx += y * (dy - sum(y * dy)) along the middle axis."""
    for o in range(outer):
        for c in range(inner):
            base = o * size * inner + c
            dot = 0.0
            for i in range(size):
                dot += y[base + i * inner] * dy[base + i * inner]
            for i in range(size):
                p = base + i * inner
                dx[p] += y[p] * (dy[p] - dot)


def layernorm_rows(rows: int, d: int, eps: float, x, gamma, beta, out, xhat, inv_std) -> None:
    """Per-row layer norm with population variance; caches xhat and 1/std."""
    for r in range(rows):
        base = r * d
        mean = 0.0
        for j in range(d):
            mean += x[base + j]
        mean /= d
        var = 0.0
        for j in range(d):
            diff = x[base + j] - mean
            var += diff * diff
        var /= d
        istd = 1.0 / math.sqrt(var + eps)
        inv_std[r] = istd
        for j in range(d):
            h = (x[base + j] - mean) * istd
            xhat[base + j] = h
            out[base + j] = h * gamma[j] + beta[j]


def layernorm_bwd_rows(rows: int, d: int, dy, gamma, xhat, inv_std, dx, dgamma, dbeta) -> None:
    for r in range(rows):
        base = r * d
        sum_dh = 0.0
        sum_dh_xhat = 0.0
        for j in range(d):
            dh = dy[base + j] * gamma[j]
            sum_dh += dh
            sum_dh_xhat += dh * xhat[base + j]
        istd = inv_std[r]
        for j in range(d):
            p = base + j
            dh = dy[p] * gamma[j]
            dx[p] += istd * (dh - (sum_dh + xhat[p] * sum_dh_xhat) / d)
            dgamma[j] += dy[p] * xhat[p]
            dbeta[j] += dy[p]


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(n: int, x, out) -> None:
    """x * Phi(x) with the exact erf-based normal CDF."""
    for i in range(n):
        v = x[i]
        out[i] = v * 0.5 * (1.0 + math.erf(v * _INV_SQRT2))


def gelu_bwd(n: int, x, dy, dx) -> None:
    """dx += dy * (Phi(x) + x * phi(x))."""
    for i in range(n):
        v = x[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
        dx[i] += dy[i] * (cdf + v * pdf)


def add_v(n: int, a, b, out) -> None:
    for i in range(n):
        out[i] = a[i] + b[i]


def sub_v(n: int, a, b, out) -> None:
    for i in range(n):
        out[i] = a[i] - b[i]


def mul_v(n: int, a, b, out) -> None:
    for i in range(n):
        out[i] = a[i] * b[i]


def scale_v(n: int, alpha: float, a, out) -> None:
    for i in range(n):
        out[i] = alpha * a[i]


def axpy(n: int, alpha: float, x, y) -> None:
    """y += alpha * x."""
    for i in range(n):
        y[i] += alpha * x[i]


def mul_acc(n: int, a, b, out) -> None:
    """out += a * b elementwise."""
    for i in range(n):
        out[i] += a[i] * b[i]


def acc_scalar(n: int, alpha: float, out) -> None:
    """out += alpha everywhere."""
    for i in range(n):
        out[i] += alpha


def axpy_rows(rows: int, d: int, alpha: float, x_row, y) -> None:
    """y[r, :] += alpha * x_row for every row r."""
    for r in range(rows):
        base = r * d
        for j in range(d):
            y[base + j] += alpha * x_row[j]


def add_bias_rows(rows: int, d: int, x, bias, out) -> None:
    for r in range(rows):
        base = r * d
        for j in range(d):
            out[base + j] = x[base + j] + bias[j]


def colsum_acc(rows: int, d: int, x, out) -> None:
    """out[j] += sum over rows of x[r, j]."""
    for r in range(rows):
        base = r * d
        for j in range(d):
            out[j] += x[base + j]


def copy_cols(rows: int, src_cols: int, start: int, width: int, src, out) -> None:
    """out[r, :] = src[r, start:start+width]."""
    for r in range(rows):
        sbase = r * src_cols + start
        obase = r * width
        for j in range(width):
            out[obase + j] = src[sbase + j]


def acc_cols_into(rows: int, dst_cols: int, start: int, width: int, src, dst) -> None:
    """dst[r, start:start+width] += src[r, :]."""
    for r in range(rows):
        dbase = r * dst_cols + start
        sbase = r * width
        for j in range(width):
            dst[dbase + j] += src[sbase + j]


def paste_cols(rows: int, dst_cols: int, start: int, width: int, src, dst) -> None:
    """dst[r, start:start+width] = src[r, :]."""
    for r in range(rows):
        dbase = r * dst_cols + start
        sbase = r * width
        for j in range(width):
            dst[dbase + j] = src[sbase + j]


def acc_cols_from(rows: int, src_cols: int, start: int, width: int, src, dst) -> None:
    """dst[r, :] += src[r, start:start+width]."""
    for r in range(rows):
        sbase = r * src_cols + start
        dbase = r * width
        for j in range(width):
            dst[dbase + j] += src[sbase + j]


def bounds_check(n: int, idx, limit: int) -> int:
    """Count of indices outside [0, limit)."""
    bad = 0
    for i in range(n):
        v = idx[i]
        if v < 0 or v >= limit:
            bad += 1
    return bad


def scale_add(n: int, alpha: float, a, b, out) -> None:
    """out = alpha * a + b."""
    for i in range(n):
        out[i] = alpha * a[i] + b[i]


def gather_rows(n_idx: int, d: int, src, idx, out) -> None:
    for r in range(n_idx):
        sbase = idx[r] * d
        obase = r * d
        for j in range(d):
            out[obase + j] = src[sbase + j]


def scatter_add_rows(n_idx: int, d: int, src, idx, dst) -> None:
    for r in range(n_idx):
        dbase = idx[r] * d
        sbase = r * d
        for j in range(d):
            dst[dbase + j] += src[sbase + j]


def gather_f64(n: int, src, idx, offset: int, out) -> None:
    for i in range(n):
        out[i] = src[idx[i] + offset]


def scatter_add_flat(n: int, src, idx, dst) -> None:
    """dst[idx[i]] += src[i]."""
    for i in range(n):
        dst[idx[i]] += src[i]


def gather_f32(n: int, src, idx, offset: int, out) -> None:
    """Gather from a float32 buffer into a float64 one (exact widening)."""
    for i in range(n):
        out[i] = src[idx[i] + offset]


def sum_all(n: int, x) -> float:
    total = 0.0
    for i in range(n):
        total += x[i]
    return total


def count_nonfinite(n: int, x) -> int:
    bad = 0
    for i in range(n):
        if not math.isfinite(x[i]):
            bad += 1
    return bad


def sgd_update(n: int, p, g, buf, lr: float, momentum: float, wd: float) -> None:
    """Classic SGD with momentum; weight decay folded into the raw gradient."""
    for i in range(n):
        gi = g[i] + wd * p[i]
        buf[i] = momentum * buf[i] + gi
        p[i] -= lr * buf[i]
