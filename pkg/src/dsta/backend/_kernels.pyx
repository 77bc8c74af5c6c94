# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel set: the hot twin of ``kernels_py``.

Loop orders mirror the pure-Python backend exactly and the module is built
without -ffast-math (and with contraction off), so results are bit-identical
to the fallback. Keep both files in sync.
"""

from libc.math cimport erf, exp, isfinite, sqrt

NAME = "c"
COMPILED = True


def mm_nn(Py_ssize_t m, Py_ssize_t k, Py_ssize_t n,
          double[::1] a, double[::1] b, double[::1] out, bint acc):
    """out[m,n] = a[m,k] @ b[k,n]; accumulates into out when acc is true."""
    cdef Py_ssize_t i, p, j, arow, orow, brow
    cdef double aip
    with nogil:
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


def transpose(Py_ssize_t rows, Py_ssize_t cols, double[::1] a, double[::1] out):
    cdef Py_ssize_t i, j, base
    with nogil:
        for i in range(rows):
            base = i * cols
            for j in range(cols):
                out[j * rows + i] = a[base + j]


def softmax_mid(Py_ssize_t outer, Py_ssize_t size, Py_ssize_t inner,
                double[::1] x, double[::1] out):
    """Softmax along the middle axis of an (outer, size, inner) view."""
    cdef Py_ssize_t o, c, i, base
    cdef double m, total, v, e
    with nogil:
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
                    e = exp(x[base + i * inner] - m)
                    out[base + i * inner] = e
                    total += e
                for i in range(size):
                    out[base + i * inner] /= total


def softmax_bwd_mid(Py_ssize_t outer, Py_ssize_t size, Py_ssize_t inner,
                    double[::1] y, double[::1] dy, double[::1] dx):
    """dx += y * (dy - sum(y * dy)) along the middle axis."""
    cdef Py_ssize_t o, c, i, base, p
    cdef double dot
    with nogil:
        for o in range(outer):
            for c in range(inner):
                base = o * size * inner + c
                dot = 0.0
                for i in range(size):
                    dot += y[base + i * inner] * dy[base + i * inner]
                for i in range(size):
                    p = base + i * inner
                    dx[p] += y[p] * (dy[p] - dot)


def layernorm_rows(Py_ssize_t rows, Py_ssize_t d, double eps,
                   double[::1] x, double[::1] gamma, double[::1] beta,
                   double[::1] out, double[::1] xhat, double[::1] inv_std):
    """Per-row layer norm with population variance; caches xhat and 1/std."""
    cdef Py_ssize_t r, j, base
    cdef double mean, var, diff, istd, h
    with nogil:
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
            istd = 1.0 / sqrt(var + eps)
            inv_std[r] = istd
            for j in range(d):
                h = (x[base + j] - mean) * istd
                xhat[base + j] = h
                out[base + j] = h * gamma[j] + beta[j]


def layernorm_bwd_rows(Py_ssize_t rows, Py_ssize_t d,
                       double[::1] dy, double[::1] gamma, double[::1] xhat,
                       double[::1] inv_std, double[::1] dx,
                       double[::1] dgamma, double[::1] dbeta):
    cdef Py_ssize_t r, j, base, p
    cdef double sum_dh, sum_dh_xhat, istd, dh
    with nogil:
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


cdef double _INV_SQRT2 = 0.7071067811865476
cdef double _INV_SQRT_2PI = 0.3989422804014327


def gelu(Py_ssize_t n, double[::1] x, double[::1] out):
    """x * Phi(x) with the exact erf-based normal CDF."""
    cdef Py_ssize_t i
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            out[i] = v * 0.5 * (1.0 + erf(v * _INV_SQRT2))


def gelu_bwd(Py_ssize_t n, double[::1] x, double[::1] dy, double[::1] dx):
    """dx += dy * (Phi(x) + x * phi(x))."""
    cdef Py_ssize_t i
    cdef double v, cdf, pdf
    with nogil:
        for i in range(n):
            v = x[i]
            cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
            pdf = _INV_SQRT_2PI * exp(-0.5 * v * v)
            dx[i] += dy[i] * (cdf + v * pdf)


def add_v(Py_ssize_t n, double[::1] a, double[::1] b, double[::1] out):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = a[i] + b[i]


def sub_v(Py_ssize_t n, double[::1] a, double[::1] b, double[::1] out):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = a[i] - b[i]


def mul_v(Py_ssize_t n, double[::1] a, double[::1] b, double[::1] out):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = a[i] * b[i]


def scale_v(Py_ssize_t n, double alpha, double[::1] a, double[::1] out):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = alpha * a[i]


def axpy(Py_ssize_t n, double alpha, double[::1] x, double[::1] y):
    """y += alpha * x."""
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            y[i] += alpha * x[i]


def mul_acc(Py_ssize_t n, double[::1] a, double[::1] b, double[::1] out):
    """out += a * b elementwise."""
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] += a[i] * b[i]


def acc_scalar(Py_ssize_t n, double alpha, double[::1] out):
    """out += alpha everywhere."""
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] += alpha


def axpy_rows(Py_ssize_t rows, Py_ssize_t d, double alpha, double[::1] x_row, double[::1] y):
    """y[r, :] += alpha * x_row for every row r."""
    cdef Py_ssize_t r, j, base
    with nogil:
        for r in range(rows):
            base = r * d
            for j in range(d):
                y[base + j] += alpha * x_row[j]


def add_bias_rows(Py_ssize_t rows, Py_ssize_t d, double[::1] x, double[::1] bias,
                  double[::1] out):
    cdef Py_ssize_t r, j, base
    with nogil:
        for r in range(rows):
            base = r * d
            for j in range(d):
                out[base + j] = x[base + j] + bias[j]


def colsum_acc(Py_ssize_t rows, Py_ssize_t d, double[::1] x, double[::1] out):
    """out[j] += sum over rows of x[r, j]."""
    cdef Py_ssize_t r, j, base
    with nogil:
        for r in range(rows):
            base = r * d
            for j in range(d):
                out[j] += x[base + j]


def copy_cols(Py_ssize_t rows, Py_ssize_t src_cols, Py_ssize_t start, Py_ssize_t width,
              double[::1] src, double[::1] out):
    """out[r, :] = src[r, start:start+width]."""
    cdef Py_ssize_t r, j, sbase, obase
    with nogil:
        for r in range(rows):
            sbase = r * src_cols + start
            obase = r * width
            for j in range(width):
                out[obase + j] = src[sbase + j]


def acc_cols_into(Py_ssize_t rows, Py_ssize_t dst_cols, Py_ssize_t start, Py_ssize_t width,
                  double[::1] src, double[::1] dst):
    """dst[r, start:start+width] += src[r, :]."""
    cdef Py_ssize_t r, j, dbase, sbase
    with nogil:
        for r in range(rows):
            dbase = r * dst_cols + start
            sbase = r * width
            for j in range(width):
                dst[dbase + j] += src[sbase + j]


def paste_cols(Py_ssize_t rows, Py_ssize_t dst_cols, Py_ssize_t start, Py_ssize_t width,
               double[::1] src, double[::1] dst):
    """dst[r, start:start+width] = src[r, :]."""
    cdef Py_ssize_t r, j, dbase, sbase
    with nogil:
        for r in range(rows):
            dbase = r * dst_cols + start
            sbase = r * width
            for j in range(width):
                dst[dbase + j] = src[sbase + j]


def acc_cols_from(Py_ssize_t rows, Py_ssize_t src_cols, Py_ssize_t start, Py_ssize_t width,
                  double[::1] src, double[::1] dst):
    """dst[r, :] += src[r, start:start+width]."""
    cdef Py_ssize_t r, j, sbase, dbase
    with nogil:
        for r in range(rows):
            sbase = r * src_cols + start
            dbase = r * width
            for j in range(width):
                dst[dbase + j] += src[sbase + j]


def bounds_check(Py_ssize_t n, long long[::1] idx, long long limit):
    """Count of indices outside [0, limit)."""
    cdef Py_ssize_t i
    cdef long long v
    cdef int bad = 0
    with nogil:
        for i in range(n):
            v = idx[i]
            if v < 0 or v >= limit:
                bad += 1
    return bad


def scale_add(Py_ssize_t n, double alpha, double[::1] a, double[::1] b, double[::1] out):
    """out = alpha * a + b."""
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = alpha * a[i] + b[i]


def gather_rows(Py_ssize_t n_idx, Py_ssize_t d, double[::1] src, long long[::1] idx,
                double[::1] out):
    cdef Py_ssize_t r, j, sbase, obase
    with nogil:
        for r in range(n_idx):
            sbase = idx[r] * d
            obase = r * d
            for j in range(d):
                out[obase + j] = src[sbase + j]


def scatter_add_rows(Py_ssize_t n_idx, Py_ssize_t d, double[::1] src, long long[::1] idx,
                     double[::1] dst):
    cdef Py_ssize_t r, j, dbase, sbase
    with nogil:
        for r in range(n_idx):
            dbase = idx[r] * d
            sbase = r * d
            for j in range(d):
                dst[dbase + j] += src[sbase + j]


def gather_f64(Py_ssize_t n, double[::1] src, long long[::1] idx, Py_ssize_t offset,
               double[::1] out):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = src[idx[i] + offset]


def scatter_add_flat(Py_ssize_t n, double[::1] src, long long[::1] idx, double[::1] dst):
    """dst[idx[i]] += src[i]."""
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            dst[idx[i]] += src[i]


def gather_f32(Py_ssize_t n, float[::1] src, long long[::1] idx, Py_ssize_t offset,
               double[::1] out):
    """Gather from a float32 buffer into a float64 one (exact widening)."""
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = src[idx[i] + offset]


def sum_all(Py_ssize_t n, double[::1] x):
    cdef Py_ssize_t i
    cdef double total = 0.0
    with nogil:
        for i in range(n):
            total += x[i]
    return total


def count_nonfinite(Py_ssize_t n, double[::1] x):
    cdef Py_ssize_t i
    cdef int bad = 0
    with nogil:
        for i in range(n):
            if not isfinite(x[i]):
                bad += 1
    return bad


def sgd_update(Py_ssize_t n, double[::1] p, double[::1] g, double[::1] buf,
               double lr, double momentum, double wd):
    """Classic SGD with momentum; weight decay folded into the raw gradient."""
    cdef Py_ssize_t i
    cdef double gi
    with nogil:
        for i in range(n):
            gi = g[i] + wd * p[i]
            buf[i] = momentum * buf[i] + gi
            p[i] -= lr * buf[i]
