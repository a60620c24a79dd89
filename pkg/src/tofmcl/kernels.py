"""Numba kernels over particle index ranges.

Every kernel touches only ``[start, end)`` of its outputs so disjoint ranges
can run concurrently; none of them allocates or takes the GIL.
"""

import math

import numba as nb
import numpy as np

from .grid_map import lookup_cell
from .rng import DOMAIN_INIT, DOMAIN_MOTION, normal_pair, uniform_pair

# weights >= 2**-9 land exactly on this grid; arrows stay below 2**62
FIXED_ONE = 1 << 61
TWO_PI = 2.0 * math.pi


@nb.njit(cache=True, nogil=True)
def _wrap(t):
    t = t % TWO_PI
    if t >= TWO_PI:
        t = 0.0
    return t


@nb.njit(cache=True, nogil=True)
def init_uniform(work, free_rows, free_cols, ox, oy, res, seed, start, end):
    n_free = free_rows.shape[0]
    inv_n = 1.0 / work.shape[1]
    for i in range(start, end):
        a, b = uniform_pair(seed, i, 0, 0, DOMAIN_INIT)
        c, d = uniform_pair(seed, i, 0, 1, DOMAIN_INIT)
        k = min(int(a * n_free), n_free - 1)
        work[0, i] = ox + (free_cols[k] + c) * res
        work[1, i] = oy + (free_rows[k] + d) * res
        work[2, i] = _wrap(b * TWO_PI)
        work[3, i] = inv_n


@nb.njit(cache=True, nogil=True)
def predict(work, dx, dy, dth, sx, sy, st, seed, epoch, start, end):
    for i in range(start, end):
        n0, n1 = normal_pair(seed, i, epoch, 0, DOMAIN_MOTION)
        n2, _ = normal_pair(seed, i, epoch, 1, DOMAIN_MOTION)
        ux = dx + sx * n0
        uy = dy + sy * n1
        ut = dth + st * n2
        th = work[2, i]
        c = math.cos(th)
        s = math.sin(th)
        work[0, i] = work[0, i] + c * ux - s * uy
        work[1, i] = work[1, i] + s * ux + c * uy
        work[2, i] = _wrap(th + ut)


@nb.njit(cache=True, nogil=True)
def log_weights(work, angles, ranges, values, table, quantized, ox, oy, inv_res, r_max,
                inv_two_var, log_norm, out, start, end):
    """out[i] = log(w_i) + beam end-point log-likelihood; returns the range max."""
    best = -np.inf
    nb_ = angles.shape[0]
    for i in range(start, end):
        px = work[0, i]
        py = work[1, i]
        th = work[2, i]
        acc = 0.0
        for k in range(nb_):
            h = th + angles[k]
            ex = px + ranges[k] * math.cos(h)
            ey = py + ranges[k] * math.sin(h)
            d = lookup_cell(values, table, quantized, ox, oy, inv_res, r_max, ex, ey)
            acc -= d * d * inv_two_var
        w = work[3, i]
        lw = (math.log(w) if w > 0.0 else -np.inf) + acc - nb_ * log_norm
        out[i] = lw
        if lw > best:
            best = lw
    return best


@nb.njit(cache=True, nogil=True)
def exp_shift(lw, shift, scratch, block_sums, block, start, end):
    """scratch = exp(lw - shift) with per-block partial sums; start must be block-aligned."""
    for b0 in range(start, end, block):
        b1 = min(b0 + block, end)
        s = 0.0
        for i in range(b0, b1):
            v = math.exp(lw[i] - shift)
            scratch[i] = v
            s += v
        block_sums[b0 // block] = s


@nb.njit(cache=True, nogil=True)
def scale_weights(work, scratch, inv_total, start, end):
    for i in range(start, end):
        work[3, i] = scratch[i] * inv_total


@nb.njit(cache=True, nogil=True)
def pose_sums(work, block_sums, block, start, end):
    """Per-block sums of w, w*x, w*y, w*sin(theta), w*cos(theta)."""
    for b0 in range(start, end, block):
        b1 = min(b0 + block, end)
        sw = 0.0
        sx = 0.0
        sy = 0.0
        ss = 0.0
        sc = 0.0
        for i in range(b0, b1):
            w = work[3, i]
            sw += w
            sx += w * work[0, i]
            sy += w * work[1, i]
            ss += w * math.sin(work[2, i])
            sc += w * math.cos(work[2, i])
        j = b0 // block
        block_sums[0, j] = sw
        block_sums[1, j] = sx
        block_sums[2, j] = sy
        block_sums[3, j] = ss
        block_sums[4, j] = sc


@nb.njit(cache=True, nogil=True)
def fixed_weights(weights, out, start, end):
    """Weights as integers on a 2**-61 grid; returns the range sum."""
    s = 0
    for i in range(start, end):
        v = np.int64(np.rint(weights[i] * FIXED_ONE))
        out[i] = v
        s += v
    return s


@nb.njit(cache=True, nogil=True)
def arrow(i, offset, q, r, n, carry):
    """Integer position of resampling arrow i, floor((u0 + i / n) * total), exactly.

    ``offset`` is floor(u0 * total); the dropped fraction of u0 * total adds
    one more unit once the remainder of i * total / n reaches ``carry``.
    """
    m = i * r
    a = offset + i * q + m // n
    if m % n >= carry:
        a += 1
    return a


@nb.njit(cache=True, nogil=True)
def first_arrow_at_or_above(bound, offset, q, r, n, carry):
    lo = 0
    hi = n
    while lo < hi:
        mid = (lo + hi) // 2
        if arrow(mid, offset, q, r, n, carry) >= bound:
            hi = mid
        else:
            lo = mid + 1
    return lo


@nb.njit(cache=True, nogil=True)
def systematic_indices(fixed, k_start, cum_start, i_start, i_end, offset, q, r, carry, out):
    """Fill out[i_start:i_end] with source indices, walking inputs from k_start."""
    n = fixed.shape[0]
    k = k_start
    c = cum_start + fixed[k]
    for i in range(i_start, i_end):
        a = arrow(i, offset, q, r, n, carry)
        while a >= c:
            k += 1
            c += fixed[k]
        out[i] = k


@nb.njit(cache=True, nogil=True)
def gather(src, dst, idx, weight, start, end):
    for i in range(start, end):
        k = idx[i]
        dst[0, i] = src[0, k]
        dst[1, i] = src[1, k]
        dst[2, i] = src[2, k]
        dst[3, i] = weight
