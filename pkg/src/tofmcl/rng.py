"""Counter-based random streams (Philox4x32-10).

Every draw is a pure function of ``(seed, stream, epoch, index)``, so a
particle's noise does not depend on which worker evaluates it or in what
order. Stream ids are particle indices; a few reserved stream ids carry
pool-level draws such as the resampling offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)

# domain tags, stored in the fourth counter word
DOMAIN_INIT = 1
DOMAIN_MOTION = 2
DOMAIN_RESAMPLE = 3
DOMAIN_SENSOR = 4
DOMAIN_ODOM = 5

POOL_STREAM = 0xFFFFFFFF

_TWO_M53 = 1.0 / 9007199254740992.0


@nb.njit(cache=True, nogil=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds on a 128-bit counter under a 64-bit key."""
    c0 = np.uint64(c0) & _MASK32
    c1 = np.uint64(c1) & _MASK32
    c2 = np.uint64(c2) & _MASK32
    c3 = np.uint64(c3) & _MASK32
    k0 = np.uint64(k0) & _MASK32
    k1 = np.uint64(k1) & _MASK32
    for r in range(10):
        if r > 0:
            k0 = (k0 + np.uint64(_W0)) & _MASK32
            k1 = (k1 + np.uint64(_W1)) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> np.uint64(32)
        lo0 = p0 & _MASK32
        hi1 = p1 >> np.uint64(32)
        lo1 = p1 & _MASK32
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
    return np.uint32(c0), np.uint32(c1), np.uint32(c2), np.uint32(c3)


@nb.njit(cache=True, nogil=True)
def uniform_pair(seed, stream, epoch, index, domain):
    """Two independent uniforms in [0, 1) with 53-bit resolution."""
    k0 = np.uint64(seed) & _MASK32
    k1 = np.uint64(seed) >> np.uint64(32)
    a, b, c, d = philox4x32(index, epoch, stream, domain, k0, k1)
    u = ((np.uint64(a) >> np.uint64(5)) * np.uint64(67108864) + (np.uint64(b) >> np.uint64(6))) * _TWO_M53
    v = ((np.uint64(c) >> np.uint64(5)) * np.uint64(67108864) + (np.uint64(d) >> np.uint64(6))) * _TWO_M53
    return u, v


@nb.njit(cache=True, nogil=True)
def normal_pair(seed, stream, epoch, index, domain):
    """Two independent standard normals via Box-Muller."""
    u, v = uniform_pair(seed, stream, epoch, index, domain)
    r = math.sqrt(-2.0 * math.log(1.0 - u))
    t = 2.0 * math.pi * v
    return r * math.cos(t), r * math.sin(t)


@nb.njit(cache=True, nogil=True)
def _fill_uniform(out, seed, stream, epoch, domain, start):
    n = out.shape[0]
    for j in range(0, n, 2):
        u, v = uniform_pair(seed, stream, epoch, start + j // 2, domain)
        out[j] = u
        if j + 1 < n:
            out[j + 1] = v


@nb.njit(cache=True, nogil=True)
def _fill_normal(out, seed, stream, epoch, domain, start):
    n = out.shape[0]
    for j in range(0, n, 2):
        g, h = normal_pair(seed, stream, epoch, start + j // 2, domain)
        out[j] = g
        if j + 1 < n:
            out[j + 1] = h


@dataclass
class RandomStream:
    """A resumable view onto one Philox stream.

    ``counter`` counts consumed Philox blocks (two doubles each) and is the
    only mutable state, which makes checkpointing trivial.
    """

    seed: int
    stream: int = 0
    epoch: int = 0
    domain: int = DOMAIN_SENSOR
    counter: int = 0

    def uniform(self, size: int) -> np.ndarray:
        out = np.empty(size, dtype=np.float64)
        _fill_uniform(out, np.uint64(self.seed), self.stream, self.epoch, self.domain, self.counter)
        self.counter += (size + 1) // 2
        return out

    def normal(self, size: int) -> np.ndarray:
        out = np.empty(size, dtype=np.float64)
        _fill_normal(out, np.uint64(self.seed), self.stream, self.epoch, self.domain, self.counter)
        self.counter += (size + 1) // 2
        return out

    def spawn(self, stream: int, domain: int | None = None) -> "RandomStream":
        return RandomStream(self.seed, stream, self.epoch, self.domain if domain is None else domain)
