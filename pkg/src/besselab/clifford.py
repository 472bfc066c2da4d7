"""Clifford algebra of Euclidean R^m and the double cover Spin(m) -> SO(m).

Multivectors are dense arrays of length 2^m indexed by blade bitmasks;
bit i set means e_i is a factor, factors sorted by index.  Basis vectors
square to +1.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import InvalidInput

M_MAX = 8


def _popcount(x: np.ndarray) -> np.ndarray:
    c = np.zeros_like(x)
    while np.any(x):
        c += x & 1
        x = x >> 1
    return c


@lru_cache(maxsize=None)
def _tables(m: int):
    n = 1 << m
    idx = np.arange(n)
    A, B = np.meshgrid(idx, idx, indexing="ij")
    swaps = np.zeros((n, n), dtype=np.int64)
    # moving each e_j of B leftwards past the factors of A with larger index
    for j in range(m):
        bj = (B >> j) & 1
        swaps += bj * _popcount(A >> (j + 1))
    sign = np.where(swaps % 2 == 0, 1.0, -1.0)
    grade = _popcount(idx)
    rev = np.where((grade * (grade - 1) // 2) % 2 == 0, 1.0, -1.0)
    return (A ^ B).ravel(), sign, rev


class Clifford:
    def __init__(self, m: int):
        if not 1 <= m <= M_MAX:
            raise InvalidInput(f"Clifford algebra supported for 1 <= m <= {M_MAX}, got {m}")
        self.m = m
        self.n = 1 << m
        self._target, self._sign, self._rev = _tables(m)

    def one(self) -> np.ndarray:
        x = np.zeros(self.n)
        x[0] = 1.0
        return x

    def vector(self, v) -> np.ndarray:
        x = np.zeros(self.n)
        for i, c in enumerate(v):
            x[1 << i] = c
        return x

    def vector_part(self, x) -> np.ndarray:
        return np.array([x[1 << i] for i in range(self.m)])

    def mul(self, a, b) -> np.ndarray:
        w = (np.outer(a, b) * self._sign).ravel()
        return np.bincount(self._target, weights=w, minlength=self.n)

    def reverse(self, a) -> np.ndarray:
        return a * self._rev

    def bivector(self, theta) -> np.ndarray:
        """sum_{i<j} theta[j, i] e_i e_j for a skew matrix theta."""
        th = np.asarray(theta, dtype=float)
        x = np.zeros(self.n)
        for i in range(self.m):
            for j in range(i + 1, self.m):
                x[(1 << i) | (1 << j)] = th[j, i]
        return x

    def exp(self, a) -> np.ndarray:
        """Exponential by scaling and squaring with a Taylor core."""
        norm = float(np.sum(np.abs(a)))
        k = max(0, int(math.ceil(math.log2(norm / 0.25)))) if norm > 0.25 else 0
        x = a / (2**k)
        term = self.one()
        out = self.one()
        for i in range(1, 16):
            term = self.mul(term, x) / i
            out = out + term
        for _ in range(k):
            out = self.mul(out, out)
        return out

    def rotor(self, theta) -> np.ndarray:
        """Even element r with r v r~ = expm(theta) v."""
        return self.exp(-0.5 * self.bivector(theta))

    def act(self, r, v) -> np.ndarray:
        return self.vector_part(self.mul(self.mul(r, self.vector(v)), self.reverse(r)))

    def rotation_of(self, r) -> np.ndarray:
        return np.column_stack([self.act(r, e) for e in np.eye(self.m)])

    def normalize(self, r) -> np.ndarray:
        s = self.mul(r, self.reverse(r))[0]
        return r / math.sqrt(s)
