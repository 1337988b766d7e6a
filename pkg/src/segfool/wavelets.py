"""Single-level orthonormal Haar DWT/IDWT written as explicit filter-matrix products.

For an N x N channel ``x`` with analysis matrices ``L`` and ``H`` (each N/2 x N):

    c_ll = L x L^T    c_lh = L x H^T    c_hl = H x L^T    c_hh = H x H^T

and the low/high band reconstructions are ``L^T c_ll L`` and ``H^T c_hh H``.
All transforms are differentiable through :mod:`segfool.tensor`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np

from .errors import ContractError
from .tensor import Tensor, add, channel_matmul, reshape


@dataclass(frozen=True)
class HaarFilters:
    low: np.ndarray
    high: np.ndarray

    @property
    def n(self) -> int:
        return self.low.shape[1]


@lru_cache(maxsize=16)
def _haar(n: int) -> Tuple[np.ndarray, np.ndarray]:
    half = n // 2
    r = 1.0 / np.sqrt(2.0)
    low = np.zeros((half, n))
    high = np.zeros((half, n))
    idx = np.arange(half)
    low[idx, 2 * idx] = r
    low[idx, 2 * idx + 1] = r
    high[idx, 2 * idx] = r
    high[idx, 2 * idx + 1] = -r
    low.setflags(write=False)
    high.setflags(write=False)
    return low, high


def haar_filters(n: int) -> HaarFilters:
    if n < 2 or n % 2:
        raise ContractError(f"Haar filters need an even size, got {n}")
    low, high = _haar(n)
    return HaarFilters(low, high)


@dataclass
class FrequencyDecomposition:
    c_ll: Tensor
    c_lh: Tensor
    c_hl: Tensor
    c_hh: Tensor
    filters: HaarFilters

    def bands(self):
        return self.c_ll, self.c_lh, self.c_hl, self.c_hh


def _as_chw(x: Tensor) -> Tensor:
    if x.data.ndim == 2:
        return reshape(x, (1,) + x.shape)
    if x.data.ndim != 3:
        raise ContractError(f"expected C x N x N or N x N, got {x.shape}")
    return x


def dwt2(x: Tensor) -> FrequencyDecomposition:
    x = _as_chw(x)
    _, rows, cols = x.shape
    if rows != cols:
        raise ContractError(f"dwt2 expects square channels, got {rows}x{cols}")
    f = haar_filters(rows)
    lo, hi = f.low, f.high
    return FrequencyDecomposition(
        c_ll=channel_matmul(lo, x, lo.T),
        c_lh=channel_matmul(lo, x, hi.T),
        c_hl=channel_matmul(hi, x, lo.T),
        c_hh=channel_matmul(hi, x, hi.T),
        filters=f,
    )


def idwt_low(d: FrequencyDecomposition) -> Tensor:
    """Image rebuilt from the LL band alone."""
    lo = d.filters.low
    return channel_matmul(lo.T, d.c_ll, lo)


def idwt_high(d: FrequencyDecomposition) -> Tensor:
    """Image rebuilt from the HH band alone."""
    hi = d.filters.high
    return channel_matmul(hi.T, d.c_hh, hi)


def idwt_mid(d: FrequencyDecomposition) -> Tensor:
    lo, hi = d.filters.low, d.filters.high
    return add(channel_matmul(lo.T, d.c_lh, hi), channel_matmul(hi.T, d.c_hl, lo))


def reconstruct_full(d: FrequencyDecomposition) -> Tensor:
    return add(add(idwt_low(d), idwt_mid(d)), idwt_high(d))


def low_pass(x: Tensor) -> Tensor:
    """phi(x): the low-frequency reconstruction of ``x``."""
    return idwt_low(dwt2(x))


def high_pass(x: Tensor) -> Tensor:
    """psi(x): the high-frequency (diagonal detail) reconstruction of ``x``."""
    return idwt_high(dwt2(x))
