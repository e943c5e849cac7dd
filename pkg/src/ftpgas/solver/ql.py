"""Eigenvalues of a symmetric tridiagonal matrix by the implicit-shift QL method."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

EPS = np.finfo(float).eps
MAX_SWEEPS = 30


class QLNotConverged(ArithmeticError):
    pass


def ql_eigenvalues(diag: Sequence[float], offdiag: Sequence[float], max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """All eigenvalues of the tridiagonal matrix, sorted ascending.

    ``offdiag[i]`` couples rows ``i`` and ``i + 1``. Raises
    :class:`QLNotConverged` if one eigenvalue needs more than ``max_sweeps``
    QL sweeps.
    """
    d = np.array(diag, dtype=float)
    n = len(d)
    if len(offdiag) != max(0, n - 1):
        raise ValueError("offdiag must have exactly len(diag) - 1 entries")
    e = np.zeros(n)
    e[:n - 1] = offdiag
    for l in range(n):
        sweeps = 0
        while True:
            # first negligible off-diagonal at or below l splits off the active block
            small = np.abs(e[l:n - 1]) <= EPS * (np.abs(d[l:n - 1]) + np.abs(d[l + 1:n]))
            m = l + int(np.argmax(small)) if small.any() else n - 1
            if m == l:
                break
            sweeps += 1
            if sweeps > max_sweeps:
                raise QLNotConverged(f"eigenvalue {l} not converged after {max_sweeps} sweeps")
            # the sweep itself is sequential; plain floats are much faster than array scalars
            dd = d[l:m + 1].tolist()
            ee = e[l:m + 1].tolist()
            k = m - l
            g = (dd[1] - dd[0]) / (2.0 * ee[0])
            r = math.hypot(g, 1.0)
            g = dd[k] - dd[0] + ee[0] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = k - 1
            underflow = False
            while i >= 0:
                f = s * ee[i]
                b = c * ee[i]
                r = math.hypot(f, g)
                ee[i + 1] = r
                if r == 0.0:
                    # deflate and restart this eigenvalue
                    dd[i + 1] -= p
                    ee[k] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = dd[i + 1] - p
                r = (dd[i] - g) * s + 2.0 * c * b
                p = s * r
                dd[i + 1] = g + p
                g = c * r - b
                i -= 1
            if not underflow:
                dd[0] -= p
                ee[0] = g
                ee[k] = 0.0
            d[l:m + 1] = dd
            e[l:m + 1] = ee
    return np.sort(d)


@functools.lru_cache(maxsize=64)
def _cached_eigenvalues(diag: bytes, offdiag: bytes) -> np.ndarray:
    # ranks sharing one interpreter (simulation) ask for identical spectra
    return ql_eigenvalues(np.frombuffer(diag), np.frombuffer(offdiag))


@dataclass
class TridiagonalSpectrum:
    diag: np.ndarray
    offdiag: np.ndarray
    eigenvalues: np.ndarray

    @classmethod
    def from_coefficients(cls, alphas: Sequence[float], betas: Sequence[float]) -> "TridiagonalSpectrum":
        """Spectrum of the Lanczos matrix; ``betas`` is beta_1..beta_{j+1} with beta_1 = 0."""
        diag = np.asarray(alphas, dtype=float)
        offdiag = np.asarray(betas[1:len(diag)], dtype=float)
        return cls(diag, offdiag, _cached_eigenvalues(diag.tobytes(), offdiag.tobytes()).copy())

    def lowest(self, p: int) -> np.ndarray:
        return self.eigenvalues[:p]
