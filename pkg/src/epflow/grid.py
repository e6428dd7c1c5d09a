"""
Periodic spectral grid, field containers and spectral calculus.

Fields live on a uniform n x n x n grid over the cube [0, L)^3 and are
represented either by real nodal values or by the coefficients of the
trigonometric interpolant

    f(x) = sum_xi c(xi) exp(i xi . x),   xi = (2 pi / L) k,  k in Z^3,

with -n/2 <= k_i < n/2.  Forward/inverse transforms, exact spectral
differentiation, Sobolev norms with the volume normalization

    ||f||_s = ( sum_xi (1 + |xi|^2)^s |c(xi)|^2 * L^3 )^(1/2)

and two-thirds dealiasing are provided here.  Everything is pure and
deterministic; reductions use numpy's pairwise summation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.fft as _fft

__all__ = [
    "GridSpec",
    "ScalarField",
    "VectorField",
    "SobolevIndex",
    "forward_transform",
    "inverse_transform",
    "gradient",
    "divergence",
    "curl",
    "jacobian",
    "laplacian",
    "sobolev_norm",
    "l2_norm_nodal",
    "dealias",
    "dealias_coeffs",
    "rfftn",
    "irfftn",
    "rlap",
    "rgrad",
    "rdiv",
    "rjacobian",
]

# FFT worker count; pocketfft results are bit-identical for any value
# (threads only split independent 1-D lines), so this is a pure speed knob.
FFT_WORKERS = int(os.environ.get("EPFLOW_FFT_WORKERS", "0")) or min(2, os.cpu_count() or 1)

MIN_SOBOLEV_INDEX = 2.5


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid on [0, length)^3 with n nodes per axis.

    n must be a power of two, n >= 8.  Wavevectors are xi = 2 pi k / length
    with integer k in [-n/2, n/2) per axis, stored in FFT order.
    """

    n: int
    length: float = 2.0 * np.pi

    def __post_init__(self) -> None:
        n = self.n
        if n < 8 or (n & (n - 1)) != 0:
            raise ValueError(f"n must be a power of two >= 8, got {n}")
        if not (self.length > 0.0):
            raise ValueError(f"length must be positive, got {self.length}")
        object.__setattr__(self, "length", float(self.length))

    # ---- derived geometry (cached per instance) --------------------------

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def volume(self) -> float:
        return self.length**3

    @property
    def cell_volume(self) -> float:
        return (self.length / self.n) ** 3

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    def _cached(self, key, builder):
        cache = self.__dict__.setdefault("_cache", {})
        if key not in cache:
            cache[key] = builder()
        return cache[key]

    def nodes1d(self) -> np.ndarray:
        """Node coordinates along one axis: j * dx, j = 0..n-1."""
        return self._cached("nodes1d", lambda: np.arange(self.n) * self.dx)

    def mesh(self) -> np.ndarray:
        """Node coordinates, shape (3, n, n, n), axis 0 = component."""

        def build():
            x = self.nodes1d()
            X = np.meshgrid(x, x, x, indexing="ij")
            out = np.stack(X)
            out.setflags(write=False)
            return out

        return self._cached("mesh", build)

    def modes1d(self) -> np.ndarray:
        """Integer wavenumbers along one axis in FFT order."""
        return self._cached(
            "modes1d", lambda: np.fft.fftfreq(self.n, d=1.0 / self.n).astype(np.int64)
        )

    def wavevectors(self) -> np.ndarray:
        """Wavevectors xi, shape (3, n, n, n), axis 0 = component."""

        def build():
            xi1 = 2.0 * np.pi / self.length * self.modes1d()
            K = np.meshgrid(xi1, xi1, xi1, indexing="ij")
            out = np.stack(K)
            out.setflags(write=False)
            return out

        return self._cached("wavevectors", build)

    def xi_squared(self) -> np.ndarray:
        """|xi|^2 on the full spectral grid, shape (n, n, n)."""

        def build():
            XI = self.wavevectors()
            out = XI[0] ** 2 + XI[1] ** 2 + XI[2] ** 2
            out.setflags(write=False)
            return out

        return self._cached("xi_squared", build)

    def deriv_multiplier(self) -> np.ndarray:
        """i*xi for first derivatives, Nyquist plane zeroed, shape (3,n,n,n).

        Zeroing the +-n/2 mode differentiates the symmetric (cosine)
        interpolant, which keeps derivatives of real fields real.
        """

        def build():
            XI = self.wavevectors().copy()
            nyq = -(self.n // 2)
            k = self.modes1d()
            for a in range(3):
                sl = [slice(None)] * 3
                sl[a] = np.where(k == nyq)[0]
                XI[(a, *sl)] = 0.0
            out = 1j * XI
            out.setflags(write=False)
            return out

        return self._cached("deriv_multiplier", build)

    def dealias_mask(self) -> np.ndarray:
        """Boolean mask keeping modes with every |k_i| <= floor(n/3)."""

        def build():
            k = self.modes1d()
            cut = self.n // 3
            keep1 = np.abs(k) <= cut
            out = (
                keep1[:, None, None] & keep1[None, :, None] & keep1[None, None, :]
            )
            out.setflags(write=False)
            return out

        return self._cached("dealias_mask", build)

    # ---- half-spectrum (rfft) layout, used by solver-internal transforms ----

    def rmodes_last(self) -> np.ndarray:
        return self._cached(
            "rmodes_last", lambda: np.arange(self.n // 2 + 1, dtype=np.int64)
        )

    def rfft_wavevectors(self) -> np.ndarray:
        """Wavevectors on the rfftn layout, shape (3, n, n, n//2+1)."""

        def build():
            xi_full = 2.0 * np.pi / self.length * self.modes1d()
            xi_last = 2.0 * np.pi / self.length * self.rmodes_last()
            K = np.meshgrid(xi_full, xi_full, xi_last, indexing="ij")
            out = np.stack(K)
            out.setflags(write=False)
            return out

        return self._cached("rfft_wavevectors", build)

    def rfft_xi_squared(self) -> np.ndarray:
        def build():
            XI = self.rfft_wavevectors()
            out = XI[0] ** 2 + XI[1] ** 2 + XI[2] ** 2
            out.setflags(write=False)
            return out

        return self._cached("rfft_xi_squared", build)

    def rfft_deriv_multiplier(self) -> np.ndarray:
        """i*xi on the rfftn layout with Nyquist modes zeroed."""

        def build():
            XI = self.rfft_wavevectors().copy()
            half = self.n // 2
            k = self.modes1d()
            nyq_full = np.where(k == -half)[0]
            XI[0][nyq_full, :, :] = 0.0
            XI[1][:, nyq_full, :] = 0.0
            XI[2][:, :, half] = 0.0
            out = 1j * XI
            out.setflags(write=False)
            return out

        return self._cached("rfft_deriv_multiplier", build)

    def rfft_dealias_mask(self) -> np.ndarray:
        def build():
            k = self.modes1d()
            cut = self.n // 3
            keep_full = np.abs(k) <= cut
            keep_last = self.rmodes_last() <= cut
            out = (
                keep_full[:, None, None]
                & keep_full[None, :, None]
                & keep_last[None, None, :]
            )
            out.setflags(write=False)
            return out

        return self._cached("rfft_dealias_mask", build)


@dataclass(frozen=True)
class SobolevIndex:
    """Smoothness index for the data space; the solver theory needs s > 5/2."""

    s: float

    def __post_init__(self) -> None:
        if not (self.s > MIN_SOBOLEV_INDEX):
            raise ValueError(f"s must exceed 5/2, got {self.s}")


class ScalarField:
    """Real scalar field on a GridSpec with a lazy spectral-coefficient cache."""

    __slots__ = ("grid", "values", "_coeffs")

    def __init__(self, grid: GridSpec, values: np.ndarray, coeffs: np.ndarray | None = None):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != grid.shape:
            raise ValueError(f"values shape {values.shape} != grid shape {grid.shape}")
        _check_finite(values, "field values")
        self.grid = grid
        self.values = values
        self._coeffs = coeffs

    @property
    def coeffs(self) -> np.ndarray:
        """Coefficients of the trigonometric interpolant (FFT order)."""
        if self._coeffs is None:
            self._coeffs = _fft.fftn(self.values, workers=FFT_WORKERS) / self.grid.n**3
        return self._coeffs

    @classmethod
    def from_coeffs(cls, grid: GridSpec, coeffs: np.ndarray) -> "ScalarField":
        vals = _fft.ifftn(coeffs * grid.n**3, workers=FFT_WORKERS)
        return cls(grid, vals.real, coeffs=np.asarray(coeffs, dtype=np.complex128))

    @classmethod
    def constant(cls, grid: GridSpec, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "ScalarField":
        X = grid.mesh()
        return cls(grid, np.asarray(fn(X[0], X[1], X[2]), dtype=np.float64))

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy(),
                           None if self._coeffs is None else self._coeffs.copy())

    def __add__(self, other):
        self._compat(other)
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other):
        self._compat(other)
        return ScalarField(self.grid, self.values - other.values)

    def __mul__(self, a: float):
        return ScalarField(self.grid, self.values * float(a))

    __rmul__ = __mul__

    def _compat(self, other) -> None:
        if not isinstance(other, ScalarField) or other.grid != self.grid:
            raise ValueError("field grids do not match")


class VectorField:
    """Three scalar components sharing one grid; values shape (3, n, n, n)."""

    __slots__ = ("grid", "values", "_coeffs")

    def __init__(self, grid: GridSpec, values: np.ndarray, coeffs: np.ndarray | None = None):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (3, *grid.shape):
            raise ValueError(f"values shape {values.shape} != (3, *{grid.shape})")
        _check_finite(values, "field values")
        self.grid = grid
        self.values = values
        self._coeffs = coeffs

    @property
    def coeffs(self) -> np.ndarray:
        if self._coeffs is None:
            self._coeffs = _fft.fftn(self.values, axes=(1, 2, 3), workers=FFT_WORKERS) / self.grid.n**3
        return self._coeffs

    @classmethod
    def from_coeffs(cls, grid: GridSpec, coeffs: np.ndarray) -> "VectorField":
        vals = _fft.ifftn(coeffs * grid.n**3, axes=(1, 2, 3), workers=FFT_WORKERS)
        return cls(grid, vals.real, coeffs=np.asarray(coeffs, dtype=np.complex128))

    @classmethod
    def from_components(cls, fx: ScalarField, fy: ScalarField, fz: ScalarField) -> "VectorField":
        if not (fx.grid == fy.grid == fz.grid):
            raise ValueError("components must share one grid")
        return cls(fx.grid, np.stack([fx.values, fy.values, fz.values]))

    @classmethod
    def constant(cls, grid: GridSpec, vec) -> "VectorField":
        vec = np.asarray(vec, dtype=np.float64)
        vals = np.broadcast_to(vec[:, None, None, None], (3, *grid.shape)).copy()
        return cls(grid, vals)

    @classmethod
    def zero(cls, grid: GridSpec) -> "VectorField":
        return cls(grid, np.zeros((3, *grid.shape)))

    def component(self, a: int) -> ScalarField:
        c = None if self._coeffs is None else self._coeffs[a]
        return ScalarField(self.grid, self.values[a], c)

    def copy(self) -> "VectorField":
        return VectorField(self.grid, self.values.copy(),
                           None if self._coeffs is None else self._coeffs.copy())

    def __add__(self, other):
        self._compat(other)
        return VectorField(self.grid, self.values + other.values)

    def __sub__(self, other):
        self._compat(other)
        return VectorField(self.grid, self.values - other.values)

    def __mul__(self, a: float):
        return VectorField(self.grid, self.values * float(a))

    __rmul__ = __mul__

    def _compat(self, other) -> None:
        if not isinstance(other, VectorField) or other.grid != self.grid:
            raise ValueError("field grids do not match")


Field = ScalarField | VectorField


# ---- transforms ----------------------------------------------------------


def forward_transform(f: Field) -> np.ndarray:
    """Spectral coefficients of the trigonometric interpolant of f."""
    return f.coeffs


def inverse_transform(grid: GridSpec, coeffs: np.ndarray) -> Field:
    """Nodal field reproducing the given interpolant coefficients."""
    coeffs = np.asarray(coeffs)
    if coeffs.shape == grid.shape:
        return ScalarField.from_coeffs(grid, coeffs)
    if coeffs.shape == (3, *grid.shape):
        return VectorField.from_coeffs(grid, coeffs)
    raise ValueError(f"coefficient shape {coeffs.shape} does not match grid")


# ---- spectral calculus ----------------------------------------------------


def gradient(f: ScalarField) -> VectorField:
    """Exact spectral gradient of the interpolant."""
    ik = f.grid.deriv_multiplier()
    c = f.coeffs
    return VectorField.from_coeffs(f.grid, ik * c[None])


def divergence(u: VectorField) -> ScalarField:
    ik = u.grid.deriv_multiplier()
    c = u.coeffs
    return ScalarField.from_coeffs(u.grid, ik[0] * c[0] + ik[1] * c[1] + ik[2] * c[2])


def curl(u: VectorField) -> VectorField:
    ik = u.grid.deriv_multiplier()
    c = u.coeffs
    out = np.empty_like(c)
    out[0] = ik[1] * c[2] - ik[2] * c[1]
    out[1] = ik[2] * c[0] - ik[0] * c[2]
    out[2] = ik[0] * c[1] - ik[1] * c[0]
    return VectorField.from_coeffs(u.grid, out)


def jacobian(u: VectorField) -> np.ndarray:
    """Nodal Jacobian d_b u_a, shape (3, 3, n, n, n)."""
    ik = u.grid.deriv_multiplier()
    c = u.coeffs
    stacked = np.empty((9, *u.grid.shape), dtype=np.complex128)
    for a in range(3):
        for b in range(3):
            stacked[3 * a + b] = ik[b] * c[a]
    vals = _fft.ifftn(stacked * u.grid.n**3, axes=(1, 2, 3), workers=FFT_WORKERS).real
    return vals.reshape(3, 3, *u.grid.shape)


def laplacian(f: ScalarField) -> ScalarField:
    return ScalarField.from_coeffs(f.grid, -f.grid.xi_squared() * f.coeffs)


# ---- norms ----------------------------------------------------------------


def sobolev_norm(f: Field, s) -> float:
    """H^s norm from spectral coefficients, volume-normalized.

    Vector fields contribute as the root of the sum of squares of the
    component norms.  s may be a SobolevIndex or any real >= 0.
    """
    if isinstance(s, SobolevIndex):
        s = s.s
    s = float(s)
    if s < 0.0:
        raise ValueError(f"Sobolev index must be >= 0, got {s}")
    weight = (1.0 + f.grid.xi_squared()) ** s
    c = f.coeffs
    total = np.sum(weight * (c.real**2 + c.imag**2))
    return float(np.sqrt(total * f.grid.volume))


def l2_norm_nodal(f: Field) -> float:
    """L^2 norm from nodal values (trapezoid/rectangle rule on the torus)."""
    return float(np.sqrt(np.sum(f.values**2) * f.grid.cell_volume))


# ---- dealiasing ------------------------------------------------------------


def dealias_coeffs(grid: GridSpec, coeffs: np.ndarray) -> np.ndarray:
    """Zero every mode with any |k_i| > n/3 (two-thirds rule)."""
    mask = grid.dealias_mask()
    return coeffs * mask


def dealias(f: Field) -> Field:
    """Two-thirds-rule truncation of a field."""
    c = dealias_coeffs(f.grid, f.coeffs)
    if isinstance(f, ScalarField):
        return ScalarField.from_coeffs(f.grid, c)
    return VectorField.from_coeffs(f.grid, c)


# ---- real-transform calculus on raw arrays (solver-internal fast paths) ----


def rfftn(grid: GridSpec, vals: np.ndarray) -> np.ndarray:
    axes = tuple(range(vals.ndim - 3, vals.ndim))
    return _fft.rfftn(vals, axes=axes, workers=FFT_WORKERS)


def irfftn(grid: GridSpec, spec: np.ndarray) -> np.ndarray:
    axes = tuple(range(spec.ndim - 3, spec.ndim))
    return _fft.irfftn(spec, s=grid.shape, axes=axes, workers=FFT_WORKERS)


def rlap(grid: GridSpec, v: np.ndarray) -> np.ndarray:
    """Laplacian of a raw nodal array via real transforms."""
    return irfftn(grid, -grid.rfft_xi_squared() * rfftn(grid, v))


def rgrad(grid: GridSpec, v: np.ndarray) -> np.ndarray:
    """Gradient of a raw nodal array, shape (3, n, n, n)."""
    return irfftn(grid, grid.rfft_deriv_multiplier() * rfftn(grid, v)[None])


def rdiv(grid: GridSpec, F: np.ndarray) -> np.ndarray:
    """Divergence of a raw (3, n, n, n) array."""
    ik = grid.rfft_deriv_multiplier()
    Fh = rfftn(grid, F)
    return irfftn(grid, ik[0] * Fh[0] + ik[1] * Fh[1] + ik[2] * Fh[2])


def rjacobian(grid: GridSpec, vals: np.ndarray) -> np.ndarray:
    """d_b vals_a for a raw (3, n, n, n) array, shape (3, 3, n, n, n)."""
    c = rfftn(grid, vals)
    ik = grid.rfft_deriv_multiplier()
    stacked = np.empty((9, *c.shape[1:]), dtype=np.complex128)
    for a in range(3):
        for b in range(3):
            stacked[3 * a + b] = ik[b] * c[a]
    return irfftn(grid, stacked).reshape(3, 3, *grid.shape)
