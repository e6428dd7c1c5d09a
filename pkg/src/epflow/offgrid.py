"""
Off-grid evaluation of periodic spectral fields.

Two methods:

"trig"
    Evaluates the trigonometric interpolant itself.  Small point sets use
    exact direct summation over modes; larger sets use gridding (upsampled
    inverse FFT + exponential-of-semicircle window spreading), accurate to
    ~1e-13 relative with the default window width.  Nyquist modes are split
    symmetrically so real fields evaluate real.

"tricubic"
    Local 4-point Lagrange interpolation per axis on the original grid;
    fourth-order accurate for smooth fields and much cheaper per point.

Both methods treat the box periodically; query points may lie anywhere.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as _fft
from numba import njit

from .grid import FFT_WORKERS, GridSpec, ScalarField, VectorField

__all__ = ["evaluate_offgrid", "OffgridEvaluator"]

DIRECT_MAX_POINTS = 64  # below this, exact mode summation beats gridding

_SPREAD_WIDTH = 14
_UPSAMPLING = 2
_ES_BETA_PER_WIDTH = 2.30


def _es_window_hat(xi: np.ndarray, halfwidth: float, beta: float) -> np.ndarray:
    """Fourier transform of exp(beta(sqrt(1-t^2)-1)) on [-halfwidth, halfwidth]."""
    tq, wq = np.polynomial.legendre.leggauss(220)
    psi = np.exp(beta * (np.sqrt(1.0 - tq**2) - 1.0))
    xi = np.asarray(xi, dtype=np.float64)
    out = np.empty(xi.shape)
    for i, x in np.ndenumerate(xi):
        out[i] = halfwidth * np.sum(wq * psi * np.cos(halfwidth * x * tq))
    return out


class _Plan:
    """Reusable gridding data for one (grid, width, upsampling) combination."""

    def __init__(self, grid: GridSpec, width: int, sigma: int):
        self.grid = grid
        self.width = width
        self.sigma = sigma
        self.nf = sigma * grid.n
        self.hf = grid.length / self.nf
        self.beta = _ES_BETA_PER_WIDTH * width
        self.halfwidth = 0.5 * width * self.hf
        k = grid.modes1d()
        xi = 2.0 * np.pi / grid.length * k
        corr = _es_window_hat(xi, self.halfwidth, self.beta) / self.hf
        nyq = _es_window_hat(
            np.array([2.0 * np.pi / grid.length * (grid.n // 2)]), self.halfwidth, self.beta
        )[0] / self.hf
        self.inv_corr = 1.0 / corr
        self.inv_corr_nyquist = 1.0 / nyq
        self.fine_index = (k % self.nf).astype(np.int64)


_PLANS: dict[tuple[int, float, int, int], _Plan] = {}


def _get_plan(grid: GridSpec, width: int, sigma: int) -> _Plan:
    key = (grid.n, grid.length, width, sigma)
    plan = _PLANS.get(key)
    if plan is None:
        plan = _Plan(grid, width, sigma)
        _PLANS[key] = plan
    return plan


def _embed_fine(plan: _Plan, coeffs: np.ndarray) -> np.ndarray:
    """Deconvolved zero-padded spectrum with symmetric Nyquist splitting."""
    grid = plan.grid
    n, nf = grid.n, plan.nf
    half = n // 2
    c = coeffs * (
        plan.inv_corr[:, None, None]
        * plan.inv_corr[None, :, None]
        * plan.inv_corr[None, None, :]
    )
    fine = np.zeros((nf, nf, nf), dtype=np.complex128)
    ix = plan.fine_index
    fine[np.ix_(ix, ix, ix)] = c
    # split each Nyquist plane symmetrically (keeps the spectrum Hermitian)
    nyq_src = (-half) % nf
    nyq_dst = half
    for axis in range(3):
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        src[axis] = nyq_src
        dst[axis] = nyq_dst
        fine[tuple(src)] *= 0.5
        fine[tuple(dst)] = fine[tuple(src)]
    return fine


@njit(cache=True)
def _spread_eval(g, pts, nf, hf, width, beta, halfwidth, out):
    """Evaluate spread interpolant at pts; g shape (C, nf, nf, nf)."""
    ncomp = g.shape[0]
    npts = pts.shape[0]
    wvals = np.empty((3, width + 1))
    idx = np.empty((3, width + 1), dtype=np.int64)
    hw_cells = 0.5 * width
    for p in range(npts):
        for a in range(3):
            x = pts[p, a] / hf
            j0 = int(np.ceil(x - hw_cells))
            for m in range(width + 1):
                j = j0 + m
                t = (x - j) / hw_cells
                if -1.0 < t < 1.0:
                    wvals[a, m] = np.exp(beta * (np.sqrt(1.0 - t * t) - 1.0))
                else:
                    wvals[a, m] = 0.0
                idx[a, m] = j % nf
        for comp in range(ncomp):
            acc = 0.0
            for i in range(width + 1):
                wi = wvals[0, i]
                if wi == 0.0:
                    continue
                gi = g[comp, idx[0, i]]
                accj = 0.0
                for jj in range(width + 1):
                    wj = wvals[1, jj]
                    if wj == 0.0:
                        continue
                    gj = gi[idx[1, jj]]
                    acck = 0.0
                    for kk in range(width + 1):
                        acck += wvals[2, kk] * gj[idx[2, kk]]
                    accj += wj * acck
                acc += wi * accj
            out[p, comp] = acc


@njit(cache=True)
def _tricubic_eval(vals, pts, n, dx, out):
    """Local cubic Lagrange interpolation; vals shape (C, n, n, n)."""
    ncomp = vals.shape[0]
    npts = pts.shape[0]
    w = np.empty((3, 4))
    idx = np.empty((3, 4), dtype=np.int64)
    for p in range(npts):
        for a in range(3):
            x = pts[p, a] / dx
            j = int(np.floor(x))
            u = x - j
            w[a, 0] = -u * (u - 1.0) * (u - 2.0) / 6.0
            w[a, 1] = (u * u - 1.0) * (u - 2.0) / 2.0
            w[a, 2] = -u * (u + 1.0) * (u - 2.0) / 2.0
            w[a, 3] = u * (u * u - 1.0) / 6.0
            for m in range(4):
                idx[a, m] = (j - 1 + m) % n
        for comp in range(ncomp):
            acc = 0.0
            for i in range(4):
                gi = vals[comp, idx[0, i]]
                accj = 0.0
                for jj in range(4):
                    gj = gi[idx[1, jj]]
                    acck = 0.0
                    for kk in range(4):
                        acck += w[2, kk] * gj[idx[2, kk]]
                    accj += w[1, jj] * acck
                acc += w[0, i] * accj
            out[p, comp] += acc


def _direct_eval(grid: GridSpec, coeffs: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Exact interpolant evaluation by mode summation (symmetric Nyquist)."""
    n = grid.n
    half = n // 2
    k = grid.modes1d()
    # extend each axis with a +n/2 mode carrying half the -n/2 coefficient
    k_ext = np.concatenate([k, [half]])
    scale = np.ones(n)
    scale[k == -half] = 0.5
    ncomp = coeffs.shape[0]
    c = coeffs * (scale[:, None, None] * scale[None, :, None] * scale[None, None, :])
    c_ext = np.zeros((ncomp, n + 1, n + 1, n + 1), dtype=np.complex128)
    c_ext[:, :n, :n, :n] = c
    src = np.where(k == -half)[0][0]
    c_ext[:, n, :, :] = c_ext[:, src, :, :]
    c_ext[:, :, n, :] = c_ext[:, :, src, :]
    c_ext[:, :, :, n] = c_ext[:, :, :, src]
    xi1 = 2.0 * np.pi / grid.length * k_ext
    E = [np.exp(1j * np.outer(pts[:, a], xi1)) for a in range(3)]
    t1 = np.einsum("cxyz,pz->cpxy", c_ext, E[2])
    t2 = np.einsum("cpxy,py->cpx", t1, E[1])
    out = np.einsum("cpx,px->cp", t2, E[0])
    return out.real.T.copy()


class OffgridEvaluator:
    """Prepares one field for repeated off-grid evaluation.

    Builds the upsampled fine-grid representation once; `.at(points)` then
    costs only the local window spreading per query batch.
    """

    def __init__(self, field, method: str = "trig",
                 width: int = _SPREAD_WIDTH, sigma: int = _UPSAMPLING):
        if method not in ("trig", "tricubic"):
            raise ValueError(f"unknown off-grid method {method!r}")
        self.method = method
        self.grid = field.grid
        self.is_vector = isinstance(field, VectorField)
        coeffs = field.coeffs if self.is_vector else field.coeffs[None]
        self._values = field.values if self.is_vector else field.values[None]
        self._coeffs = coeffs
        if method == "trig":
            self._plan = _get_plan(self.grid, width, sigma)
            fine = np.stack([_embed_fine(self._plan, coeffs[i]) for i in range(coeffs.shape[0])])
            self._g = _fft.ifftn(
                fine * self._plan.nf**3, axes=(1, 2, 3), workers=FFT_WORKERS
            ).real.copy()

    def at(self, points: np.ndarray) -> np.ndarray:
        """Values at the given points, shape (P,) scalar or (P, 3) vector."""
        pts = np.asarray(points, dtype=np.float64)
        squeeze_single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if pts.shape[1] != 3:
            raise ValueError("points must have shape (P, 3)")
        pts = np.mod(pts, self.grid.length)
        ncomp = self._coeffs.shape[0]
        if self.method == "tricubic":
            out = np.zeros((pts.shape[0], ncomp))
            _tricubic_eval(self._values, pts, self.grid.n, self.grid.dx, out)
        elif pts.shape[0] <= DIRECT_MAX_POINTS:
            out = _direct_eval(self.grid, self._coeffs, pts)
        else:
            plan = self._plan
            out = np.empty((pts.shape[0], ncomp))
            _spread_eval(self._g, pts, plan.nf, plan.hf, plan.width,
                         plan.beta, plan.halfwidth, out)
        if not self.is_vector:
            out = out[:, 0]
        if squeeze_single:
            out = out[0]
        return out


def evaluate_offgrid(field, points: np.ndarray, method: str = "trig") -> np.ndarray:
    """Evaluate a ScalarField or VectorField at arbitrary points.

    Parameters
    ----------
    field : ScalarField or VectorField
    points : array (P, 3)
        Query locations; folded into the periodic box.
    method : {"trig", "tricubic"}
        "trig" evaluates the interpolant (exact up to ~1e-13); "tricubic"
        is local cubic Lagrange interpolation (4th order).
    """
    return OffgridEvaluator(field, method=method).at(points)
