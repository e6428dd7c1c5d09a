"""
Nonlinear Poisson-Boltzmann solves on the periodic grid.

The electric potential solves  exp(phi) - Lap(phi) = rho  for a positive
ion density rho = 1 + rho_bar.  A damped Newton iteration (backtracking on
the sup-norm residual) is used; each Newton correction solves the
symmetric-positive linearized problem

    exp(phi0) h - Lap h = r

by preconditioned conjugate gradients with the exact spectral inverse of
(c - Lap), c = mean(exp(phi0)).  All solves work with rho_bar = rho - 1
internally so accuracy near the equilibrium rho = 1 is not lost.

A variable-coefficient variant (`solve_pb_labelframe`) solves the same
equation transported to flow-map label coordinates,

    J exp(q) - d_i(M_ij d_j q) = rho0,      M = J (dphi)^-1 (dphi)^-T,

which the Lagrangian integrator uses to evaluate its right-hand side
without off-grid interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec, ScalarField, VectorField, gradient, irfftn, rfftn, rgrad, rdiv, rlap

__all__ = [
    "EllipticParams",
    "DensityState",
    "EllipticError",
    "solve_poisson_boltzmann",
    "solve_linearized",
    "grad_potential",
    "solve_pb_labelframe",
]


class EllipticError(RuntimeError):
    """Raised when a Newton or Krylov iteration fails to converge."""

    def __init__(self, message: str, residual: float | None = None,
                 trace: list[float] | None = None):
        super().__init__(message)
        self.residual = residual
        self.trace = trace or []


@dataclass(frozen=True)
class EllipticParams:
    """Tolerances for the Poisson-Boltzmann solves.

    newton_tol is the sup-norm residual target of the nonlinear solve,
    krylov_tol the relative l2 residual of each inner CG solve.
    """

    newton_tol: float = 1e-12
    max_newton: int = 50
    krylov_tol: float = 1e-13
    damping: float = 0.5
    max_krylov: int = 400

    def __post_init__(self) -> None:
        if not (self.newton_tol > 0 and self.krylov_tol > 0 and self.damping > 0):
            raise ValueError("tolerances and damping must be positive")
        if self.max_newton < 1:
            raise ValueError("max_newton must be >= 1")


@dataclass(frozen=True)
class DensityState:
    """Ion density rho = 1 + rho_bar with the positivity invariant enforced."""

    rho_bar: ScalarField

    def __post_init__(self) -> None:
        if float(np.min(self.rho_bar.values)) <= -1.0:
            raise ValueError("density must be positive: min(1 + rho_bar) <= 0")

    @property
    def grid(self) -> GridSpec:
        return self.rho_bar.grid

    def rho_values(self) -> np.ndarray:
        return 1.0 + self.rho_bar.values


# ---- inner PCG -------------------------------------------------------------


def _pcg(apply_op, b, precond, tol, maxiter):
    """Conjugate gradients on a symmetric positive operator (nodal arrays)."""
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = float(np.sqrt(np.sum(b * b)))
    if bnorm == 0.0:
        return x, 0, 0.0, [0.0]
    z = precond(r)
    p = z.copy()
    rz = float(np.sum(r * z))
    trace = []
    for it in range(1, maxiter + 1):
        Ap = apply_op(p)
        alpha = rz / float(np.sum(p * Ap))
        x += alpha * p
        r -= alpha * Ap
        rel = float(np.sqrt(np.sum(r * r))) / bnorm
        trace.append(rel)
        if rel <= tol:
            return x, it, rel, trace
        z = precond(r)
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise EllipticError(
        f"Krylov iteration stagnated: rel residual {trace[-1]:.3e} after {maxiter} steps",
        residual=trace[-1], trace=trace,
    )


def _spectral_shift_inverse(grid: GridSpec, c: float):
    """Pointwise-exact inverse of (c - Lap) in spectral space."""
    denom = c + grid.rfft_xi_squared()

    def precond(r: np.ndarray) -> np.ndarray:
        return irfftn(grid, rfftn(grid, r) / denom)

    return precond


def _inner_tol(res: float, params: EllipticParams) -> float:
    """Inexact-Newton tolerance for the inner Krylov solve.

    Loose while the nonlinear residual is large (quadratic convergence does
    the work), tightening to drive the final residual below newton_tol;
    never below the krylov_tol floor.
    """
    tol = max(0.25 * params.newton_tol / max(res, params.newton_tol), 0.01 * res)
    return min(0.1, max(params.krylov_tol, tol))


# ---- Eulerian-frame solves --------------------------------------------------


def solve_linearized(phi0: ScalarField, r: ScalarField,
                     params: EllipticParams = EllipticParams()) -> ScalarField:
    """Solve exp(phi0) h - Lap h = r by preconditioned CG."""
    grid = phi0.grid
    ephi = np.exp(phi0.values)
    c = float(np.mean(ephi))

    def apply_op(h):
        return ephi * h - rlap(grid, h)

    precond = _spectral_shift_inverse(grid, c)
    h, _, _, _ = _pcg(apply_op, r.values, precond, params.krylov_tol, params.max_krylov)
    return ScalarField(grid, h)


def solve_poisson_boltzmann(rho: DensityState,
                            params: EllipticParams = EllipticParams(),
                            phi0: ScalarField | None = None) -> ScalarField:
    """Solve exp(phi) - Lap(phi) = 1 + rho_bar to sup-norm newton_tol.

    Damped Newton iteration with backtracking line search on the sup-norm
    residual; optional phi0 warm start (defaults to log(mean rho)).
    """
    grid = rho.grid
    rho_bar = rho.rho_bar.values
    if phi0 is not None:
        phi = phi0.values.copy()
    else:
        phi = np.full(grid.shape, np.log(1.0 + float(np.mean(rho_bar))))

    def residual(p):
        # exp(p) - Lap p - (1 + rho_bar), with expm1 for precision near 0
        return np.expm1(p) - rlap(grid, p) - rho_bar

    F = residual(phi)
    res = float(np.max(np.abs(F)))
    for _ in range(params.max_newton):
        if res <= params.newton_tol:
            return ScalarField(grid, phi)
        ephi = np.exp(phi)
        c = float(np.mean(ephi))
        precond = _spectral_shift_inverse(grid, c)

        def apply_op(h, ephi=ephi):
            return ephi * h - rlap(grid, h)

        delta, _, _, _ = _pcg(apply_op, -F, precond, _inner_tol(res, params), params.max_krylov)
        alpha = 1.0
        while True:
            trial = phi + alpha * delta
            F_trial = residual(trial)
            res_trial = float(np.max(np.abs(F_trial)))
            if res_trial < res or res_trial <= params.newton_tol:
                phi, F, res = trial, F_trial, res_trial
                break
            alpha *= params.damping
            if alpha < 1e-8:
                raise EllipticError(
                    f"Newton line search failed at residual {res:.3e}", residual=res
                )
    if res <= params.newton_tol:
        return ScalarField(grid, phi)
    raise EllipticError(
        f"Newton did not reach tol {params.newton_tol:.1e} in {params.max_newton} "
        f"iterations; last residual {res:.3e}", residual=res,
    )


def grad_potential(rho: DensityState,
                   params: EllipticParams = EllipticParams(),
                   check: bool = True,
                   phi0: ScalarField | None = None,
                   check_tol: float = 1e-9) -> VectorField:
    """Gradient of the potential, with an internal identity cross-check.

    Computes grad(phi) from the nonlinear solve and, when check=True, also
    solves the differentiated equation (exp(phi) - Lap) g_k = d_k rho
    componentwise and verifies sup-norm agreement to check_tol before
    returning the first result.
    """
    phi = solve_poisson_boltzmann(rho, params, phi0=phi0)
    g = gradient(phi)
    if check:
        grad_rho = gradient(rho.rho_bar)
        worst = 0.0
        for k in range(3):
            hk = solve_linearized(phi, grad_rho.component(k), params)
            worst = max(worst, float(np.max(np.abs(hk.values - g.values[k]))))
        if worst > check_tol:
            raise EllipticError(
                f"grad-potential consistency check failed: paths differ by {worst:.3e}",
                residual=worst,
            )
    return g


# ---- label-frame (variable-coefficient) solve -------------------------------


@dataclass
class LabelFrameResult:
    q: np.ndarray              # potential composed with the flow map
    grad_q: np.ndarray         # spectral gradient of q, shape (3, n, n, n)
    newton_iters: int
    residual: float
    krylov_iters: int = field(default=0)


def solve_pb_labelframe(grid: GridSpec, rho0: np.ndarray, jac_det: np.ndarray,
                        metric: np.ndarray,
                        params: EllipticParams = EllipticParams(),
                        q0: np.ndarray | None = None) -> LabelFrameResult:
    """Solve J exp(q) - d_i(M_ij d_j q) = rho0 on label coordinates.

    Parameters
    ----------
    rho0 : (n,n,n) initial density (reference frame, positive)
    jac_det : (n,n,n) Jacobian determinant J of the flow map (positive)
    metric : (3,3,n,n,n) symmetric positive matrices M = J (dphi)^-1 (dphi)^-T
    q0 : optional warm start

    The convergence criterion matches the Eulerian solve: the residual of
    the untransported equation, |exp(q) - (Lap phi) o phi - rho|, measured
    in label coordinates, must fall below newton_tol in sup norm.
    """
    J = jac_det

    def div_M_grad(h):
        g = _grad_arr(grid, h)
        F = np.empty_like(g)
        for i in range(3):
            F[i] = metric[i, 0] * g[0] + metric[i, 1] * g[1] + metric[i, 2] * g[2]
        return _div_arr(grid, F)

    def residual(q):
        # (J e^q - div(M grad q) - rho0) / J  -- pointwise Eulerian residual
        return (J * np.expm1(q) + (J - rho0) - div_M_grad(q)) / J

    if q0 is not None:
        q = q0.copy()
    else:
        q = np.full(grid.shape, np.log(float(np.mean(rho0)) / float(np.mean(J))))

    F = residual(q)
    res = float(np.max(np.abs(F)))
    total_cg = 0
    for newton_it in range(params.max_newton + 1):
        if res <= params.newton_tol:
            return LabelFrameResult(q, _grad_arr(grid, q), newton_it, res, total_cg)
        if newton_it == params.max_newton:
            break
        Jeq = J * np.exp(q)
        c = float(np.mean(Jeq))
        precond = _spectral_shift_inverse(grid, c)

        def apply_op(h, Jeq=Jeq):
            return Jeq * h - div_M_grad(h)

        delta, cg_its, _, _ = _pcg(apply_op, -(F * J), precond,
                                   params.krylov_tol, params.max_krylov)
        total_cg += cg_its
        alpha = 1.0
        while True:
            trial = q + alpha * delta
            F_trial = residual(trial)
            res_trial = float(np.max(np.abs(F_trial)))
            if res_trial < res or res_trial <= params.newton_tol:
                q, F, res = trial, F_trial, res_trial
                break
            alpha *= params.damping
            if alpha < 1e-8:
                raise EllipticError(
                    f"label-frame Newton line search failed at residual {res:.3e}",
                    residual=res,
                )
    raise EllipticError(
        f"label-frame Newton did not converge; last residual {res:.3e}", residual=res
    )
