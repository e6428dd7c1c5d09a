"""
Time integration of the periodic Euler-Poisson ion system.

Two equivalent formulations are integrated with classical RK4 and
cross-validated against each other:

Eulerian
    d/dt rho_bar = -div((1 + rho_bar) u)
    d/dt u       = -(u . grad) u - grad(potential(1 + rho_bar))

Flow map (Lagrangian)
    d/dt phi = v,   d/dt v = -(grad potential(rho)) o phi,
    rho = (rho0 / det(d phi)) o phi^-1,

with phi = id + W understood periodically.  The Lagrangian acceleration is
evaluated entirely in label coordinates: the potential equation is pulled
back through the map (see elliptic.solve_pb_labelframe), which is exact in
the continuum and avoids per-stage off-grid interpolation.  The literal
composition route is kept as `lagrangian_rhs_composed` and the two are
verified against each other in the test suite.

Flow-map geometry (Jacobians, inversion, pullback/pushforward, density and
vorticity transport) and trajectory diagnostics (mass, energy, transport
residuals) live here as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as _fft

from .elliptic import (
    DensityState,
    EllipticError,
    EllipticParams,
    grad_potential,
    solve_pb_labelframe,
    solve_poisson_boltzmann,
)
from .grid import (
    FFT_WORKERS,
    GridSpec,
    ScalarField,
    VectorField,
    curl,
    gradient,
    jacobian,
    sobolev_norm,
)
from .offgrid import OffgridEvaluator

__all__ = [
    "TimeStepper",
    "FlowMapState",
    "EulerianState",
    "DiagnosticsRecord",
    "Trajectory",
    "FlowMapError",
    "flow_jacobian",
    "jacobian_det",
    "invert_flow_map",
    "pullback",
    "pushforward",
    "density_from_flow",
    "vorticity_transport",
    "eulerian_rhs",
    "lagrangian_rhs",
    "lagrangian_rhs_composed",
    "reconstruct_eulerian",
    "integrate",
    "diagnostics",
    "total_mass",
    "total_energy",
]

JACOBIAN_DET_FLOOR = 0.05


class FlowMapError(RuntimeError):
    """Flow-map inversion failure; carries the worst offending node."""

    def __init__(self, message: str, worst_point=None, residual=None):
        super().__init__(message)
        self.worst_point = worst_point
        self.residual = residual


class JacobianDegeneration(RuntimeError):
    pass


class CFLViolation(RuntimeError):
    pass


# ---- small dense-algebra helpers on (3,3,n,n,n) stacks ----------------------


def _adjugate3(m: np.ndarray) -> np.ndarray:
    a = np.empty_like(m)
    a[0, 0] = m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1]
    a[0, 1] = -(m[0, 1] * m[2, 2] - m[0, 2] * m[2, 1])
    a[0, 2] = m[0, 1] * m[1, 2] - m[0, 2] * m[1, 1]
    a[1, 0] = -(m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
    a[1, 1] = m[0, 0] * m[2, 2] - m[0, 2] * m[2, 0]
    a[1, 2] = -(m[0, 0] * m[1, 2] - m[0, 2] * m[1, 0])
    a[2, 0] = m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]
    a[2, 1] = -(m[0, 0] * m[2, 1] - m[0, 1] * m[2, 0])
    a[2, 2] = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    return a


def _det3(m: np.ndarray, adj: np.ndarray | None = None) -> np.ndarray:
    if adj is None:
        return (
            m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
            - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
            + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
        )
    return m[0, 0] * adj[0, 0] + m[0, 1] * adj[1, 0] + m[0, 2] * adj[2, 0]


def _jacobian_arr(grid: GridSpec, vals: np.ndarray) -> np.ndarray:
    """d_b vals_a for a raw (3,n,n,n) array, shape (3,3,n,n,n)."""
    c = _fft.fftn(vals, axes=(1, 2, 3), workers=FFT_WORKERS)
    ik = grid.deriv_multiplier()
    stacked = np.empty((9, *grid.shape), dtype=np.complex128)
    for a in range(3):
        for b in range(3):
            stacked[3 * a + b] = ik[b] * c[a]
    out = _fft.ifftn(stacked, axes=(1, 2, 3), workers=FFT_WORKERS).real
    return out.reshape(3, 3, *grid.shape)


def _flow_jacobian_arr(grid: GridSpec, W_vals: np.ndarray) -> np.ndarray:
    dphi = _jacobian_arr(grid, W_vals)
    for a in range(3):
        dphi[a, a] += 1.0
    return dphi


# ---- states ------------------------------------------------------------------


@dataclass(frozen=True)
class TimeStepper:
    """Classical 4-stage Runge-Kutta stepping parameters."""

    dt: float
    scheme: str = "rk4"
    dealias_each_stage: bool = True  # applies to the Eulerian right-hand side

    def __post_init__(self) -> None:
        if not (self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.scheme != "rk4":
            raise ValueError("only the classical rk4 scheme is supported")


class FlowMapState:
    """Flow map phi = id + W (periodic displacement) and velocity v."""

    __slots__ = ("W", "v", "t", "_min_det")

    def __init__(self, W: VectorField, v: VectorField, t: float = 0.0):
        if W.grid != v.grid:
            raise ValueError("W and v must share one grid")
        self.W = W
        self.v = v
        self.t = float(t)
        dphi = _flow_jacobian_arr(W.grid, W.values)
        self._min_det = float(np.min(_det3(dphi)))
        if self._min_det <= 0.0:
            raise ValueError(
                f"flow map is not orientation-preserving: min det = {self._min_det:.3e}"
            )

    @property
    def grid(self) -> GridSpec:
        return self.W.grid

    @property
    def min_jacobian_det(self) -> float:
        return self._min_det

    @classmethod
    def identity(cls, grid: GridSpec, t: float = 0.0) -> "FlowMapState":
        return cls(VectorField.zero(grid), VectorField.zero(grid), t)


class EulerianState:
    """Eulerian solution pair (rho = 1 + rho_bar, u)."""

    __slots__ = ("rho_bar", "u", "t")

    def __init__(self, rho_bar: ScalarField, u: VectorField, t: float = 0.0):
        if rho_bar.grid != u.grid:
            raise ValueError("rho_bar and u must share one grid")
        if float(np.min(rho_bar.values)) <= -1.0:
            raise ValueError("density must stay positive: min(1 + rho_bar) <= 0")
        self.rho_bar = rho_bar
        self.u = u
        self.t = float(t)

    @property
    def grid(self) -> GridSpec:
        return self.rho_bar.grid


@dataclass
class DiagnosticsRecord:
    """Per-output-time scalar diagnostics of a trajectory."""

    t: float
    mass: float
    energy: float
    density_transport_residual: float = math.nan
    vorticity_transport_residual: float = math.nan
    min_jacobian_det: float = math.nan
    rho_bar_norm: float = math.nan   # H^{s-1}
    u_norm: float = math.nan         # H^s
    omega_norm: float = math.nan     # H^{s-1}

    FIELDS = (
        "t", "mass", "energy", "density_transport_residual",
        "vorticity_transport_residual", "min_jacobian_det",
        "rho_bar_norm", "u_norm", "omega_norm",
    )


@dataclass
class Trajectory:
    """Output samples of one integration run."""

    formulation: str
    times: list[float] = field(default_factory=list)
    states: list = field(default_factory=list)
    records: list[DiagnosticsRecord] = field(default_factory=list)
    reconstructed: list = field(default_factory=list)  # EulerianState (lagrangian runs)
    label_times: list[float] = field(default_factory=list)
    label_positions: list[np.ndarray] = field(default_factory=list)
    label_velocities: list[np.ndarray] = field(default_factory=list)
    aborted: bool = False
    abort_reason: str | None = None
    steps_completed: int = 0

    @property
    def final_state(self):
        return self.states[-1]

    @property
    def final_reconstructed(self):
        return self.reconstructed[-1] if self.reconstructed else None

    def label_path_arrays(self):
        return (
            np.asarray(self.label_times),
            np.stack(self.label_positions),
            np.stack(self.label_velocities),
        )


# ---- flow-map geometry -------------------------------------------------------


def flow_jacobian(flow: FlowMapState) -> np.ndarray:
    """Nodal Jacobian matrices d(id + W), shape (3, 3, n, n, n)."""
    return _flow_jacobian_arr(flow.grid, flow.W.values)


def jacobian_det(flow: FlowMapState) -> ScalarField:
    """det(d phi) as a nodal scalar field."""
    return ScalarField(flow.grid, _det3(flow_jacobian(flow)))


def invert_flow_map(flow: FlowMapState, tol: float = 1e-10,
                    max_iter: int = 80, method: str = "trig") -> VectorField:
    """Inverse displacement U with psi = id + U and phi(psi(x)) = x.

    Uses the fixed-point iteration psi <- x - W(psi) while the displacement
    gradient is contractive (sup Frobenius norm < 0.9), otherwise pointwise
    Newton on the interpolated map.  The returned field satisfies
    sup |phi(psi(x)) - x| <= tol.
    """
    grid = flow.grid
    W = flow.W
    X = grid.mesh().reshape(3, -1).T  # (n^3, 3)
    ev = OffgridEvaluator(W, method=method)
    dW = _jacobian_arr(grid, W.values)
    dw_sup = float(np.max(np.sqrt(np.einsum("ab...,ab...->...", dW, dW))))

    U = -W.values.reshape(3, -1).T
    if dw_sup < 0.9:
        for _ in range(max_iter):
            Wat = ev.at(X + U)
            res_vec = U + Wat
            res = float(np.max(np.abs(res_vec)))
            if res <= tol:
                return VectorField(grid, U.T.reshape(3, *grid.shape))
            U = -Wat
        worst = int(np.argmax(np.max(np.abs(res_vec), axis=1)))
        raise FlowMapError(
            f"fixed-point inversion stalled at residual {res:.3e}",
            worst_point=X[worst], residual=res,
        )
    # pointwise Newton on g(psi) = psi + W(psi) - x
    row_evs = [OffgridEvaluator(VectorField(grid, dW[a]), method=method) for a in range(3)]
    for _ in range(max_iter):
        pts = X + U
        Wat = ev.at(pts)
        g = U + Wat
        res = float(np.max(np.abs(g)))
        if res <= tol:
            return VectorField(grid, U.T.reshape(3, *grid.shape))
        Jm = np.stack([row_evs[a].at(pts) for a in range(3)], axis=1)  # (P,3,3)
        for a in range(3):
            Jm[:, a, a] += 1.0
        U = U - np.linalg.solve(Jm, g[..., None])[..., 0]
    worst = int(np.argmax(np.max(np.abs(g), axis=1)))
    raise FlowMapError(
        f"Newton inversion stalled at residual {res:.3e}",
        worst_point=X[worst], residual=res,
    )


def pullback(f, flow: FlowMapState, method: str = "trig"):
    """f composed with the flow map: (f o phi)(x) = f(x + W(x))."""
    grid = flow.grid
    pts = (grid.mesh() + flow.W.values).reshape(3, -1).T
    vals = OffgridEvaluator(f, method=method).at(pts)
    if isinstance(f, ScalarField):
        return ScalarField(grid, vals.reshape(grid.shape))
    return VectorField(grid, vals.T.reshape(3, *grid.shape))


def pushforward(f, flow: FlowMapState, method: str = "trig",
                inverse_disp: VectorField | None = None):
    """f composed with the inverse map: f o phi^-1."""
    grid = flow.grid
    if inverse_disp is None:
        inverse_disp = invert_flow_map(flow, method=method)
    pts = (grid.mesh() + inverse_disp.values).reshape(3, -1).T
    vals = OffgridEvaluator(f, method=method).at(pts)
    if isinstance(f, ScalarField):
        return ScalarField(grid, vals.reshape(grid.shape))
    return VectorField(grid, vals.T.reshape(3, *grid.shape))


def density_from_flow(rho0: DensityState, flow: FlowMapState,
                      inverse_disp: VectorField | None = None) -> DensityState:
    """Transported density rho = (rho0 / det(d phi)) o phi^-1."""
    J = _det3(_flow_jacobian_arr(flow.grid, flow.W.values))
    carried = ScalarField(flow.grid, rho0.rho_values() / J)
    rho = pushforward(carried, flow, inverse_disp=inverse_disp)
    return DensityState(ScalarField(flow.grid, rho.values - 1.0))


def vorticity_transport(omega0: VectorField, flow: FlowMapState,
                        inverse_disp: VectorField | None = None) -> VectorField:
    """Transported vorticity ((1/det d phi) [d phi] omega0) o phi^-1."""
    dphi = _flow_jacobian_arr(flow.grid, flow.W.values)
    J = _det3(dphi)
    carried = np.einsum("ab...,b...->a...", dphi, omega0.values) / J
    return pushforward(VectorField(flow.grid, carried), flow, inverse_disp=inverse_disp)


def reconstruct_eulerian(flow: FlowMapState, rho0: DensityState,
                         params: EllipticParams = EllipticParams(),
                         method: str = "trig") -> EulerianState:
    """Eulerian fields (rho, u) carried by a flow-map state: u = v o phi^-1."""
    inv = invert_flow_map(flow, method=method)
    rho = density_from_flow(rho0, flow, inverse_disp=inv)
    u = pushforward(flow.v, flow, inverse_disp=inv)
    return EulerianState(rho.rho_bar, u, flow.t)


# ---- right-hand sides ----------------------------------------------------------


def eulerian_rhs(state: EulerianState,
                 params: EllipticParams = EllipticParams(),
                 dealias_products: bool = True,
                 phi_warm: ScalarField | None = None,
                 return_phi: bool = False):
    """Time derivative (d rho_bar / dt, d u / dt) of the Eulerian system."""
    grid = state.grid
    rb = state.rho_bar.values
    u = state.u.values
    mask = grid.dealias_mask() if dealias_products else 1.0
    ik = grid.deriv_multiplier()

    rho_u = (1.0 + rb) * u
    rho_u_hat = _fft.fftn(rho_u, axes=(1, 2, 3), workers=FFT_WORKERS) * mask
    rb_t = -_fft.ifftn(
        ik[0] * rho_u_hat[0] + ik[1] * rho_u_hat[1] + ik[2] * rho_u_hat[2],
        workers=FFT_WORKERS,
    ).real

    du = _jacobian_arr(grid, u)
    conv = np.einsum("b...,ab...->a...", u, du)
    conv_hat = _fft.fftn(conv, axes=(1, 2, 3), workers=FFT_WORKERS) * mask
    conv = _fft.ifftn(conv_hat, axes=(1, 2, 3), workers=FFT_WORKERS).real

    phi = solve_poisson_boltzmann(DensityState(state.rho_bar), params, phi0=phi_warm)
    u_t = -conv - gradient(phi).values
    if return_phi:
        return ScalarField(grid, rb_t), VectorField(grid, u_t), phi
    return ScalarField(grid, rb_t), VectorField(grid, u_t)


def lagrangian_rhs(state: FlowMapState, rho0: DensityState,
                   params: EllipticParams = EllipticParams(),
                   q_warm: np.ndarray | None = None,
                   return_q: bool = False,
                   det_floor: float = 0.0):
    """Time derivative (d phi/dt, d v/dt) of the flow-map system.

    The acceleration -(grad potential(rho)) o phi is evaluated in label
    coordinates: with dphi = I + dW, J = det(dphi), M = J dphi^-1 dphi^-T,
    solve J e^q - div(M grad q) = rho0 and return -dphi^-T grad q.
    """
    grid = state.grid
    dphi = _flow_jacobian_arr(grid, state.W.values)
    adj = _adjugate3(dphi)
    J = _det3(dphi, adj)
    minJ = float(np.min(J))
    if minJ <= det_floor:
        raise JacobianDegeneration(
            f"flow-map Jacobian determinant reached {minJ:.3e} (floor {det_floor})"
        )
    metric = np.einsum("ik...,jk...->ij...", adj, adj) / J
    sol = solve_pb_labelframe(grid, rho0.rho_values(), J, metric, params, q0=q_warm)
    accel = -np.einsum("ji...,j...->i...", adj, sol.grad_q) / J
    phidot = state.v.copy()
    vdot = VectorField(grid, accel)
    if return_q:
        return phidot, vdot, sol.q
    return phidot, vdot


def lagrangian_rhs_composed(state: FlowMapState, rho0: DensityState,
                            params: EllipticParams = EllipticParams(),
                            method: str = "trig"):
    """Reference evaluation by literal composition (slower, used as oracle):

        d v/dt = -pullback(grad potential(density_from_flow(rho0, phi)), phi).
    """
    inv = invert_flow_map(state, method=method)
    rho = density_from_flow(rho0, state, inverse_disp=inv)
    g = grad_potential(rho, params, check=False)
    accel = pullback(g, state, method=method)
    return state.v.copy(), VectorField(state.grid, -accel.values)


# ---- diagnostics ----------------------------------------------------------------


def total_mass(rho_bar: ScalarField) -> float:
    """Integral of rho over the box."""
    grid = rho_bar.grid
    return grid.volume * (1.0 + float(np.mean(rho_bar.values)))


def total_energy(state: EulerianState,
                 params: EllipticParams = EllipticParams(),
                 phi: ScalarField | None = None) -> float:
    """Conserved energy: kinetic + electrostatic + electron enthalpy.

    E = int [ rho |u|^2 / 2 + |grad phi|^2 / 2 + (phi - 1) e^phi + 1 ] dx,
    which vanishes identically at the equilibrium (rho, u) = (1, 0).
    """
    if phi is None:
        phi = solve_poisson_boltzmann(DensityState(state.rho_bar), params)
    gphi = gradient(phi).values
    p = phi.values
    # (phi - 1) e^phi + 1 = phi e^phi - expm1(phi), stable near phi = 0
    well = p * np.exp(p) - np.expm1(p)
    dens = (
        0.5 * (1.0 + state.rho_bar.values) * np.sum(state.u.values**2, axis=0)
        + 0.5 * np.sum(gphi**2, axis=0)
        + well
    )
    return float(np.sum(dens)) * state.grid.cell_volume


def diagnostics(state, rho0: DensityState | None = None,
                u0: VectorField | None = None, *, s: float = 3.0,
                params: EllipticParams = EllipticParams(),
                reconstructed: EulerianState | None = None,
                inverse_disp: VectorField | None = None) -> DiagnosticsRecord:
    """Scalar diagnostics of a state.

    For flow-map states the record includes the density and vorticity
    transport residuals

        || det(d phi) (rho o phi) - rho0 ||_inf,
        || curl u - transported(curl u0) ||_{s-1} / max(1, ||curl u0||_{s-1}),

    which vanish identically along exact trajectories.
    """
    if isinstance(state, EulerianState):
        omega = curl(state.u)
        return DiagnosticsRecord(
            t=state.t,
            mass=total_mass(state.rho_bar),
            energy=total_energy(state, params),
            rho_bar_norm=sobolev_norm(state.rho_bar, s - 1.0),
            u_norm=sobolev_norm(state.u, s),
            omega_norm=sobolev_norm(omega, s - 1.0),
        )

    if rho0 is None:
        raise ValueError("flow-map diagnostics require the initial density rho0")
    flow = state
    if inverse_disp is None:
        inverse_disp = invert_flow_map(flow)
    if reconstructed is None:
        rho = density_from_flow(rho0, flow, inverse_disp=inverse_disp)
        u = pushforward(flow.v, flow, inverse_disp=inverse_disp)
        reconstructed = EulerianState(rho.rho_bar, u, flow.t)

    J = _det3(_flow_jacobian_arr(flow.grid, flow.W.values))
    rho_on_labels = pullback(
        ScalarField(flow.grid, 1.0 + reconstructed.rho_bar.values), flow
    )
    dens_res = float(np.max(np.abs(J * rho_on_labels.values - rho0.rho_values())))

    vort_res = math.nan
    omega = curl(reconstructed.u)
    if u0 is not None:
        omega0 = curl(u0)
        transported = vorticity_transport(omega0, flow, inverse_disp=inverse_disp)
        vort_res = sobolev_norm(omega - transported, s - 1.0) / max(
            1.0, sobolev_norm(omega0, s - 1.0)
        )

    return DiagnosticsRecord(
        t=flow.t,
        mass=total_mass(reconstructed.rho_bar),
        energy=total_energy(reconstructed, params),
        density_transport_residual=dens_res,
        vorticity_transport_residual=vort_res,
        min_jacobian_det=float(np.min(J)),
        rho_bar_norm=sobolev_norm(reconstructed.rho_bar, s - 1.0),
        u_norm=sobolev_norm(reconstructed.u, s),
        omega_norm=sobolev_norm(omega, s - 1.0),
    )


# ---- integration -------------------------------------------------------------------


def _label_eval(grid: GridSpec, vals: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return OffgridEvaluator(VectorField(grid, vals)).at(pts)


def integrate(state, rho0: DensityState | None, stepper: TimeStepper, T: float, *,
              s: float = 3.0,
              params: EllipticParams = EllipticParams(),
              output_every: int | None = None,
              with_diagnostics: bool = True,
              label_points: np.ndarray | None = None,
              min_det_floor: float = JACOBIAN_DET_FLOOR,
              cfl_factor: float = 0.5,
              track_flow_map: bool = False) -> Trajectory:
    """Integrate to time T with classical RK4.

    `state` selects the formulation (EulerianState or FlowMapState).  For
    flow-map runs, reconstructed Eulerian fields are computed at output
    times only.  `label_points` requests a dense per-step record of particle
    positions and velocities at the given labels (flow-map runs only).
    `track_flow_map` co-integrates d/dt W = u o (id + W) along an Eulerian
    run so transport diagnostics can be evaluated for it too.

    On CFL violation, Jacobian degeneration or elliptic failure the partial
    trajectory is returned with .aborted set and .abort_reason filled.
    """
    dt = stepper.dt
    nsteps = int(round(T / dt))
    if abs(nsteps * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"dt = {dt} does not divide T = {T}")
    if output_every is None:
        output_every = max(1, int(math.ceil(nsteps / 32)))

    grid = state.grid
    lagrangian = isinstance(state, FlowMapState)
    if lagrangian and rho0 is None:
        raise ValueError("flow-map integration requires rho0")
    traj = Trajectory(formulation="lagrangian" if lagrangian else "eulerian")
    t0 = state.t

    warm = {"q": None, "phi": None}

    if lagrangian:
        y = (state.W.values.copy(), state.v.values.copy())

        def rhs(y_):
            W, v = y_
            st = object.__new__(FlowMapState)  # skip validation in the hot loop
            st.W = VectorField(grid, W)
            st.v = VectorField(grid, v)
            st.t = 0.0
            phidot, vdot, q = lagrangian_rhs(
                st, rho0, params, q_warm=warm["q"], return_q=True,
                det_floor=min_det_floor,
            )
            warm["q"] = q
            return (phidot.values, vdot.values)

        def speed(y_):
            return float(np.max(np.abs(y_[1])))

        def snapshot(y_, t_):
            return FlowMapState(VectorField(grid, y_[0].copy()),
                                VectorField(grid, y_[1].copy()), t_)

    else:
        if track_flow_map:
            y = (state.rho_bar.values.copy(), state.u.values.copy(),
                 np.zeros((3, *grid.shape)))
        else:
            y = (state.rho_bar.values.copy(), state.u.values.copy())

        def rhs(y_):
            st = object.__new__(EulerianState)
            st.rho_bar = ScalarField(grid, y_[0])
            st.u = VectorField(grid, y_[1])
            st.t = 0.0
            rbt, ut, phi = eulerian_rhs(
                st, params, dealias_products=stepper.dealias_each_stage,
                phi_warm=warm["phi"], return_phi=True,
            )
            warm["phi"] = phi
            if track_flow_map:
                pts = (grid.mesh() + y_[2]).reshape(3, -1).T
                Wdot = _label_eval(grid, y_[1], pts).T.reshape(3, *grid.shape)
                return (rbt.values, ut.values, Wdot)
            return (rbt.values, ut.values)

        def speed(y_):
            return float(np.max(np.abs(y_[1])))

        def snapshot(y_, t_):
            st = EulerianState(ScalarField(grid, y_[0].copy()),
                               VectorField(grid, y_[1].copy()), t_)
            if track_flow_map:
                st_flow = FlowMapState(VectorField(grid, y_[2].copy()),
                                       VectorField(grid, y_[1].copy()), t_)
                return (st, st_flow)
            return st

    if label_points is not None:
        if not lagrangian:
            raise ValueError("label paths are only defined for flow-map runs")
        label_points = np.atleast_2d(np.asarray(label_points, dtype=np.float64))

    def record_output(y_, t_, step):
        st = snapshot(y_, t_)
        traj.times.append(t_)
        traj.states.append(st)
        if not with_diagnostics:
            return
        if lagrangian:
            inv = invert_flow_map(st)
            rho = density_from_flow(rho0, st, inverse_disp=inv)
            u = pushforward(st.v, st, inverse_disp=inv)
            rec_state = EulerianState(rho.rho_bar, u, t_)
            traj.reconstructed.append(rec_state)
            traj.records.append(
                diagnostics(st, rho0, None, s=s, params=params,
                            reconstructed=rec_state, inverse_disp=inv)
            )
        elif track_flow_map:
            traj.records.append(diagnostics(st[0], s=s, params=params))
        else:
            traj.records.append(diagnostics(st, s=s, params=params))

    def record_labels(y_, t_):
        if label_points is None:
            return
        Wk = _label_eval(grid, y_[0], label_points)
        vk = _label_eval(grid, y_[1], label_points)
        traj.label_times.append(t_)
        traj.label_positions.append(label_points + Wk)
        traj.label_velocities.append(vk)

    try:
        record_output(y, t0, 0)
        record_labels(y, t0)
        for step in range(1, nsteps + 1):
            vmax = speed(y)
            if vmax > 0.0 and dt > cfl_factor * grid.dx / vmax:
                raise CFLViolation(
                    f"dt = {dt} exceeds CFL bound {cfl_factor * grid.dx / vmax:.3e} "
                    f"at step {step} (max speed {vmax:.3e})"
                )
            k1 = rhs(y)
            k2 = rhs(tuple(a + 0.5 * dt * b for a, b in zip(y, k1)))
            k3 = rhs(tuple(a + 0.5 * dt * b for a, b in zip(y, k2)))
            k4 = rhs(tuple(a + dt * b for a, b in zip(y, k3)))
            y = tuple(
                a + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
                for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)
            )
            t_now = t0 + step * dt
            traj.steps_completed = step
            record_labels(y, t_now)
            if step % output_every == 0 or step == nsteps:
                record_output(y, t_now, step)
    except (CFLViolation, JacobianDegeneration, EllipticError, FlowMapError) as exc:
        traj.aborted = True
        traj.abort_reason = f"{type(exc).__name__}: {exc}"
    return traj
