"""Indirect gradient adaptive state tracking.

Here the estimates target the plant parametrization rather than the
controller: column j of theta stacks [column j of Theta1; row j of Theta2],
where A = A_m - B_m Theta1*^T and B = B_m Theta2*. An a-posteriori state
estimator

    xhat(t+1) = A_m xhat(t) + B_m (Theta2(t) u(t) - Theta1(t)^T x(t))

produces the estimation error e_x = xhat - x that drives the normalized
gradient law over the regressor omega = [-x; u], with eps = e_x + sum_j
xi_j. A projection keeps the diagonal entries of Theta2 sign-correct and
bounded away from zero so the controller recovery

    K1^T = Theta2^{-1} Theta1^T,  K2 = Theta2^{-1}

stays well posed. The single-input normalizer omits the xi energy; the
multi-input law includes it (the two formulations differ on this point and
each is followed literally).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _fastpath
from .diagnostics import SimulationTrace, indirect_V_series
from .direct import InitialConditions, _check_run_args, _shape_theta
from .errors import (GainError, ModelError, NumericsError, ProjectionError,
                     SingularGainError)
from .filters import ChannelFilterBank, RegressorFrame
from .systems import (CONTINUOUS, DISCRETE, PlantModel, ReferenceModel,
                      ReferenceSignal, integrate_ct, solve_matching)


@dataclass(frozen=True)
class ProjectionConfig:
    """Sign priors and the lower bound theta2_lower = 1 / k2_upper.

    ``enabled=False`` keeps the raw gradient law; controller recovery then
    raises on sub-threshold estimates instead of being protected.
    """

    theta2_lower: np.ndarray  # (M,) positive
    signs: np.ndarray  # (M,) entries +-1
    enabled: bool = True

    def __post_init__(self):
        signs = np.atleast_1d(np.asarray(self.signs, dtype=float))
        M = signs.shape[0]
        if not np.all(np.abs(signs) == 1.0):
            raise ProjectionError("projection signs must be +1 or -1")
        lower = np.broadcast_to(
            np.atleast_1d(np.asarray(self.theta2_lower, dtype=float)), (M,)).copy()
        if np.any(lower <= 0.0):
            raise ProjectionError("theta2 lower bounds must be positive")
        object.__setattr__(self, "signs", signs)
        object.__setattr__(self, "theta2_lower", lower)

    @classmethod
    def from_k2_upper(cls, k2_upper, signs, enabled: bool = True) -> "ProjectionConfig":
        """Build the bound from an upper bound on |k2*| (lower = 1/upper)."""
        upper = np.atleast_1d(np.asarray(k2_upper, dtype=float))
        if np.any(upper <= 0.0):
            raise ProjectionError("k2 upper bounds must be positive")
        return cls(theta2_lower=1.0 / upper, signs=signs, enabled=enabled)

    @property
    def n_inputs(self) -> int:
        return self.signs.shape[0]


@dataclass(frozen=True)
class IndirectGainConfig:
    """Gain blocks for the indirect law.

    Each Gamma_j must be symmetric positive definite and block diagonal
    with a diagonal trailing M x M block (the structure the projection
    argument needs); discrete time additionally requires every eigenvalue
    below 2.
    """

    Gamma: np.ndarray  # (M, n_w, n_w)
    time_domain: str = DISCRETE

    def __post_init__(self):
        G = np.asarray(self.Gamma, dtype=float)
        if G.ndim == 2:
            G = G[None]
        if G.ndim != 3 or G.shape[1] != G.shape[2]:
            raise GainError(f"Gamma must stack to (M, n_w, n_w), got {G.shape}")
        M = G.shape[0]
        n_w = G.shape[1]
        n = n_w - M
        if n < 1:
            raise GainError(f"Gamma block size {n_w} too small for M={M}")
        for j in range(M):
            if not np.allclose(G[j], G[j].T, atol=1e-10, rtol=0.0):
                raise GainError(f"Gamma[{j}] must be symmetric")
            eig = np.linalg.eigvalsh(G[j])
            if eig[0] <= 0.0:
                raise GainError(f"Gamma[{j}] must be positive definite")
            if self.time_domain == DISCRETE and eig[-1] >= 2.0:
                raise GainError(
                    f"Gamma[{j}] violates the spectral bound 2: largest eigenvalue "
                    f"{eig[-1]:.6g}"
                )
            off = G[j][:n, n:]
            tail = G[j][n:, n:]
            if np.any(off != 0.0) or np.any(tail * (1.0 - np.eye(M)) != 0.0):
                raise GainError(
                    f"Gamma[{j}] must be block diagonal with a diagonal trailing block"
                )
        object.__setattr__(self, "Gamma", G)

    @property
    def n_inputs(self) -> int:
        return self.Gamma.shape[0]

    @property
    def n_w(self) -> int:
        return self.Gamma.shape[1]


def stack_plant_estimate(Theta1, Theta2) -> np.ndarray:
    """Stack (Theta1, Theta2) into the (n+M, M) column layout."""
    T1 = np.asarray(Theta1, dtype=float)
    T2 = np.atleast_2d(np.asarray(Theta2, dtype=float))
    if T1.ndim == 1:
        T1 = T1.reshape(-1, 1)
    return np.vstack([T1, T2.T])


def split_plant_estimate(theta):
    """theta -> (Theta1, Theta2)."""
    th = np.asarray(theta, dtype=float)
    if th.ndim == 1:
        th = th.reshape(-1, 1)
    M = th.shape[1]
    return th[:-M].copy(), th[-M:].T.copy()


def theta_star_indirect(K1, K2) -> np.ndarray:
    """True plant parametrization from matching gains:
    Theta1* = K1 (K2^{-1})^T, Theta2* = K2^{-1}."""
    K1 = np.asarray(K1, dtype=float)
    K2 = np.atleast_2d(np.asarray(K2, dtype=float))
    if K1.ndim == 1:
        K1 = K1.reshape(-1, 1)
    K2inv = np.linalg.inv(K2)
    return stack_plant_estimate(K1 @ K2inv.T, K2inv)


@dataclass
class IndirectControllerState:
    theta: np.ndarray  # (n_w, M)
    x_hat: np.ndarray  # (n,)
    bank: ChannelFilterBank

    @property
    def Theta1(self) -> np.ndarray:
        return split_plant_estimate(self.theta)[0]

    @property
    def Theta2(self) -> np.ndarray:
        return split_plant_estimate(self.theta)[1]

    @property
    def theta2_diag(self) -> np.ndarray:
        M = self.theta.shape[1]
        return np.array([self.theta[-M + j, j] for j in range(M)])


def check_projection_start(theta, projection: ProjectionConfig):
    """Reject initial estimates that violate the projection preconditions."""
    th = np.asarray(theta, dtype=float)
    if th.ndim == 1:
        th = th.reshape(-1, 1)
    M = th.shape[1]
    for j in range(M):
        t2 = th[-M + j, j]
        if projection.signs[j] * t2 < projection.theta2_lower[j]:
            raise ProjectionError(
                f"initial theta2[{j}]={t2:.6g} violates sign/lower-bound "
                f"(need sign {projection.signs[j]:+.0f}, magnitude >= "
                f"{projection.theta2_lower[j]:.6g})"
            )


def make_indirect_state(ref: ReferenceModel, theta0, xhat0=None,
                        projection: ProjectionConfig | None = None) -> IndirectControllerState:
    n, M = ref.n, ref.n_inputs
    n_w = n + M
    theta = _shape_theta(theta0, n_w, M)
    if M > 1:
        theta[-M:] *= np.eye(M).T
    if projection is not None and projection.enabled:
        check_projection_start(theta, projection)
    x_hat = np.zeros(n) if xhat0 is None else np.asarray(xhat0, float).reshape(n)
    return IndirectControllerState(theta=theta, x_hat=x_hat,
                                   bank=ChannelFilterBank(ref, n_w))


def step_estimator(state: IndirectControllerState, ref: ReferenceModel,
                   x, u) -> np.ndarray:
    """One estimator step: A_m xhat + B_m (Theta2 u - Theta1^T x)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.atleast_1d(np.asarray(u, dtype=float)).reshape(-1)
    n, M = ref.n, ref.n_inputs
    if x.shape[0] != n or u.shape[0] != M:
        raise ModelError("step_estimator: state/input dimensions disagree")
    omega = np.concatenate([-x, u])
    v = state.theta.T @ omega  # = Theta2 u - Theta1^T x
    return ref.A_m @ state.x_hat + ref.B_m @ v


def epsilon_indirect(e_x, xi) -> np.ndarray:
    """eps_i = e_xi + sum_j xi_ij (no rho weighting here)."""
    e_x = np.asarray(e_x, dtype=float).reshape(-1)
    xi_m = np.asarray(xi, dtype=float)
    if xi_m.ndim == 1:
        xi_m = xi_m.reshape(-1, 1)
    if xi_m.shape[0] != e_x.shape[0]:
        raise ModelError(f"epsilon_indirect: e_x {e_x.shape}, xi {xi_m.shape} disagree")
    return e_x + np.sum(xi_m, axis=1)


def _projection_values(theta2, g2, projection: ProjectionConfig):
    """Discrete landing form: zero when the candidate stays admissible,
    otherwise the correction placing theta2 exactly on the signed bound."""
    cand = theta2 + g2
    target = projection.signs * projection.theta2_lower
    need = projection.signs * cand < projection.theta2_lower
    return np.where(need, target - cand, 0.0)


def indirect_step_values(theta, gains: IndirectGainConfig,
                         projection: ProjectionConfig | None,
                         epsilon, frame: RegressorFrame):
    """Gradient step with projection; returns (theta_next, g2, f2)."""
    th = np.asarray(theta, dtype=float)
    if th.ndim == 1:
        th = th.reshape(-1, 1)
    n_w, M = th.shape
    n = n_w - M
    eps = np.asarray(epsilon, dtype=float).reshape(-1)
    m2 = frame.m * frame.m
    a = np.einsum("k,kjc->jc", eps, frame.zeta)  # (M, n_w)
    g = -np.matmul(gains.Gamma, a[:, :, None])[..., 0].T / m2  # (n_w, M)
    if M > 1:
        g[-M:] *= np.eye(M).T
    theta2 = np.array([th[n + j, j] for j in range(M)])
    g2 = np.array([g[n + j, j] for j in range(M)])
    if projection is not None and projection.enabled:
        f2 = _projection_values(theta2, g2, projection)
    else:
        f2 = np.zeros(M)
    theta_next = th + g
    for j in range(M):
        theta_next[n + j, j] += f2[j]
    if not np.all(np.isfinite(theta_next)):
        raise NumericsError("non-finite parameter update")
    return theta_next, g2, f2


def update_indirect_discrete(state: IndirectControllerState,
                             gains: IndirectGainConfig,
                             projection: ProjectionConfig | None,
                             epsilon, frame: RegressorFrame) -> IndirectControllerState:
    theta_next, _, _ = indirect_step_values(state.theta, gains, projection,
                                            epsilon, frame)
    return IndirectControllerState(theta=theta_next, x_hat=state.x_hat,
                                   bank=state.bank)


def recover_controller_gains(theta, projection: ProjectionConfig | None):
    """(K1, K2) from the plant estimate; raises when Theta2 is not safely
    invertible and no projection guards it."""
    th = np.asarray(theta, dtype=float)
    if th.ndim == 1:
        th = th.reshape(-1, 1)
    n_w, M = th.shape
    n = n_w - M
    theta2 = np.array([th[n + j, j] for j in range(M)])
    floor = projection.theta2_lower if projection is not None else np.full(M, 1e-12)
    if np.any(np.abs(theta2) < floor - 1e-15):
        raise SingularGainError(
            f"theta2 diagonal {theta2} below the invertibility threshold {floor}"
        )
    K2 = np.diag(1.0 / theta2)
    K1 = th[:n] / theta2[None, :]  # columns K1[:, j] = Theta1[:, j] / theta2_j
    return K1, K2


def control_indirect(state: IndirectControllerState,
                     projection: ProjectionConfig | None, x, r) -> np.ndarray:
    """u = K1^T x + K2 r with gains recovered from the projected estimate."""
    x = np.asarray(x, dtype=float).reshape(-1)
    r = np.atleast_1d(np.asarray(r, dtype=float)).reshape(-1)
    K1, K2 = recover_controller_gains(state.theta, projection)
    return K1.T @ x + K2 @ r


def _ct_projection_rate(theta2, g2, projection: ProjectionConfig):
    """Derivative-nulling form: on (or past) the bound with an outward raw
    derivative, cancel it; otherwise leave the law untouched."""
    on_boundary = projection.signs * theta2 <= projection.theta2_lower + 1e-12
    outward = projection.signs * g2 < 0.0
    return np.where(on_boundary & outward, -g2, 0.0)


def update_indirect_ct(state: IndirectControllerState, gains: IndirectGainConfig,
                       projection: ProjectionConfig | None, frame_eval,
                       h: float, method: str = "rk4") -> IndirectControllerState:
    """Integrate the indirect law one step; ``frame_eval(theta) ->
    (epsilon, frame)`` is evaluated at interior stage points."""
    n_w, M = state.theta.shape
    n = n_w - M

    def rhs(_t, y):
        th = y.reshape(n_w, M)
        eps, frame = frame_eval(th)
        eps = np.asarray(eps, dtype=float).reshape(-1)
        m2 = frame.m * frame.m
        a = np.einsum("k,kjc->jc", eps, frame.zeta)
        g = -np.matmul(gains.Gamma, a[:, :, None])[..., 0].T / m2
        if M > 1:
            g[-M:] *= np.eye(M).T
        if projection is not None and projection.enabled:
            theta2 = np.array([th[n + j, j] for j in range(M)])
            g2 = np.array([g[n + j, j] for j in range(M)])
            f2 = _ct_projection_rate(theta2, g2, projection)
            for j in range(M):
                g[n + j, j] += f2[j]
        return g.ravel()

    y1 = integrate_ct(rhs, state.theta.ravel(), h, method=method)
    theta = y1.reshape(n_w, M)
    if projection is not None and projection.enabled:
        _clamp_to_bound(theta, projection, n, M)
    return IndirectControllerState(theta=theta, x_hat=state.x_hat, bank=state.bank)


def _clamp_to_bound(theta, projection, n, M):
    # integration can land a hair inside the bound; snap back onto it
    for j in range(M):
        t2 = theta[n + j, j]
        if projection.signs[j] * t2 < projection.theta2_lower[j]:
            theta[n + j, j] = projection.signs[j] * projection.theta2_lower[j]


def run_indirect_scenario(plant: PlantModel, ref: ReferenceModel,
                          signal: ReferenceSignal, gains: IndirectGainConfig,
                          projection: ProjectionConfig | None,
                          init: InitialConditions, horizon: int,
                          h: float = 0.01, method: str = "rk4") -> SimulationTrace:
    """Closed-loop indirect-gradient run; loop order as in the direct case
    with the estimator advanced on the same pre-update estimates."""
    _check_run_args(plant, ref, signal, gains, horizon)
    if projection is not None and projection.n_inputs != plant.n_inputs:
        raise ModelError("projection dimension disagrees with the input count")
    if plant.time_domain == DISCRETE:
        return _run_indirect_discrete(plant, ref, signal, gains, projection,
                                      init, horizon)
    return _run_indirect_ct(plant, ref, signal, gains, projection, init,
                            horizon, h, method)


def _run_indirect_discrete(plant, ref, signal, gains, projection, init, horizon):
    n, M = plant.n, plant.n_inputs
    C = n + M
    A, B, Am, Bm = plant.A, plant.B, ref.A_m, ref.B_m
    x0, xm0, theta0, _, xhat0 = init.resolved(n, C, M)
    include_xi_in_m = M > 1

    P = theta0.T.copy()
    if M > 1:
        P[:, n:] *= np.eye(M)
    proj_on = projection is not None and projection.enabled
    if proj_on:
        check_projection_start(P.T, projection)
        signs = projection.signs
        t2a = projection.theta2_lower
    Gbd = np.zeros((M * C, M * C))
    for j in range(M):
        Gbd[j * C:(j + 1) * C, j * C:(j + 1) * C] = gains.Gamma[j]
    eyeM = np.eye(M)
    diag_flat = np.array([j * C + n + j for j in range(M)])
    floor = (projection.theta2_lower if projection is not None
             else np.full(M, 1e-12))

    S = np.zeros((n, M * C))
    q = np.zeros((n, M))
    x = x0.copy()
    xm = xm0.copy()
    xh = xhat0.copy()
    r_all = signal.sample(np.arange(horizon + 1, dtype=float))

    T1 = horizon + 1
    rec_x = np.empty((T1, n)); rec_xm = np.empty((T1, n)); rec_e = np.empty((T1, n))
    rec_u = np.empty((T1, M)); rec_eps = np.empty((T1, n)); rec_m = np.empty(T1)
    rec_th = np.empty((T1, C, M)); rec_xh = np.empty((T1, n))
    rec_g2 = np.zeros((T1, M)); rec_f2 = np.zeros((T1, M))
    rec_fired = np.zeros(T1, dtype=bool)

    kernels = (_fastpath.get_kernels()
               if horizon >= _fastpath.MIN_HORIZON else None)
    if kernels is not None:
        info = np.zeros(2, dtype=np.int64)
        signs_arr = (projection.signs if projection is not None
                     else np.ones(M))
        t2a_arr = (projection.theta2_lower if projection is not None
                   else np.zeros(M))
        kernels[1](A, B, Am, Bm, P, Gbd, x, xm, xh, r_all, bool(proj_on),
                   signs_arr, t2a_arr, floor, bool(include_xi_in_m), n, M, C,
                   rec_x, rec_xm, rec_e, rec_u, rec_eps, rec_m, rec_th,
                   rec_xh, rec_g2, rec_f2, rec_fired, info)
        if info[0] == _fastpath.SINGULAR:
            raise SingularGainError(
                f"theta2 diagonal below the invertibility threshold at step {info[1]}"
            )
        diverged_at = int(info[1]) if info[0] == _fastpath.DIVERGED else None
        return _finish_indirect_trace(plant, ref, gains, horizon, 1.0,
                                      DISCRETE, diverged_at, rec_x, rec_xm,
                                      rec_e, rec_u, rec_eps, rec_m, rec_th,
                                      rec_xh, rec_g2, rec_f2, rec_fired)

    om = np.empty(C)
    isfinite = math.isfinite
    diverged_at = None

    for t in range(T1):
        e = x - xm
        ex = xh - x
        r_t = r_all[t]
        Xi = np.einsum("kjc,jc->kj", S.reshape(n, M, C), P)
        Xi -= q
        eps = ex + np.sum(Xi, axis=1)
        m2 = 1.0 + float(np.dot(S.ravel(), S.ravel()))
        if include_xi_in_m:
            m2 += float(np.dot(Xi.ravel(), Xi.ravel()))
        # controller recovery from the projected estimate
        theta2 = P.ravel()[diag_flat]
        if np.any(np.abs(theta2) < floor - 1e-15):
            raise SingularGainError(
                f"theta2 diagonal {theta2} below the invertibility threshold "
                f"at step {t}"
            )
        u = (P[:, :n] @ x + r_t) / theta2
        if not isfinite(m2 + float(np.dot(x, x)) + float(np.dot(u, u))):
            diverged_at = t
            break
        rec_x[t] = x; rec_xm[t] = xm; rec_e[t] = e; rec_u[t] = u
        rec_eps[t] = eps; rec_m[t] = math.sqrt(m2)
        rec_th[t] = P.T; rec_xh[t] = xh
        if t == horizon:
            break
        om[:n] = -x
        om[n:] = u
        v = P @ om
        afull = S.T @ eps
        g = -(Gbd @ afull).reshape(M, C) / m2
        if M > 1:
            g[:, n:] *= eyeM
        if proj_on:
            g2 = g.ravel()[diag_flat]
            cand = theta2 + g2
            need = signs * cand < t2a
            f2 = np.where(need, signs * t2a - cand, 0.0)
            rec_g2[t] = g2; rec_f2[t] = f2
            rec_fired[t] = bool(np.any(f2 != 0.0))
            P = P + g
            P.ravel()[diag_flat] += f2
        else:
            P = P + g
        S = Am @ S + (Bm[:, :, None] * om[None, None, :]).reshape(n, M * C)
        q = Am @ q + Bm * v[None, :]
        xh = Am @ xh + Bm @ v
        x = A @ x + B @ u
        xm = Am @ xm + Bm @ r_t

    return _finish_indirect_trace(plant, ref, gains, horizon, 1.0, DISCRETE,
                                  diverged_at, rec_x, rec_xm, rec_e, rec_u,
                                  rec_eps, rec_m, rec_th, rec_xh, rec_g2,
                                  rec_f2, rec_fired)


def _run_indirect_ct(plant, ref, signal, gains, projection, init, horizon,
                     h, method):
    n, M = plant.n, plant.n_inputs
    C = n + M
    A, B, Am, Bm = plant.A, plant.B, ref.A_m, ref.B_m
    x0, xm0, theta0, _, xhat0 = init.resolved(n, C, M)
    include_xi_in_m = M > 1
    P0 = theta0.T.copy()
    if M > 1:
        P0[:, n:] *= np.eye(M)
    proj_on = projection is not None and projection.enabled
    if proj_on:
        check_projection_start(P0.T, projection)
    Gbd = np.zeros((M * C, M * C))
    for j in range(M):
        Gbd[j * C:(j + 1) * C, j * C:(j + 1) * C] = gains.Gamma[j]
    eyeM = np.eye(M)
    diag_flat = np.array([j * C + n + j for j in range(M)])
    # integration stages may sit a hair inside the projected region, so the
    # stage guard only protects the division, not the boundary itself
    floor = (0.5 * projection.theta2_lower if proj_on
             else (projection.theta2_lower if projection is not None
                   else np.full(M, 1e-12)))

    sl_x = slice(0, n)
    sl_xm = slice(n, 2 * n)
    sl_xh = slice(2 * n, 3 * n)
    sl_S = slice(3 * n, 3 * n + n * M * C)
    sl_q = slice(sl_S.stop, sl_S.stop + n * M)
    sl_P = slice(sl_q.stop, sl_q.stop + M * C)

    def readout(tau, z):
        x = z[sl_x]; xm = z[sl_xm]; xh = z[sl_xh]
        S = z[sl_S].reshape(n, M * C); q = z[sl_q].reshape(n, M)
        P = z[sl_P].reshape(M, C)
        r = signal.at(tau)
        Xi = np.einsum("kjc,jc->kj", S.reshape(n, M, C), P) - q
        eps = (xh - x) + np.sum(Xi, axis=1)
        m2 = 1.0 + float(np.dot(S.ravel(), S.ravel()))
        if include_xi_in_m:
            m2 += float(np.dot(Xi.ravel(), Xi.ravel()))
        theta2 = P.ravel()[diag_flat]
        if np.any(np.abs(theta2) < floor - 1e-15):
            raise SingularGainError(
                f"theta2 diagonal {theta2} below the invertibility threshold"
            )
        u = (P[:, :n] @ x + r) / theta2
        return x, xm, xh, S, q, P, r, Xi, eps, m2, theta2, u

    def rhs(tau, z):
        x, xm, xh, S, q, P, r, Xi, eps, m2, theta2, u = readout(tau, z)
        om = np.concatenate([-x, u])
        v = P @ om
        g = -(Gbd @ (S.T @ eps)).reshape(M, C) / m2
        if M > 1:
            g[:, n:] *= eyeM
        if proj_on:
            g2 = g.ravel()[diag_flat]
            f2 = _ct_projection_rate(theta2, g2, projection)
            gflat = g.ravel()
            gflat[diag_flat] += f2
            g = gflat.reshape(M, C)
        dS = Am @ S + (Bm[:, :, None] * om[None, None, :]).reshape(n, M * C)
        dq = Am @ q + Bm * v[None, :]
        dxh = Am @ xh + Bm @ v
        dx = A @ x + B @ u
        dxm = Am @ xm + Bm @ r
        return np.concatenate([dx, dxm, dxh, dS.ravel(), dq.ravel(), g.ravel()])

    z = np.concatenate([x0, xm0, xhat0, np.zeros(n * M * C), np.zeros(n * M),
                        P0.ravel()])
    T1 = horizon + 1
    rec_x = np.empty((T1, n)); rec_xm = np.empty((T1, n)); rec_e = np.empty((T1, n))
    rec_u = np.empty((T1, M)); rec_eps = np.empty((T1, n)); rec_m = np.empty(T1)
    rec_th = np.empty((T1, C, M)); rec_xh = np.empty((T1, n))
    rec_g2 = np.zeros((T1, M)); rec_f2 = np.zeros((T1, M))
    rec_fired = np.zeros(T1, dtype=bool)
    diverged_at = None
    for k in range(T1):
        tau = k * h
        x, xm, xh, S, q, P, r, Xi, eps, m2, theta2, u = readout(tau, z)
        if not math.isfinite(m2 + float(np.dot(x, x)) + float(np.dot(u, u))):
            diverged_at = k
            break
        rec_x[k] = x; rec_xm[k] = xm; rec_e[k] = x - xm; rec_u[k] = u
        rec_eps[k] = eps; rec_m[k] = math.sqrt(m2)
        rec_th[k] = P.T; rec_xh[k] = xh
        if proj_on:
            g2 = (-(Gbd @ (S.T @ eps)).reshape(M, C) / m2).ravel()[diag_flat]
            f2 = _ct_projection_rate(theta2, g2, projection)
            rec_g2[k] = g2; rec_f2[k] = f2
            rec_fired[k] = bool(np.any(f2 != 0.0))
        if k == horizon:
            break
        try:
            z = integrate_ct(rhs, z, h, t=tau, method=method)
        except NumericsError:
            diverged_at = k + 1
            break
        if proj_on:
            P = z[sl_P].reshape(M, C)
            flat = P.ravel()
            for j in range(M):
                t2 = flat[diag_flat[j]]
                if projection.signs[j] * t2 < projection.theta2_lower[j]:
                    flat[diag_flat[j]] = projection.signs[j] * projection.theta2_lower[j]

    return _finish_indirect_trace(plant, ref, gains, horizon, h, CONTINUOUS,
                                  diverged_at, rec_x, rec_xm, rec_e, rec_u,
                                  rec_eps, rec_m, rec_th, rec_xh, rec_g2,
                                  rec_f2, rec_fired)


def _maybe_indirect_V(plant, ref, gains, rec_theta, rec_eps, rec_m):
    try:
        match = solve_matching(plant, ref)
    except ModelError:
        return None, None
    if not match.matchable():
        return None, None
    K2d = np.diag(match.K2)
    if np.max(np.abs(match.K2 - np.diag(K2d))) > 1e-9 or np.any(np.abs(K2d) < 1e-12):
        return None, None
    theta_star = theta_star_indirect(match.K1, match.K2)
    series = indirect_V_series(rec_theta, theta_star, gains.Gamma, rec_eps, rec_m)
    return series.V, series.dV


def _finish_indirect_trace(plant, ref, gains, horizon, dt, domain, diverged_at,
                           rec_x, rec_xm, rec_e, rec_u, rec_eps, rec_m,
                           rec_th, rec_xh, rec_g2, rec_f2, rec_fired):
    steps = (horizon + 1) if diverged_at is None else diverged_at
    sl = slice(0, steps)
    V = dV = None
    if steps > 0:
        V, dV = _maybe_indirect_V(plant, ref, gains, rec_th[sl], rec_eps[sl],
                                  rec_m[sl])
    trace = SimulationTrace(
        scheme="indirect_gradient", time_domain=domain, horizon=horizon, dt=dt,
        t=np.arange(steps, dtype=float) * dt,
        x=rec_x[sl].copy(), x_m=rec_xm[sl].copy(), e=rec_e[sl].copy(),
        u=rec_u[sl].copy(), eps=rec_eps[sl].copy(), m=rec_m[sl].copy(),
        theta=rec_th[sl].copy(), x_hat=rec_xh[sl].copy(),
        V=V, dV=dV,
        proj_fired=rec_fired[sl].copy(), proj_g2=rec_g2[sl].copy(),
        proj_f2=rec_f2[sl].copy(),
        diverged=diverged_at is not None, diverged_at=diverged_at,
    )
    trace.summary = trace.summarize()
    return trace
