"""Adaptive transpose-Jacobian deformation controller.

The feature Jacobian is ``J = diag(theta) @ G`` where ``G`` is the
constant rectified modal projection of the manipulation points onto the
base mesh and ``theta`` are the unknown per-mode parameters, estimated
online with a gradient (Slotine-Li style) law.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRequestError, NumericError
from .mapping import build_allocation, project_points
from .mesh import SolidMesh
from .modal import ModalBasis


@dataclass(frozen=True)
class ManipProjection:
    G: np.ndarray            # (m, 3k)
    rest_eta_r: np.ndarray   # (3k,)

    @property
    def k(self):
        return self.G.shape[1] // 3

    @property
    def m(self):
        return self.G.shape[0]

    def modal_displacement(self, x_r):
        """Modal displacements of the base mesh for manipulation positions ``x_r``."""
        return self.G @ (np.asarray(x_r, float).ravel() - self.rest_eta_r)


def build_manip_projection(basis: ModalBasis, mesh: SolidMesh, manip_rest_points) -> ManipProjection:
    P = np.asarray(manip_rest_points, float).reshape(-1, 3)
    if 3 * len(P) > basis.m:
        raise InvalidRequestError(
            f"{len(P)} manipulation points need 3k={3 * len(P)} <= m={basis.m}")
    alloc = build_allocation(mesh, project_points(mesh, P), basis)
    G = basis.rectifier_diag[:, None] * (alloc.N_sparse @ alloc.Phi_rows).T
    G = np.asarray(G)
    G.setflags(write=False)
    return ManipProjection(G, alloc.rest_eta)


@dataclass
class ControllerState:
    theta_hat: np.ndarray
    K_s: np.ndarray
    Gamma: float
    dt: float
    speed_clamp: float = None          # per-axis |v| bound, off by default
    theta_bounds: tuple = None         # (lo, hi) clamp on theta_hat, off by default

    def __post_init__(self):
        self.theta_hat = np.array(self.theta_hat, float).ravel()
        K = np.atleast_2d(np.asarray(self.K_s, float))
        if K.shape[0] != K.shape[1] or not np.allclose(K, K.T):
            raise InvalidRequestError("K_s must be a symmetric square matrix")
        try:
            np.linalg.cholesky(K)
        except np.linalg.LinAlgError as exc:
            raise InvalidRequestError("K_s must be positive definite") from exc
        self.K_s = K
        if not self.Gamma > 0:
            raise InvalidRequestError("Gamma must be positive")
        if not self.dt > 0:
            raise InvalidRequestError("dt must be positive")
        if not np.all(np.isfinite(self.theta_hat)):
            raise NumericError("theta_hat is not finite")

    @classmethod
    def initial(cls, m, k, K_s=80.0, Gamma=500.0, dt=1 / 50, **kw):
        """Parameters start at one (no prior knowledge); scalar ``K_s`` means ``K_s * I``."""
        K = np.asarray(K_s, float)
        if K.ndim == 0:
            K = float(K_s) * np.eye(3 * k)
        return cls(np.ones(m), K, Gamma, dt, **kw)


def jacobian(mp: ManipProjection, state: ControllerState) -> np.ndarray:
    """``diag(theta_hat) @ G``."""
    if state.theta_hat.size != mp.m:
        raise InvalidRequestError("theta_hat size does not match the feature dimension")
    return state.theta_hat[:, None] * mp.G


def control_command(J, e_s, state: ControllerState) -> np.ndarray:
    """Manipulation velocity ``-K_s J^T e_s``."""
    J = np.asarray(J, float)
    e_s = np.asarray(e_s, float)
    if not (np.all(np.isfinite(J)) and np.all(np.isfinite(e_s))):
        raise NumericError("non-finite controller input")
    v = -state.K_s @ (J.T @ e_s)
    if state.speed_clamp is not None:
        v = np.clip(v, -state.speed_clamp, state.speed_clamp)
    return v


def regression_matrix(mp: ManipProjection, J, e_s, state: ControllerState) -> np.ndarray:
    """``Y`` with ``Y @ (theta_hat - theta) = (J(theta_hat) - J(theta)) K_s J(theta_hat)^T e_s``.

    ``Q(theta)`` is diagonal, so ``Y = diag(G K_s J^T e_s)``.
    """
    w = mp.G @ (state.K_s @ (np.asarray(J).T @ np.asarray(e_s, float)))
    return np.diag(w)


def update_parameters(state: ControllerState, Y, e_s) -> np.ndarray:
    """One explicit-Euler step of ``theta_dot = -Gamma^-1 Y^T e_s``."""
    with np.errstate(over="ignore", invalid="ignore"):
        step = (state.dt / state.Gamma) * (np.asarray(Y).T @ np.asarray(e_s, float))
        theta = state.theta_hat - step
    if not np.all(np.isfinite(theta)):
        raise NumericError("parameter update diverged",
                           {"theta_hat": state.theta_hat.copy(), "step": step})
    if state.theta_bounds is not None:
        theta = np.clip(theta, *state.theta_bounds)
    return theta


def lyapunov_decrement(J, e_s, state: ControllerState) -> float:
    """``-e_s^T J K_s J^T e_s``; never positive for positive definite ``K_s``."""
    g = np.asarray(J).T @ np.asarray(e_s, float)
    return -float(g @ state.K_s @ g)


@dataclass
class StepTelemetry:
    t: float
    e_s: np.ndarray
    e_norm: float
    theta_hat: np.ndarray
    v: np.ndarray
    decrement: float
    JTe_norm: float


@dataclass
class AdaptiveController:
    """Per-tick loop: error, parameter update, Jacobian, command."""

    mp: ManipProjection
    state: ControllerState
    s_star: np.ndarray
    t: float = 0.0
    history: list = field(default_factory=list)

    def step(self, s) -> StepTelemetry:
        e = np.asarray(s, float) - self.s_star
        J_old = jacobian(self.mp, self.state)
        Y = regression_matrix(self.mp, J_old, e, self.state)
        self.state.theta_hat = update_parameters(self.state, Y, e)
        J = jacobian(self.mp, self.state)
        v = control_command(J, e, self.state)
        tel = StepTelemetry(self.t, e, float(np.linalg.norm(e)), self.state.theta_hat.copy(), v,
                            lyapunov_decrement(J, e, self.state), float(np.linalg.norm(J.T @ e)))
        self.t += self.state.dt
        return tel
