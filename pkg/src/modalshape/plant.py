"""Quasi-static FEM plant standing in for the real deformable object.

Fixed nodes stay at rest, manipulation nodes follow their commanded
targets, and the free nodes settle into elastic equilibrium every step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, InvalidInputError, NumericError
from .mesh import (MaterialParams, SolidMesh, _element_dofs, assemble_stiffness,
                   element_stiffness)


@dataclass(frozen=True)
class PlantObservation:
    sample_positions: np.ndarray   # (l, 3)
    manip_positions: np.ndarray    # (k, 3)
    full_state: np.ndarray         # (N, 3), metrics only


@dataclass(frozen=True)
class DesiredState:
    full_state: np.ndarray         # (N, 3)
    manip_positions: np.ndarray    # (k, 3)


def _node_dofs(ids):
    ids = np.asarray(ids, dtype=np.int64)
    return (3 * ids[:, None] + np.arange(3)).ravel()


def _polar_rotation(F):
    U, _, Vt = np.linalg.svd(F)
    d = np.sign(np.linalg.det(U @ Vt))
    U[:, :, 2] *= d[:, None]
    return U @ Vt


class Plant:
    """Quasi-static linear (or co-rotational) elastic object.

    Parameters
    ----------
    mesh : SolidMesh
        Object mesh in the world frame.
    material : MaterialParams
        True object material.
    fixed, manip : sequence of int
        Zero-displacement node ids and grasped node ids.
    corotational : bool
        Use stiffness warping for large rotations. Each step then runs a
        fixed-point iteration and refactors the reduced system.
    """

    def __init__(self, mesh: SolidMesh, material: MaterialParams, fixed, manip,
                 corotational=False, corot_tol=1e-10, corot_maxiter=50):
        self.mesh = mesh
        self.material = material
        self.fixed = np.array(sorted(set(int(i) for i in fixed)), dtype=np.int64)
        self.manip = np.array([int(i) for i in manip], dtype=np.int64)
        self.corotational = bool(corotational)
        self.corot_tol = corot_tol
        self.corot_maxiter = corot_maxiter
        self._validate_ids()

        X = mesh.nodes
        self.rest = X.copy()
        self._Ke, _ = element_stiffness(X, mesh.tets, material.E, material.v)
        self._edofs = _element_dofs(mesh.tets)
        self._Dm_inv = np.linalg.inv(np.einsum("tij->tji", X[mesh.tets[:, 1:]] - X[mesh.tets[:, :1]]))
        self.K_o = assemble_stiffness(X, mesh.tets, material.E, material.v, self._Ke)

        n = mesh.n_dofs
        self._cdofs = np.concatenate([_node_dofs(self.fixed), _node_dofs(self.manip)])
        mask = np.ones(n, bool)
        mask[self._cdofs] = False
        self._fdofs = np.flatnonzero(mask)
        self._K_ff, self._K_fc = self._split(self.K_o)
        try:
            self._lu = spla.splu(self._K_ff.tocsc())
        except RuntimeError as exc:
            raise ConfigurationError(f"constrained plant system is singular: {exc}") from exc
        probe = self._lu.solve(np.ones(len(self._fdofs)))
        if not np.all(np.isfinite(probe)):
            raise ConfigurationError("constrained plant system is singular")

        self.targets = X[self.manip].copy()
        self.state = X.copy()

    def _validate_ids(self):
        N = self.mesh.n_nodes
        ids = np.concatenate([self.fixed, self.manip])
        if ids.size and (ids.min() < 0 or ids.max() >= N):
            raise ConfigurationError("constraint node id outside the plant mesh")
        if len(set(self.manip.tolist())) != len(self.manip):
            raise ConfigurationError("duplicate manipulation node ids")
        if np.intersect1d(self.fixed, self.manip).size:
            raise ConfigurationError("a node cannot be both fixed and manipulated")
        if len(self.manip) == 0:
            raise ConfigurationError("at least one manipulation node is required")
        P = self.mesh.nodes[self.fixed]
        if len(P) < 3 or np.linalg.matrix_rank(P[1:] - P[0], tol=1e-9 * np.ptp(self.mesh.nodes)) < 2:
            raise ConfigurationError("need at least 3 non-collinear fixed nodes")

    def _split(self, K):
        K = K.tocsr()
        K_f = K[self._fdofs]
        return K_f[:, self._fdofs], K_f[:, self._cdofs]

    @property
    def k(self):
        return len(self.manip)

    def reset(self):
        self.targets = self.rest[self.manip].copy()
        self.state = self.rest.copy()

    def _dirichlet(self, targets):
        uc = np.zeros(len(self._cdofs))
        uc[3 * len(self.fixed):] = (targets - self.rest[self.manip]).ravel()
        return uc

    def _solve_linear(self, targets):
        uc = self._dirichlet(targets)
        u = np.zeros(self.mesh.n_dofs)
        u[self._cdofs] = uc
        u[self._fdofs] = -self._lu.solve(self._K_fc @ uc)
        return self.rest + u.reshape(-1, 3)

    def _solve_corotational(self, targets, x0):
        """Stiffness-warping fixed point: rotate element stiffness by the
        polar rotation of the current deformation gradient, solve, repeat."""
        tets = self.mesh.tets
        rest = self.rest.ravel()
        x = x0.copy()
        uc = self._dirichlet(targets)
        xc = rest[self._cdofs] + uc
        for it in range(self.corot_maxiter):
            Ds = np.einsum("tij->tji", x[tets[:, 1:]] - x[tets[:, :1]])
            R = _polar_rotation(Ds @ self._Dm_inv)
            Rb = np.zeros((len(tets), 12, 12))
            for a in range(4):
                Rb[:, 3 * a:3 * a + 3, 3 * a:3 * a + 3] = R
            KeR = Rb @ self._Ke @ np.transpose(Rb, (0, 2, 1))
            f0 = np.einsum("tij,tjk,tk->ti", Rb, self._Ke, rest[self._edofs])
            K = assemble_stiffness(self.rest, tets, self.material.E, self.material.v, KeR)
            f = np.zeros(self.mesh.n_dofs)
            np.add.at(f, self._edofs.ravel(), f0.ravel())
            K_ff, K_fc = self._split(K)
            xf = spla.splu(K_ff.tocsc()).solve(f[self._fdofs] - K_fc @ xc)
            new = np.empty(self.mesh.n_dofs)
            new[self._cdofs] = xc
            new[self._fdofs] = xf
            new = new.reshape(-1, 3)
            delta = np.abs(new - x).max()
            x = new
            if delta <= self.corot_tol * max(np.ptp(self.rest), 1.0):
                return x
        raise NumericError("co-rotational iteration did not converge",
                           {"iterations": self.corot_maxiter, "last_change": float(delta)})

    def equilibrium(self, targets):
        """Equilibrium positions for manipulation targets; does not change the plant."""
        targets = np.asarray(targets, float).reshape(self.k, 3)
        if not np.all(np.isfinite(targets)):
            raise NumericError("non-finite manipulation targets")
        if self.corotational:
            return self._solve_corotational(targets, self.state)
        return self._solve_linear(targets)

    def set_targets(self, targets):
        targets = np.asarray(targets, float).reshape(self.k, 3)
        if np.array_equal(targets, self.targets):
            return
        self.state = self.equilibrium(targets)
        self.targets = targets.copy()

    def observe(self, sample_ids=()):
        ids = np.asarray(sample_ids, dtype=np.int64)
        return PlantObservation(self.state[ids].copy(), self.state[self.manip].copy(), self.state.copy())

    def elastic_energy(self, state=None):
        u = ((self.state if state is None else state) - self.rest).ravel()
        return 0.5 * float(u @ (self.K_o @ u))


def plant_step(plant: Plant, v, dt, sample_ids=()) -> PlantObservation:
    """Advance manipulation targets by ``v * dt`` and settle the object."""
    v = np.asarray(v, float).ravel()
    if v.size != 3 * plant.k:
        raise InvalidInputError(f"command has {v.size} entries, expected {3 * plant.k}")
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite velocity command")
    plant.set_targets(plant.targets + v.reshape(-1, 3) * dt)
    return plant.observe(sample_ids)


def plant_metrics(plant: Plant, desired_full_state, desired_manip):
    """Total mesh error sum ``e_x`` and manipulation error ``e_d``."""
    xd = np.asarray(desired_full_state, float)
    rd = np.asarray(desired_manip, float)
    if xd.shape != plant.state.shape or rd.reshape(-1).size != 3 * plant.k:
        raise InvalidInputError("desired state does not match the plant")
    d = (plant.state - xd).ravel()
    e_x = float(d @ d)
    e_d = (plant.state[plant.manip] - rd.reshape(-1, 3)).ravel()
    return e_x, e_d


def generate_desired(plant: Plant, manip_displacement, steps=1) -> DesiredState:
    """Ramp the manipulation nodes to ``rest + displacement`` and record the result.

    The plant is put back at rest afterwards.
    """
    disp = np.asarray(manip_displacement, float).reshape(-1, 3)
    if disp.shape[0] != plant.k:
        if disp.shape[0] == 1:
            disp = np.repeat(disp, plant.k, axis=0)
        else:
            raise InvalidInputError("one displacement per manipulation node is required")
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    plant.reset()
    start = plant.targets.copy()
    for i in range(1, steps + 1):
        plant.set_targets(start + disp * (i / steps))
    out = DesiredState(plant.state.copy(), plant.state[plant.manip].copy())
    plant.reset()
    return out
