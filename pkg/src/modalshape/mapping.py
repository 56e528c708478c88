"""Object-to-base-mesh mapping.

Points are projected radially (along the line through the mesh center)
onto the base-mesh surface; the barycentric weights of the hit triangle
act as the shape functions that allocate point displacements to nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidPointError, InvalidRequestError, RankDeficientError
from .mesh import SolidMesh
from .modal import ModalBasis

RANK_RTOL = 1e-10
_HIT_TOL = 1e-12
_ZERO_WEIGHT = 1e-14


@dataclass(frozen=True)
class SurfaceProjection:
    point_index: int
    tri: int
    nodes: tuple          # the three node ids of ``tri``
    weights: np.ndarray   # barycentric, >= 0, sums to 1
    eta: np.ndarray       # projected position on the surface


def _ray_hits(center, dirs, V0, V1, V2):
    """Möller-Trumbore for every (ray, triangle) pair.

    Returns ``hit`` mask (l, S) and barycentric ``u``, ``v`` and ray
    parameter ``t`` arrays of the same shape.
    """
    e1 = V1 - V0
    e2 = V2 - V0
    pvec = np.cross(dirs[:, None, :], e2[None, :, :])
    det = np.einsum("sk,lsk->ls", e1, pvec)
    ok = np.abs(det) > 1e-300
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = center[None, :] - V0
    u = np.einsum("sk,lsk->ls", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("lk,sk->ls", dirs, qvec) * inv
    t = np.einsum("sk,sk->s", e2, qvec)[None, :] * inv
    hit = ok & (u >= -_HIT_TOL) & (v >= -_HIT_TOL) & (u + v <= 1 + _HIT_TOL) & (t > 0)
    return hit, u, v, t


def project_points(mesh: SolidMesh, rest_points, chunk=256) -> list:
    """Radially project ``rest_points`` (base-mesh frame) onto the surface.

    Ray hits on shared edges or vertices go to the lowest triangle id.
    """
    P = np.asarray(rest_points, float).reshape(-1, 3)
    c = mesh.center
    d = P - c
    length = np.linalg.norm(d, axis=1)
    if np.any(length == 0) or not np.all(np.isfinite(length)):
        bad = int(np.flatnonzero(~(length > 0))[0]) if np.any(~(length > 0)) else -1
        raise InvalidPointError(f"point {bad} coincides with the mesh center or is not finite")
    d = d / length[:, None]
    tris = mesh.surface_tris
    X = mesh.nodes
    V0, V1, V2 = X[tris[:, 0]], X[tris[:, 1]], X[tris[:, 2]]
    out = []
    for s in range(0, len(P), chunk):
        hit, u, v, _ = _ray_hits(c, d[s:s + chunk], V0, V1, V2)
        for r in range(hit.shape[0]):
            idx = np.flatnonzero(hit[r])
            if idx.size == 0:
                raise InvalidPointError(f"ray of point {s + r} misses the surface (open mesh?)")
            k = int(idx[0])
            w = np.array([1.0 - u[r, k] - v[r, k], u[r, k], v[r, k]])
            w[w < _ZERO_WEIGHT] = 0.0
            w /= w.sum()
            nodes = tuple(int(i) for i in tris[k])
            eta = w @ X[list(nodes)]
            out.append(SurfaceProjection(s + r, k, nodes, w, eta))
    return out


@dataclass(frozen=True)
class AllocationMap:
    projections: tuple
    N_sparse: sp.csr_matrix   # (3l, 3n)
    node_ids: np.ndarray      # (n,) allocation nodes, ascending
    Phi_rows: np.ndarray = None  # (3n, m), present when built with a basis

    @property
    def rest_eta(self):
        return np.concatenate([p.eta for p in self.projections])

    @property
    def n_points(self):
        return len(self.projections)


def build_allocation(mesh: SolidMesh, projections, basis: ModalBasis = None) -> AllocationMap:
    """Assemble the local allocating matrix for a set of projections."""
    projections = tuple(projections)
    used = sorted({n for p in projections for n, w in zip(p.nodes, p.weights) if w > 0})
    node_ids = np.array(used, dtype=np.int64)
    col_of = {n: i for i, n in enumerate(used)}
    rows, cols, vals = [], [], []
    for r, p in enumerate(projections):
        for n, w in zip(p.nodes, p.weights):
            if w == 0:
                continue
            for k in range(3):
                rows.append(3 * r + k)
                cols.append(3 * col_of[n] + k)
                vals.append(w)
    shape = (3 * len(projections), 3 * len(used))
    N = sp.csr_matrix((vals, (rows, cols)), shape=shape)
    N.sort_indices()
    Phi_rows = None
    if basis is not None:
        if basis.n_dofs != mesh.n_dofs:
            raise InvalidRequestError("basis and mesh sizes differ")
        Phi_rows = basis.rows(node_ids)
    return AllocationMap(projections, N, node_ids, Phi_rows)


@dataclass(frozen=True)
class FeatureProjector:
    D_N: sp.csr_matrix        # (3n, 3l) = N_s^T
    D_Phi: np.ndarray         # (m, 3n)
    rest_eta: np.ndarray      # (3l,)
    node_ids: np.ndarray
    sample_ids: tuple = field(default=())

    @property
    def m(self):
        return self.D_Phi.shape[0]

    @property
    def n_points(self):
        return self.D_N.shape[1] // 3

    def matrix(self):
        """Dense ``D_Phi @ D_N`` (m, 3l)."""
        return np.asarray(self.D_N.T @ self.D_Phi.T).T


def numerical_rank(A, rtol=RANK_RTOL):
    """Rank of ``A`` after scaling each row to unit norm.

    Row scaling by a nonsingular diagonal leaves the rank unchanged but
    removes the spread introduced by the force-displacement rectifier,
    whose entries can differ by many orders of magnitude.
    """
    A = np.asarray(A, float)
    rn = np.linalg.norm(A, axis=1)
    rn[rn == 0] = 1.0
    sv = np.linalg.svd(A / rn[:, None], compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0, sv
    return int(np.sum(sv > rtol * sv[0])), sv


def build_feature_projector(basis: ModalBasis, alloc: AllocationMap, sample_ids=None) -> FeatureProjector:
    """Feature computation matrices for one sampling configuration."""
    m = basis.m
    l = alloc.n_points
    if 3 * l < m:
        raise InvalidRequestError(f"{l} samplings cannot support {m} features (need l >= m/3)")
    Phi_rows = alloc.Phi_rows if alloc.Phi_rows is not None else basis.rows(alloc.node_ids)
    D_Phi = basis.rectifier_diag[:, None] * Phi_rows.T
    D_N = alloc.N_sparse.T.tocsr()
    rank, _ = numerical_rank(np.asarray(D_N.T @ D_Phi.T).T)
    if rank < m:
        raise RankDeficientError(
            f"feature computation matrix has rank {rank} < m={m} "
            f"({m - rank} directions missing)", m - rank)
    ids = tuple(range(l)) if sample_ids is None else tuple(sample_ids)
    if len(ids) != l:
        raise InvalidRequestError("sample id count does not match the projections")
    return FeatureProjector(D_N, D_Phi, alloc.rest_eta, alloc.node_ids, ids)


def reassemble_on_sampling_change(basis: ModalBasis, mesh: SolidMesh, new_rest_points,
                                  sample_ids=None) -> FeatureProjector:
    """Rebuild the projector after samplings were lost or recovered."""
    projections = project_points(mesh, new_rest_points)
    return build_feature_projector(basis, build_allocation(mesh, projections, basis), sample_ids)
