"""Truncated modal basis of a base mesh.

Modes are M-orthonormal solutions of ``K phi = w^2 M phi`` in ascending
order. Rigid-body modes (when the mesh is unconstrained) are built
analytically; elastic modes come from a shift-invert Lanczos solve, or a
dense solve for small systems. Degenerate eigenspaces are rotated into a
canonical basis so that results do not depend on the solver's arbitrary
choice inside a repeated eigenvalue, and truncating to fewer modes gives
exactly the leading columns of a larger solve.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidRequestError, NumericError
from .mesh import AssembledSystem, rigid_body_modes

log = logging.getLogger(__name__)

DENSE_LIMIT = 600
N_RIGID = 6
CLUSTER_RTOL = 1e-8
TIE_RTOL = 1e-6


@dataclass(frozen=True)
class ModalBasis:
    Phi: np.ndarray          # (3N, m)
    freqs: np.ndarray        # squared natural frequencies, ascending
    n_rigid: int = N_RIGID

    def __post_init__(self):
        for name in ("Phi", "freqs"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def m(self):
        return self.Phi.shape[1]

    @property
    def n_dofs(self):
        return self.Phi.shape[0]

    @property
    def K_tilde(self):
        return np.diag(self.freqs)

    @property
    def rectifier_diag(self):
        """Diagonal of (K~ + I6)^-1: the first six stiffnesses are shifted by one."""
        shift = np.zeros(self.m)
        shift[:min(N_RIGID, self.m)] = 1.0
        return 1.0 / (self.freqs + shift)

    @property
    def rectifier(self):
        return np.diag(self.rectifier_diag)

    def truncate(self, m):
        if not 1 <= m <= self.m:
            raise InvalidRequestError(f"cannot truncate {self.m} modes to {m}")
        return ModalBasis(self.Phi[:, :m], self.freqs[:m], self.n_rigid)

    def rows(self, node_ids):
        """Rows of Phi belonging to ``node_ids`` (3 per node, node order kept)."""
        node_ids = np.asarray(node_ids, dtype=np.int64)
        dofs = (3 * node_ids[:, None] + np.arange(3)).ravel()
        return self.Phi[dofs]


def _m_orthonormalize(V, mdiag):
    """Modified Gram-Schmidt in the M inner product (column order kept)."""
    V = np.array(V, float)
    for j in range(V.shape[1]):
        for i in range(j):
            V[:, j] -= (V[:, i] * mdiag) @ V[:, j] * V[:, i]
        V[:, j] /= np.sqrt((V[:, j] * mdiag) @ V[:, j])
    return V


def _first_within(values, rtol):
    """Lowest index whose value is within ``rtol`` of the maximum."""
    vmax = values.max()
    return int(np.flatnonzero(values >= vmax * (1.0 - rtol))[0])


def _canonical_subspace_basis(W, mdiag):
    """Basis-independent M-orthonormal basis of span(W).

    Greedy pivoting: the next vector is the unit-M-norm member of the
    remaining subspace with the largest component on the dof that carries
    the most energy. Row norms of an M-orthonormal basis do not depend on
    which basis was handed in, so neither does the result.
    """
    out = []
    W = np.array(W, float)
    while W.shape[1] > 0:
        rn = np.linalg.norm(W, axis=1)
        p = _first_within(rn, TIE_RTOL)
        w = W[p]
        x = W @ w / np.linalg.norm(w)
        out.append(x)
        if W.shape[1] == 1:
            break
        # orthonormal complement of w in coefficient space
        Q, _ = np.linalg.qr(np.column_stack([w, np.eye(len(w))]))
        W = W @ Q[:, 1:len(w)]
    V = np.column_stack(out)
    return _m_orthonormalize(V, mdiag)


def _fix_signs(V):
    V = np.array(V, float)
    for j in range(V.shape[1]):
        a = np.abs(V[:, j])
        i = _first_within(a, 1e-8)
        if V[i, j] < 0:
            V[:, j] = -V[:, j]
    return V


def _clusters(lam):
    """Start/stop index pairs of runs of (relatively) equal eigenvalues."""
    groups = []
    start = 0
    for i in range(1, len(lam) + 1):
        if i == len(lam) or abs(lam[i] - lam[i - 1]) > CLUSTER_RTOL * max(abs(lam[i]), abs(lam[i - 1])):
            groups.append((start, i))
            start = i
    return groups


def _eig_lowest(K, M, k, dense):
    n = K.shape[0]
    if dense or k >= n - 1:
        Kd = K.toarray() if sp.issparse(K) else np.asarray(K)
        Md = M.toarray() if sp.issparse(M) else np.asarray(M)
        lam, V = sla.eigh(Kd, Md, subset_by_index=[0, k - 1])
        return lam, V
    mdiag = M.diagonal()
    scale = float(np.median(K.diagonal() / mdiag))
    sigma = -1e-4 * scale
    v0 = np.random.default_rng(0).uniform(0.5, 1.5, size=n)
    try:
        lam, V = spla.eigsh(K.tocsc(), k=k, M=M.tocsc(), sigma=sigma, which="LM",
                            v0=v0, tol=0.0, maxiter=50 * n)
    except spla.ArpackNoConvergence as exc:
        raise NumericError("shift-invert Lanczos did not converge",
                           {"requested": k, "converged": len(exc.eigenvalues),
                            "sigma": sigma, "n": n}) from exc
    order = np.argsort(lam)
    return lam[order], V[:, order]


def solve_modes(sys: AssembledSystem, m: int, dense_limit: int = DENSE_LIMIT) -> ModalBasis:
    """The ``m`` lowest-frequency M-orthonormal modes of ``sys``."""
    K, M = sys.K, sys.M
    n = K.shape[0]
    if not isinstance(m, (int, np.integer)) or m < 1:
        raise InvalidRequestError(f"mode count must be a positive integer, got {m}")
    if m > n:
        raise InvalidRequestError(f"requested {m} modes from a {n}-dof system")
    mdiag = M.diagonal()
    if np.any(mdiag <= 0):
        raise InvalidRequestError("mass matrix must be a positive diagonal")
    dense = n <= dense_limit
    Knorm = spla.norm(K, 1) if sp.issparse(K) else np.linalg.norm(K, 1)

    # analytic rigid block
    mass_center = (sys.nodes * mdiag[0::3, None]).sum(axis=0) / mdiag[0::3].sum()
    R = rigid_body_modes(sys.nodes, mass_center)
    # collinear node sets do not carry six independent rigid motions
    n_rigid = 0
    if np.linalg.matrix_rank(R * np.sqrt(mdiag)[:, None], tol=1e-10 * np.abs(R).max()) == N_RIGID:
        R = _m_orthonormalize(R, mdiag)
        KR = K @ R
        if np.all(np.linalg.norm(KR, axis=0) <= 1e-8 * Knorm * np.linalg.norm(R, axis=0)):
            n_rigid = N_RIGID

    need = m - n_rigid
    pad = 6
    if need <= 0:
        lam, V, groups = np.zeros(0), np.zeros((n, 0)), []
    while need > 0:
        k = min(m + pad, n)
        lam, V = _eig_lowest(K, M, k, dense)
        if n_rigid:
            if np.any(np.abs(lam[:n_rigid]) > 1e-6 * abs(lam[min(n_rigid, len(lam) - 1)])):
                raise NumericError("rigid-body eigenvalues are not near zero",
                                   {"lowest": lam[:n_rigid + 1].tolist()})
            lam, V = lam[n_rigid:], V[:, n_rigid:]
            V = V - R @ (R.T @ (mdiag[:, None] * V))
        groups = _clusters(lam)
        # the trailing cluster may continue past the computed set
        if k == n or groups[-1][0] >= need:
            break
        pad *= 2

    blocks = []
    for a, b in groups:
        blocks.append(_canonical_subspace_basis(V[:, a:b], mdiag) if b - a > 1 else V[:, a:b])
    elastic = np.column_stack(blocks) if blocks else np.zeros((n, 0))
    elastic = _fix_signs(elastic)
    rigid = _fix_signs(R) if n_rigid else np.zeros((n, 0))
    Phi = np.column_stack([rigid, elastic])[:, :m]

    Kt = Phi.T @ (K @ Phi)
    diag = np.diag(Kt).copy()
    off = Kt - np.diag(diag)
    leak = np.abs(off).max() if m > 1 else 0.0
    # round-off floor for bases made only of (near) null vectors
    floor = 1e-10 * Knorm * float((Phi ** 2).sum(axis=0).max())
    if leak > max(1e-6 * np.abs(diag).max(), floor):
        raise NumericError("modal stiffness is not diagonal", {"max_off_diagonal": leak,
                                                                "max_diagonal": np.abs(diag).max()})
    freqs = np.maximum(diag, 0.0)
    if n_rigid:
        # analytic null vectors: what remains is round-off
        freqs[:min(n_rigid, m)] = 0.0
    if np.any(np.diff(freqs) < -CLUSTER_RTOL * np.abs(freqs[1:])):
        raise NumericError("modes are not in ascending order", {"freqs": freqs})
    log.debug("solved %d modes (%s, %d rigid)", m, "dense" if dense else "sparse", n_rigid)
    return ModalBasis(Phi, freqs, N_RIGID)


def rectified_projection(basis: ModalBasis, rows) -> np.ndarray:
    """``(K~ + I6)^-1 [Phi]_rows^T``, shape (m, 3 * len(rows))."""
    rows = np.asarray(rows, dtype=np.int64).ravel()
    if rows.size == 0:
        raise InvalidRequestError("row set is empty")
    if rows.min() < 0 or 3 * rows.max() + 2 >= basis.n_dofs:
        raise InvalidRequestError("row index outside the mesh")
    return basis.rectifier_diag[:, None] * basis.rows(rows).T


# --------------------------------------------------------------------------
# cache dump
#
# File layout: ASCII line "MODALBASIS 1", ASCII line "<n_dofs> <m> <n_rigid>",
# then little-endian float64 values: Phi row-major (n_dofs * m) followed by
# the m squared frequencies.

_MAGIC = b"MODALBASIS 1\n"


def save_basis(basis: ModalBasis, path):
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(f"{basis.n_dofs} {basis.m} {basis.n_rigid}\n".encode())
        fh.write(np.ascontiguousarray(basis.Phi, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.freqs, dtype="<f8").tobytes())


def load_basis(path) -> ModalBasis:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise InvalidRequestError(f"{path} is not a modal basis dump")
    rest = data[len(_MAGIC):]
    nl = rest.index(b"\n")
    n, m, n_rigid = (int(t) for t in rest[:nl].split())
    body = np.frombuffer(rest[nl + 1:], dtype="<f8")
    if body.size != n * m + m:
        raise InvalidRequestError(f"{path}: truncated dump")
    return ModalBasis(body[:n * m].reshape(n, m), body[n * m:], n_rigid)
