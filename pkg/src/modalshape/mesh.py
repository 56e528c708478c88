"""Tetrahedral meshes, ellipsoid base meshes and linear-elastic FEM assembly.

All meshes are linear (constant-strain) tetrahedra. Node coordinates are
stored as an ``(N, 3)`` array; degrees of freedom are interleaved
``[x0, y0, z0, x1, ...]`` everywhere in the package.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

from .errors import InsufficientDataError, InvalidMeshError, InvalidSpecError


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation mapping local coordinates into a parent frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation).reshape(3, 3)
        t = _frozen(self.translation).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise InvalidSpecError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_euler_deg(cls, angles, translation=(0.0, 0.0, 0.0)):
        """Rotation about the fixed x, y, z axes (in that order), in degrees."""
        R = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
        return cls(R, np.asarray(translation, float))

    def apply(self, points):
        """Local -> parent."""
        p = np.asarray(points, float)
        return p @ self.rotation.T + self.translation

    def apply_inverse(self, points):
        """Parent -> local."""
        p = np.asarray(points, float)
        return (p - self.translation) @ self.rotation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self * other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True)
class EllipsoidSpec:
    """Semi-axes, pose and discretization of an ellipsoidal base mesh.

    ``n_lat`` latitude intervals, ``n_lon`` longitude intervals and
    ``n_rad`` radial layers between the center and the surface. An even
    ``n_lat`` and ``n_lon`` divisible by 4 put nodes on all six axis
    extremes, so the mesh bounding box equals the analytic one.
    """

    a_x: float
    a_y: float
    a_z: float
    pose: RigidTransform = field(default_factory=RigidTransform)
    n_lat: int = 8
    n_lon: int = 16
    n_rad: int = 2

    def __post_init__(self):
        for name in ("a_x", "a_y", "a_z"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise InvalidSpecError(f"{name} must be positive, got {v}")
        if self.n_lat < 2 or self.n_rad < 1:
            raise InvalidSpecError(
                f"degenerate resolution n_lat={self.n_lat}, n_rad={self.n_rad}")
        if self.n_lon < 3:
            raise InvalidSpecError(f"degenerate resolution n_lon={self.n_lon}")

    @property
    def semi_axes(self):
        return np.array([self.a_x, self.a_y, self.a_z])

    def key(self):
        """Hashable identity used by basis caches."""
        return (float(self.a_x), float(self.a_y), float(self.a_z),
                tuple(self.pose.rotation.ravel()), tuple(self.pose.translation),
                self.n_lat, self.n_lon, self.n_rad)

    def shape_key(self):
        """Identity of the mesh in its own frame (pose excluded)."""
        return (float(self.a_x), float(self.a_y), float(self.a_z),
                self.n_lat, self.n_lon, self.n_rad)


@dataclass(frozen=True)
class SolidMesh:
    nodes: np.ndarray
    tets: np.ndarray
    surface_tris: np.ndarray
    center: np.ndarray = None

    def __post_init__(self):
        nodes = _frozen(self.nodes).reshape(-1, 3)
        tets = _frozen(self.tets, dtype=np.int64).reshape(-1, 4)
        tris = _frozen(self.surface_tris, dtype=np.int64).reshape(-1, 3)
        center = self.center
        if center is None:
            center = volume_centroid(nodes, tets)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "tets", tets)
        object.__setattr__(self, "surface_tris", tris)
        object.__setattr__(self, "center", _frozen(center).reshape(3))

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_dofs(self):
        return 3 * len(self.nodes)

    def volumes(self):
        return tet_volumes(self.nodes, self.tets)

    def surface_nodes(self):
        return np.unique(self.surface_tris)

    def validate(self):
        """Raise :class:`InvalidMeshError` if any mesh invariant is broken."""
        n = len(self.nodes)
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= n):
            raise InvalidMeshError("tet index out of range")
        if self.surface_tris.size and (self.surface_tris.min() < 0
                                       or self.surface_tris.max() >= n):
            raise InvalidMeshError("surface triangle index out of range")
        vol = self.volumes()
        if np.any(vol <= 0):
            bad = np.flatnonzero(vol <= 0)
            raise InvalidMeshError(f"{len(bad)} non-positive tets, first id {bad[0]}")
        # closed 2-manifold: each undirected edge shared by exactly two faces
        # with opposite directions
        e = np.concatenate([self.surface_tris[:, [0, 1]],
                            self.surface_tris[:, [1, 2]],
                            self.surface_tris[:, [2, 0]]])
        directed = {tuple(x) for x in e.tolist()}
        if len(directed) != len(e):
            raise InvalidMeshError("surface has a repeated directed edge")
        for a, b in directed:
            if (b, a) not in directed:
                raise InvalidMeshError(f"surface open at edge ({a}, {b})")
        return self

    def transformed(self, transform: RigidTransform) -> "SolidMesh":
        return SolidMesh(transform.apply(self.nodes), self.tets, self.surface_tris,
                         transform.apply(self.center[None])[0])


@dataclass(frozen=True)
class MaterialParams:
    E: float
    v: float
    M_total: float

    def __post_init__(self):
        if not self.E > 0:
            raise InvalidSpecError(f"E must be positive, got {self.E}")
        if not 0 < self.v < 0.5:
            raise InvalidSpecError(f"Poisson ratio must lie in (0, 0.5), got {self.v}")
        if not self.M_total > 0:
            raise InvalidSpecError(f"total mass must be positive, got {self.M_total}")

    def lame(self):
        E, v = self.E, self.v
        lam = E * v / ((1 + v) * (1 - 2 * v))
        mu = E / (2 * (1 + v))
        return lam, mu


@dataclass(frozen=True)
class AssembledSystem:
    """Sparse stiffness ``K`` and lumped mass ``M`` (both 3N x 3N)."""

    K: sp.csr_matrix
    M: sp.csr_matrix
    nodes: np.ndarray

    @property
    def mass_diagonal(self):
        return self.M.diagonal()


# --------------------------------------------------------------------------
# geometry helpers

def tet_volumes(nodes, tets):
    X = np.asarray(nodes)[np.asarray(tets)]
    d1, d2, d3 = X[:, 1] - X[:, 0], X[:, 2] - X[:, 0], X[:, 3] - X[:, 0]
    return np.einsum("ij,ij->i", d1, np.cross(d2, d3)) / 6.0


def volume_centroid(nodes, tets):
    nodes = np.asarray(nodes, float)
    if len(tets) == 0:
        return nodes.mean(axis=0) if len(nodes) else np.zeros(3)
    X = nodes[np.asarray(tets)]
    vol = np.abs(tet_volumes(nodes, tets))
    return (X.mean(axis=1) * vol[:, None]).sum(axis=0) / vol.sum()


def _orient_tets(nodes, tets):
    tets = np.array(tets, dtype=np.int64)
    neg = tet_volumes(nodes, tets) < 0
    tets[neg, 2], tets[neg, 3] = tets[neg, 3].copy(), tets[neg, 2].copy()
    return tets


def boundary_faces(nodes, tets):
    """Faces used by exactly one tet, oriented with outward normals."""
    tets = np.asarray(tets)
    local = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
    opposite = np.array([0, 1, 2, 3])
    faces = tets[:, local].reshape(-1, 3)
    opp = tets[:, opposite].reshape(-1)
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    keep = counts[inv] == 1
    faces, opp = faces[keep], opp[keep]
    P = np.asarray(nodes)[faces]
    n = np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
    inward = np.einsum("ij,ij->i", n, np.asarray(nodes)[opp] - P[:, 0]) > 0
    faces[inward] = faces[inward][:, [0, 2, 1]]
    order = np.lexsort(np.sort(faces, axis=1).T[::-1])
    return faces[order]


# --------------------------------------------------------------------------
# generators

def _sphere_surface(n_lat, n_lon):
    """Unit-parameter lat/long nodes (zeta, sigma) and surface triangles."""
    zeta = [-np.pi / 2]
    sigma = [0.0]
    for i in range(1, n_lat):
        z = -np.pi / 2 + i * np.pi / n_lat
        for k in range(n_lon):
            zeta.append(z)
            sigma.append(-np.pi + 2 * np.pi * k / n_lon)
    zeta.append(np.pi / 2)
    sigma.append(0.0)
    south, north = 0, len(zeta) - 1

    def ring(i, k):
        return 1 + (i - 1) * n_lon + (k % n_lon)

    tris = []
    for k in range(n_lon):
        tris.append((south, ring(1, k + 1), ring(1, k)))
    for i in range(1, n_lat - 1):
        for k in range(n_lon):
            a, b = ring(i, k), ring(i, k + 1)
            c, d = ring(i + 1, k + 1), ring(i + 1, k)
            tris.append((a, b, c))
            tris.append((a, c, d))
    for k in range(n_lon):
        tris.append((north, ring(n_lat - 1, k), ring(n_lat - 1, k + 1)))
    return np.array(zeta), np.array(sigma), np.array(tris, dtype=np.int64)


def ellipsoid_surface_point(a, zeta, sigma):
    """Point on the ellipsoid with semi-axes ``a`` at latitude/longitude."""
    zeta = np.asarray(zeta, float)
    sigma = np.asarray(sigma, float)
    x = a[0] * np.cos(zeta) * np.cos(sigma)
    y = a[1] * np.cos(zeta) * np.sin(sigma)
    z = a[2] * np.sin(zeta)
    # exact zeros at the poles keep the bounding box exact
    pole = np.abs(np.abs(zeta) - np.pi / 2) < 1e-15
    x = np.where(pole, 0.0, x)
    y = np.where(pole, 0.0, y)
    z = np.where(pole, np.sign(zeta) * a[2], z)
    return np.stack([x, y, z], axis=-1)


def generate_ellipsoid_mesh(spec: EllipsoidSpec) -> SolidMesh:
    """Solid tetrahedral ellipsoid in its own (base-mesh) frame.

    Node 0 is the center. Shells of the lat/long surface grid follow at
    radii ``j / n_rad``; the outermost shell carries the surface triangles.
    Each surface triangle is extruded radially into prisms (three tets
    each) with a tet fan to the center in the innermost layer.
    """
    zeta, sigma, tris = _sphere_surface(spec.n_lat, spec.n_lon)
    ns = len(zeta)
    unit = ellipsoid_surface_point(spec.semi_axes, zeta, sigma)
    shells = [unit * (j / spec.n_rad) for j in range(1, spec.n_rad + 1)]
    shells[-1] = unit
    nodes = np.vstack([np.zeros((1, 3))] + shells)

    def gid(shell, local):
        return 1 + shell * ns + np.asarray(local)

    # orient surface triangles outward (the center is inside a convex hull)
    P = unit[tris]
    nrm = np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
    flip = np.einsum("ij,ij->i", nrm, P.mean(axis=1)) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    tets = []
    srt = np.sort(tris, axis=1)
    for a, b, c in srt:
        tets.append((0, gid(0, a), gid(0, b), gid(0, c)))
    for j in range(spec.n_rad - 1):
        for a, b, c in srt:
            A, B, C = gid(j, a), gid(j, b), gid(j, c)
            A2, B2, C2 = gid(j + 1, a), gid(j + 1, b), gid(j + 1, c)
            tets.append((A, B, C, A2))
            tets.append((B, C, A2, B2))
            tets.append((C, A2, B2, C2))
    tets = _orient_tets(nodes, np.array(tets, dtype=np.int64))
    surface = gid(spec.n_rad - 1, tris)
    return SolidMesh(nodes, tets, surface, np.zeros(3))


def generate_box_mesh(size, divisions, origin=(0.0, 0.0, 0.0)) -> SolidMesh:
    """Axis-aligned box split into hexahedra, six tets per hexahedron.

    ``size`` is the edge lengths, ``divisions`` the cell counts per axis.
    Node index of grid point (i, j, k) is ``i + (nx+1) * (j + (ny+1) * k)``.
    """
    nx, ny, nz = (int(d) for d in divisions)
    if min(nx, ny, nz) < 1:
        raise InvalidSpecError("box divisions must be >= 1")
    xs = np.linspace(0, size[0], nx + 1) + origin[0]
    ys = np.linspace(0, size[1], ny + 1) + origin[1]
    zs = np.linspace(0, size[2], nz + 1) + origin[2]
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def idx(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    # Kuhn split along the main diagonal: conforming across all cells
    paths = [(1, 2, 4), (1, 4, 2), (2, 1, 4), (2, 4, 1), (4, 1, 2), (4, 2, 1)]
    tets = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                def corner(bits):
                    return idx(i + (bits & 1), j + ((bits >> 1) & 1), k + ((bits >> 2) & 1))
                for p in paths:
                    b0 = 0
                    b1 = b0 | p[0]
                    b2 = b1 | p[1]
                    b3 = b2 | p[2]
                    tets.append((corner(b0), corner(b1), corner(b2), corner(b3)))
    tets = _orient_tets(nodes, np.array(tets, dtype=np.int64))
    return SolidMesh(nodes, tets, boundary_faces(nodes, tets))


def lumpy_ellipsoid_mesh(spec: EllipsoidSpec, amplitude=0.15, n_terms=4, seed=0) -> SolidMesh:
    """Ellipsoid with a smooth random radial bump field (irregular organ-like
    body). Topology is that of :func:`generate_ellipsoid_mesh`."""
    base = generate_ellipsoid_mesh(spec)
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_terms, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    weights = rng.uniform(-1.0, 1.0, size=n_terms)
    u = base.nodes / spec.semi_axes
    r = np.linalg.norm(u, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        dhat = np.where(r[:, None] > 0, u / np.where(r > 0, r, 1)[:, None], 0.0)
    bump = 1.0 + amplitude * np.tanh((dhat @ dirs.T) @ weights)
    nodes = base.nodes * bump[:, None]
    mesh = SolidMesh(nodes, base.tets, base.surface_tris, np.zeros(3))
    if np.any(mesh.volumes() <= 0):
        raise InvalidMeshError("bump amplitude too large: inverted tets")
    return mesh


# --------------------------------------------------------------------------
# FEM

def _shape_gradients(nodes, tets):
    """Constant shape-function gradients (T, 4, 3) and volumes (T,)."""
    X = np.asarray(nodes)[np.asarray(tets)]
    A = np.ones((len(tets), 4, 4))
    A[:, :, 1:] = X
    det = np.linalg.det(A)
    vol = det / 6.0
    if np.any(vol <= 0):
        bad = np.flatnonzero(vol <= 0)
        raise InvalidMeshError(f"{len(bad)} inverted or degenerate tets, first id {bad[0]}")
    inv = np.linalg.inv(A)
    grads = np.transpose(inv[:, 1:, :], (0, 2, 1))
    return grads, vol


def strain_displacement(grads):
    """Voigt B matrices (T, 6, 12): order xx, yy, zz, yz, xz, xy with
    engineering shear strains."""
    T = grads.shape[0]
    B = np.zeros((T, 6, 12))
    for a in range(4):
        gx, gy, gz = grads[:, a, 0], grads[:, a, 1], grads[:, a, 2]
        c = 3 * a
        B[:, 0, c] = gx
        B[:, 1, c + 1] = gy
        B[:, 2, c + 2] = gz
        B[:, 3, c + 1] = gz
        B[:, 3, c + 2] = gy
        B[:, 4, c] = gz
        B[:, 4, c + 2] = gx
        B[:, 5, c] = gy
        B[:, 5, c + 1] = gx
    return B


def elasticity_matrix(E, v):
    lam = E * v / ((1 + v) * (1 - 2 * v))
    mu = E / (2 * (1 + v))
    D = np.zeros((6, 6))
    D[:3, :3] = lam
    D[:3, :3] += 2 * mu * np.eye(3)
    D[3:, 3:] = mu * np.eye(3)
    return D


def element_stiffness(nodes, tets, E, v):
    """Element stiffness matrices (T, 12, 12) = V B^T D B."""
    grads, vol = _shape_gradients(nodes, tets)
    B = strain_displacement(grads)
    D = elasticity_matrix(E, v)
    return np.einsum("t,tki,kl,tlj->tij", vol, B, D, B), vol


def _element_dofs(tets):
    tets = np.asarray(tets)
    return (3 * tets[:, :, None] + np.arange(3)).reshape(len(tets), 12)


def assemble_stiffness(nodes, tets, E, v, element_matrices=None):
    if element_matrices is None:
        element_matrices, _ = element_stiffness(nodes, tets, E, v)
    dofs = _element_dofs(tets)
    rows = np.repeat(dofs, 12, axis=1).ravel()
    cols = np.tile(dofs, (1, 12)).ravel()
    n = 3 * len(nodes)
    K = sp.coo_matrix((element_matrices.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    K.sort_indices()
    return K


def lumped_mass(nodes, tets, M_total):
    vol = tet_volumes(nodes, tets)
    node_mass = np.zeros(len(nodes))
    np.add.at(node_mass, np.asarray(tets).ravel(), np.repeat(vol / 4.0, 4))
    node_mass *= M_total / vol.sum()
    return np.repeat(node_mass, 3)


def assemble_system(mesh: SolidMesh, mat: MaterialParams) -> AssembledSystem:
    """Linear-elastic stiffness and volume-lumped mass of ``mesh``."""
    Ke, _ = element_stiffness(mesh.nodes, mesh.tets, mat.E, mat.v)
    K = assemble_stiffness(mesh.nodes, mesh.tets, mat.E, mat.v, Ke)
    K = ((K + K.T) * 0.5).tocsr()
    M = sp.diags(lumped_mass(mesh.nodes, mesh.tets, mat.M_total)).tocsr()
    return AssembledSystem(K, M, mesh.nodes)


def rigid_body_modes(nodes, center=None):
    """Three translations and three infinitesimal rotations about ``center``
    as columns of a (3N, 6) array (not normalized)."""
    nodes = np.asarray(nodes, float)
    if center is None:
        center = nodes.mean(axis=0)
    r = nodes - center
    N = len(nodes)
    R = np.zeros((N, 3, 6))
    for i in range(3):
        R[:, i, i] = 1.0
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = 1.0
        R[:, :, 3 + axis] = np.cross(e, r)
    return R.reshape(3 * N, 6)


# --------------------------------------------------------------------------
# base-mesh frame estimation from rest samplings

def _pick(points, idx, key):
    # lexicographic (key tuple, then index) minimum over the subset
    best = min(idx, key=lambda i: key(points[i]) + (i,))
    return best


def estimate_base_mesh_frame(rest_samples, effector_orientation=None, a_z=None,
                             n_lat=8, n_lon=16, n_rad=2) -> EllipsoidSpec:
    """Rough base-mesh size and pose from rest-configuration samplings.

    Four reference points are picked in the lower (y below mid-range) and
    upper halves of the cloud: p0/p1 the smallest/largest x in the lower
    half, p2/p3 the smallest/largest x in the upper half. Ties go to the
    more extreme y, then to the lowest sample index.
    """
    P = np.asarray(rest_samples, float).reshape(-1, 3)
    if len(P) < 4:
        raise InsufficientDataError(f"need at least 4 samples, got {len(P)}")
    if a_z is None or not a_z > 0:
        raise InvalidSpecError("a_z must be a positive thickness estimate")
    centered = P - P.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-12 * max(np.abs(centered).max(), 1e-300)) < 2:
        raise InsufficientDataError("samples are collinear")
    mid = 0.5 * (P[:, 1].min() + P[:, 1].max())
    lower = [i for i in range(len(P)) if P[i, 1] <= mid]
    upper = [i for i in range(len(P)) if P[i, 1] > mid]
    if not lower or not upper:
        raise InsufficientDataError("samples do not span the y direction")
    p0 = _pick(P, lower, lambda q: (q[0], q[1]))
    p1 = _pick(P, lower, lambda q: (-q[0], q[1]))
    p2 = _pick(P, upper, lambda q: (q[0], -q[1]))
    p3 = _pick(P, upper, lambda q: (-q[0], -q[1]))
    x0, x1, x2, x3 = P[p0], P[p1], P[p2], P[p3]
    a_x = (np.linalg.norm(x1 - x0) + np.linalg.norm(x3 - x2)) / 4.0
    a_y = 0.5 * np.linalg.norm((x0 + x1) / 2.0 - (x2 + x3) / 2.0)
    if not (a_x > 0 and a_y > 0):
        raise InsufficientDataError("degenerate sample extent")
    R = np.eye(3) if effector_orientation is None else np.asarray(effector_orientation, float)
    t = P.mean(axis=0) - a_z * np.array([0.0, 0.0, 1.0])
    return EllipsoidSpec(a_x, a_y, a_z, RigidTransform(R, t), n_lat, n_lon, n_rad)


# --------------------------------------------------------------------------
# file I/O

def write_mesh(mesh: SolidMesh, path):
    """Plain-text mesh: ``N T S`` header, node coordinates, tets, triangles."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"{len(mesh.nodes)} {len(mesh.tets)} {len(mesh.surface_tris)}\n")
        for x, y, z in mesh.nodes:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        for t in mesh.tets:
            fh.write(" ".join(str(int(i)) for i in t) + "\n")
        for t in mesh.surface_tris:
            fh.write(" ".join(str(int(i)) for i in t) + "\n")


def read_mesh(path, center=None) -> SolidMesh:
    tokens = Path(path).read_text().split()
    try:
        N, T, S = (int(t) for t in tokens[:3])
    except ValueError as exc:
        raise InvalidMeshError(f"bad mesh header in {path}") from exc
    need = 3 + 3 * N + 4 * T + 3 * S
    if len(tokens) != need:
        raise InvalidMeshError(f"{path}: expected {need} tokens, found {len(tokens)}")
    pos = 3
    nodes = np.array(tokens[pos:pos + 3 * N], float).reshape(N, 3)
    pos += 3 * N
    tets = np.array(tokens[pos:pos + 4 * T], np.int64).reshape(T, 4)
    pos += 4 * T
    tris = np.array(tokens[pos:pos + 3 * S], np.int64).reshape(S, 3)
    return SolidMesh(nodes, tets, tris, center)
