"""Closed-loop runs against the plant, the point-based baseline, and records."""
from __future__ import annotations

import csv
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import AdaptiveController, ControllerState, build_manip_projection
from .errors import (ConfigurationError, InvalidInputError, ModalShapeError, RunAborted)
from .features import compute_features, resample_polyline
from .mapping import reassemble_on_sampling_change
from .mesh import (EllipsoidSpec, MaterialParams, RigidTransform, estimate_base_mesh_frame,
                   generate_box_mesh, generate_ellipsoid_mesh, assemble_system, read_mesh)
from .modal import solve_modes
from .plant import Plant, generate_desired, plant_metrics, plant_step
from .scenario import Scenario, load_scenario

log = logging.getLogger(__name__)

CSV_VERSION = 1
STALL_RTOL = 1e-9


# --------------------------------------------------------------------------
# sampling

def outline_loop(mesh, axis=2):
    """Node ids around the boundary of the top face (largest ``axis`` coordinate).

    The loop starts at its lowest node id and runs counter-clockwise when
    seen from above.
    """
    X = mesh.nodes
    top = X[:, axis].max()
    on = np.abs(X[:, axis] - top) <= 1e-9 * max(np.ptp(X), 1.0)
    tris = [t for t in mesh.surface_tris if on[t].all()]
    if not tris:
        raise ConfigurationError("mesh has no flat top face to outline")
    directed = set()
    for a, b, c in tris:
        directed.update({(a, b), (b, c), (c, a)})
    nxt = {}
    for a, b in directed:
        if (b, a) not in directed:
            if a in nxt:
                raise ConfigurationError("top face outline is not a simple loop")
            nxt[a] = b
    start = min(nxt)
    loop = [start]
    while nxt[loop[-1]] != start:
        loop.append(nxt[loop[-1]])
        if len(loop) > len(nxt):
            raise ConfigurationError("top face outline is not a simple loop")
    if len(loop) != len(nxt):
        raise ConfigurationError("top face outline has several loops")
    return np.array(loop, dtype=np.int64)


class NodeSampler:
    """Samples rigidly attached to plant nodes."""

    def __init__(self, node_ids):
        self.node_ids = np.asarray(node_ids, dtype=np.int64)

    @property
    def l(self):
        return len(self.node_ids)

    def sample(self, state, commit=True):
        return state[self.node_ids].copy()

    def desired(self, state):
        return state[self.node_ids].copy()

    def reset(self):
        pass


class ContourSampler:
    """Points on the top-face outline of the object.

    With ``fixed_levels`` off, every call spaces the samples equally by arc
    length, so they stay near the same material points as the object
    deforms. With it on, only the first call does that; afterwards each
    sample stays at the y level it started at and slides along the contour
    to the nearest crossing of that level, so correspondences drift.
    """

    def __init__(self, loop, l, fixed_levels=False, rest_state=None):
        self.loop = np.asarray(loop, dtype=np.int64)
        self._l = int(l)
        self.fixed_levels = fixed_levels
        self._rest = None if rest_state is None else self._arc(rest_state)
        if fixed_levels and self._rest is None:
            raise ConfigurationError("level sampling needs the rest state")
        self._levels = None
        self._prev = None

    @property
    def l(self):
        return self._l

    def reset(self):
        self._levels = None
        self._prev = None

    def _arc(self, state):
        return resample_polyline(state[self.loop], self._l, closed=True).reshape(-1, 3)

    def desired(self, state):
        """Samples of a target shape: the same rule as at run start, so in
        level mode the rest levels, matched to the rest samples."""
        if not self.fixed_levels:
            return self._arc(state)
        return self._level_points(state, self._rest[:, 1], self._rest)

    def sample(self, state, commit=True):
        if not self.fixed_levels:
            return self._arc(state)
        if self._levels is None:
            pts = self._arc(state)
            if commit:
                self._levels = pts[:, 1].copy()
                self._prev = pts.copy()
            return pts
        pts = self._level_points(state, self._levels, self._prev)
        if commit:
            self._prev = pts.copy()
        return pts

    def _level_points(self, state, levels, previous):
        P = state[self.loop]
        A, B = P, np.roll(P, -1, axis=0)
        out = np.empty((self._l, 3))
        for i, (level, prev) in enumerate(zip(levels, previous)):
            da, db = A[:, 1] - level, B[:, 1] - level
            cand = []
            for j in np.flatnonzero(da * db <= 0):
                if da[j] == db[j]:
                    # segment lies on the level: closest point to the previous sample
                    d = B[j] - A[j]
                    a = np.clip((prev - A[j]) @ d / max(d @ d, 1e-300), 0.0, 1.0)
                    cand.append(A[j] + a * d)
                else:
                    a = da[j] / (da[j] - db[j])
                    cand.append(A[j] + a * (B[j] - A[j]))
            if not cand:
                # level outside the contour: its extreme point in y
                gap = np.abs(P[:, 1] - level)
                cand = list(P[gap <= gap.min() * (1 + 1e-12)])
            cand = np.array(cand)
            out[i] = cand[int(np.argmin(np.linalg.norm(cand - prev, axis=1)))]
        return out


def make_sampler(sc: Scenario, mesh):
    if sc.sampling == "nodes":
        return NodeSampler(sc.sample_nodes)
    loop = outline_loop(mesh, sc.outline_axis)
    return ContourSampler(loop, sc.n_samples, fixed_levels=sc.sampling == "contour_levels",
                          rest_state=mesh.nodes)


# --------------------------------------------------------------------------
# base mesh / modal basis cache

class BasisCache:
    """Modal bases keyed by base-mesh shape and material.

    Only the largest solve is kept; smaller requests are served by
    truncation, which gives the same columns as a fresh solve.
    """

    def __init__(self):
        self._store = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, spec: EllipsoidSpec, material: MaterialParams, m: int):
        key = (spec.shape_key(), (float(material.E), float(material.v), float(material.M_total)))
        with self._lock:
            entry = self._store.get(key)
            if entry is not None and entry[1].m >= m:
                self.hits += 1
                mesh, basis = entry
            else:
                self.misses += 1
                mesh = entry[0] if entry else generate_ellipsoid_mesh(spec)
                basis = solve_modes(assemble_system(mesh, material), max(m, entry[1].m if entry else 0))
                self._store[key] = (mesh, basis)
        return mesh, (basis if basis.m == m else basis.truncate(m))

    def clear(self):
        with self._lock:
            self._store.clear()
            self.hits = self.misses = 0


DEFAULT_CACHE = BasisCache()


# --------------------------------------------------------------------------
# run setup

def build_plant(sc: Scenario) -> Plant:
    if sc.plant_mesh is not None:
        mesh = read_mesh(sc.resolve(sc.plant_mesh))
    else:
        mesh = generate_box_mesh(sc.plant_box, sc.plant_box_divisions or (1, 1, 1), sc.plant_box_origin)
    if sc.sampling == "nodes":
        ids = np.asarray(sc.sample_nodes)
        if ids.min() < 0 or ids.max() >= mesh.n_nodes or len(set(ids.tolist())) != len(ids):
            raise ConfigurationError("sample node ids must be distinct plant nodes")
    return Plant(mesh, MaterialParams(sc.plant_E, sc.plant_v, sc.plant_M), sc.fixed_nodes,
                 sc.manip_nodes, corotational=sc.corotational)


def base_mesh_spec(sc: Scenario, plant: Plant, rest_samples_world) -> EllipsoidSpec:
    n_lat, n_lon, n_rad = (int(r) for r in sc.base_resolution)
    R = RigidTransform.from_euler_deg(sc.base_euler_deg).rotation
    if sc.base_mesh == "estimate":
        est = estimate_base_mesh_frame(rest_samples_world, R, sc.base_a_z, n_lat, n_lon, n_rad)
        pose = RigidTransform(est.pose.rotation, est.pose.translation + np.asarray(sc.base_offset, float))
        return EllipsoidSpec(est.a_x, est.a_y, est.a_z, pose, n_lat, n_lon, n_rad)
    t = plant.mesh.center if sc.base_translation is None else np.asarray(sc.base_translation, float)
    pose = RigidTransform(R, t + np.asarray(sc.base_offset, float))
    return EllipsoidSpec(*sc.base_axes, pose=pose, n_lat=n_lat, n_lon=n_lon, n_rad=n_rad)


@dataclass
class RunSetup:
    scenario: Scenario
    plant: Plant
    sampler: object
    desired: object
    spec: EllipsoidSpec
    base_mesh: object
    basis: object
    mp: object
    sample_ids: tuple
    rest_base: np.ndarray       # (l, 3) rest samples, base frame
    desired_world: np.ndarray   # (l, 3) desired samples, world frame

    @property
    def pose(self):
        return self.spec.pose

    @property
    def desired_base(self):
        return self.pose.apply_inverse(self.desired_world)

    def to_base(self, pts):
        return self.pose.apply_inverse(pts)

    def velocity_to_world(self, v):
        return (np.asarray(v).reshape(-1, 3) @ self.pose.rotation.T).ravel()

    def rows_of(self, active):
        pos = {sid: i for i, sid in enumerate(self.sample_ids)}
        return [pos[a] for a in active]

    def projector(self, active):
        """Projector for the active sample ids and its desired features."""
        rows = self.rows_of(active)
        proj = reassemble_on_sampling_change(self.basis, self.base_mesh, self.rest_base[rows], tuple(active))
        return proj, compute_features(proj, self.desired_base[rows].ravel())


def prepare(sc: Scenario, cache: BasisCache = None) -> RunSetup:
    cache = DEFAULT_CACHE if cache is None else cache
    plant = build_plant(sc)
    sampler = make_sampler(sc, plant.mesh)
    desired = generate_desired(plant, sc.manip_displacement, sc.desired_steps)
    desired_world = sampler.desired(desired.full_state)
    sampler.reset()
    rest_world = sampler.sample(plant.state, commit=False)
    spec = base_mesh_spec(sc, plant, rest_world)
    base_mesh, basis = cache.get(spec, MaterialParams(sc.base_E, sc.base_v, sc.base_M), sc.m)
    if not 3 * sc.k <= sc.m <= 3 * sampler.l:
        raise ConfigurationError(f"need 3k <= m <= 3l, got k={sc.k}, m={sc.m}, l={sampler.l}")
    mp = build_manip_projection(basis, base_mesh, spec.pose.apply_inverse(plant.rest[plant.manip]))
    ids = tuple(sc.sample_nodes) if sc.sampling == "nodes" else tuple(range(sampler.l))
    return RunSetup(sc, plant, sampler, desired, spec, base_mesh, basis, mp, ids,
                    spec.pose.apply_inverse(rest_world), desired_world)


# --------------------------------------------------------------------------
# records

@dataclass
class RunRecord:
    name: str
    controller: str
    columns: tuple
    rows: list = field(default_factory=list)
    status: str = "running"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def columns_like(self, prefix):
        return [c for c in self.columns if c.startswith(prefix)]


def record_columns(k):
    xyz = "xyz"
    cols = ["tick", "t", "e_norm", "e_x", "manip_dist"]
    cols += [f"e_d_{i}{a}" for i in range(k) for a in xyz]
    cols += [f"v_{i}{a}" for i in range(k) for a in xyz]
    cols += ["theta_min", "theta_max", "theta_norm", "decrement", "JTe_norm", "active"]
    return tuple(cols)


def _row(tick, t, e_norm, e_x, e_d, v, theta, decrement, jte, active):
    th = (np.nan, np.nan, np.nan) if theta is None else (theta.min(), theta.max(), np.linalg.norm(theta))
    return (tick, t, e_norm, e_x, float(np.linalg.norm(e_d)), *e_d, *v, *th, decrement, jte, active)


def _finish_status(record, converged):
    if converged:
        return "converged"
    dec = np.abs(record.column("decrement")) if len(record) else np.zeros(1)
    if record.controller == "modal" and np.isfinite(dec).all() and dec[-1] <= STALL_RTOL * max(dec.max(), 1e-300):
        return "stall"
    return "max_ticks"


def _abort(exc, tick):
    diag = getattr(exc, "diagnostics", {})
    return RunAborted(f"run aborted at tick {tick}: {type(exc).__name__}: {exc}", tick, exc, diag)


# --------------------------------------------------------------------------
# modal controller run

def run_scenario(scenario, cache: BasisCache = None, seed=None, setup: RunSetup = None) -> RunRecord:
    """Closed-loop run of the adaptive modal controller against the plant."""
    sc = load_scenario(scenario) if isinstance(scenario, (str, Path)) else scenario
    su = prepare(sc, cache) if setup is None else setup
    plant, sampler = su.plant, su.sampler
    plant.reset()
    sampler.reset()
    rng = np.random.default_rng(sc.seed if seed is None else seed)

    active = list(su.sample_ids)
    proj, s_star = su.projector(active)
    state = ControllerState.initial(sc.m, sc.k, sc.K_s, sc.Gamma, sc.dt, speed_clamp=sc.speed_clamp,
                                    theta_bounds=None if sc.theta_bounds is None else tuple(sc.theta_bounds))
    ctrl = AdaptiveController(su.mp, state, s_star)
    events = {}
    for tick, action, ids in sc.parsed_events():
        events.setdefault(tick, []).append((action, ids))

    rec = RunRecord(sc.name, "modal", record_columns(sc.k))
    rec.meta.update(s_star=s_star.copy(), desired_samples=su.desired_base.copy(), sample_ids=su.sample_ids,
                    projector_rebuilds=0)
    e0 = None
    converged = False
    tick = 0
    try:
        for tick in range(sc.max_ticks):
            if tick in events:
                for action, ids in events[tick]:
                    bad = set(ids) - set(su.sample_ids)
                    if bad:
                        raise InvalidInputError(f"event names unknown sample ids {sorted(bad)}")
                    if action == "lose":
                        active = [a for a in active if a not in ids]
                    else:
                        active = [a for a in su.sample_ids if a in active or a in ids]
                proj, s_star = su.projector(active)
                ctrl.s_star = s_star
                rec.meta["projector_rebuilds"] += 1
                rec.meta.setdefault("event_s_star", []).append((tick, tuple(active), s_star.copy()))
            pts = sampler.sample(plant.state)
            if sc.noise_std > 0:
                pts = pts + rng.normal(scale=sc.noise_std, size=pts.shape)
            x = su.to_base(pts[su.rows_of(active)])
            tel = ctrl.step(compute_features(proj, x.ravel()))
            e_x, e_d = plant_metrics(plant, su.desired.full_state, su.desired.manip_positions)
            v_world = su.velocity_to_world(tel.v)
            rec.rows.append(_row(tick, tel.t, tel.e_norm, e_x, e_d, v_world, tel.theta_hat,
                                 tel.decrement, tel.JTe_norm, len(active)))
            if e0 is None:
                e0 = tel.e_norm
            if tel.e_norm <= sc.tol_rel * e0:
                converged = True
                break
            plant_step(plant, v_world, sc.dt)
    except ModalShapeError as exc:
        raise _abort(exc, tick) from exc
    rec.status = _finish_status(rec, converged)
    return rec


# --------------------------------------------------------------------------
# point-based baseline

def _damped_pinv(J, rcond=1e-6):
    U, sv, Vt = np.linalg.svd(J, full_matrices=False)
    lam = rcond * sv[0] if sv.size and sv[0] > 0 else 0.0
    if sv.size and sv[-1] < lam:
        log.info("baseline pseudo-inverse damped with lambda=%.3g", lam)
        inv = sv / (sv ** 2 + lam ** 2)
    else:
        inv = np.where(sv > 0, 1.0 / np.where(sv > 0, sv, 1.0), 0.0)
    return (Vt.T * inv) @ U.T


def probe_point_jacobian(su: RunSetup, step):
    """Central-difference sensitivity of the sample positions to the
    manipulation targets around the current plant state (plant untouched)."""
    plant = su.plant
    base = plant.targets.ravel()
    cols = []
    for j in range(base.size):
        d = np.zeros_like(base)
        d[j] = step
        xp = su.sampler.sample(plant.equilibrium(base + d), commit=False)
        xm = su.sampler.sample(plant.equilibrium(base - d), commit=False)
        cols.append((xp - xm).ravel() / (2 * step))
    return np.column_stack(cols)


def loop_gain_eigenvalues(su: RunSetup, step=None):
    """Eigenvalues of ``dt K_s G^T J_true`` at rest for the untouched plant.

    ``J_true`` is the probed feature sensitivity to manipulation motion.
    With ``theta_hat = 1`` the explicit per-tick error map is ``I - dt
    J_true K_s G^T``, so real parts above 2 overshoot and negative ones
    point the command the wrong way. Diagnostic only: it reads the plant.
    """
    sc = su.scenario
    su.plant.reset()
    su.sampler.reset()
    proj, _ = su.projector(list(su.sample_ids))
    step = step or 1e-6 * float(np.ptp(su.plant.rest))
    Jp = probe_point_jacobian(su, step)
    l = len(su.sample_ids)
    R = su.pose.rotation
    J_true = proj.matrix() @ np.kron(np.eye(l), R.T) @ Jp @ np.kron(np.eye(sc.k), R)
    K = np.asarray(sc.K_s, float)
    K = K * np.eye(3 * sc.k) if K.ndim == 0 else K
    return np.linalg.eigvals(sc.dt * K @ su.mp.G.T @ J_true)


def run_baseline(scenario, cache: BasisCache = None, seed=None, setup: RunSetup = None) -> RunRecord:
    """Point-based controller ``v = -K_p J_p^+ (x(p_s) - x*(p_s))`` with a
    probed initial Jacobian and Broyden updates."""
    sc = load_scenario(scenario) if isinstance(scenario, (str, Path)) else scenario
    su = prepare(sc, cache) if setup is None else setup
    plant, sampler = su.plant, su.sampler
    plant.reset()
    sampler.reset()
    rng = np.random.default_rng(sc.seed if seed is None else seed)

    x_star = su.desired_world.ravel()
    x = sampler.sample(plant.state)
    step = sc.baseline_probe or 1e-3 * float(np.ptp(plant.rest))
    Jp = probe_point_jacobian(su, step)

    Kp = sc.baseline_Kp
    if Kp is None:
        # match the modal controller's first command magnitude
        proj, s_star = su.projector(list(su.sample_ids))
        st = ControllerState.initial(sc.m, sc.k, sc.K_s, sc.Gamma, sc.dt)
        tel = AdaptiveController(su.mp, st, s_star).step(compute_features(proj, su.to_base(x).ravel()))
        raw = np.linalg.norm(_damped_pinv(Jp) @ (x.ravel() - x_star))
        Kp = float(np.linalg.norm(tel.v) / raw) if raw > 0 else 1.0

    rec = RunRecord(sc.name, "baseline", record_columns(sc.k))
    rec.meta.update(K_p=Kp, probe_step=step, J_p0=Jp.copy())
    e0 = None
    converged = False
    tick = 0
    try:
        for tick in range(sc.max_ticks):
            meas = x + (rng.normal(scale=sc.noise_std, size=x.shape) if sc.noise_std > 0 else 0.0)
            e = meas.ravel() - x_star
            en = float(np.linalg.norm(e))
            v = -Kp * (_damped_pinv(Jp) @ e)
            e_x, e_d = plant_metrics(plant, su.desired.full_state, su.desired.manip_positions)
            rec.rows.append(_row(tick, tick * sc.dt, en, e_x, e_d, v, None, np.nan, np.nan, sampler.l))
            if e0 is None:
                e0 = en
            if en <= sc.tol_rel * e0:
                converged = True
                break
            r_old = plant.targets.ravel().copy()
            plant_step(plant, v, sc.dt)
            x_new = sampler.sample(plant.state)
            dr = plant.targets.ravel() - r_old
            dx = (x_new - x).ravel()
            nr = dr @ dr
            if nr > 0:
                Jp = Jp + sc.baseline_broyden_gain * np.outer(dx - Jp @ dr, dr) / nr
            x = x_new
    except ModalShapeError as exc:
        raise _abort(exc, tick) from exc
    rec.status = "converged" if converged else "max_ticks"
    return rec


# --------------------------------------------------------------------------
# export and summary

def export_csv(record: RunRecord, path):
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# modalshape-run v{CSV_VERSION} name={record.name} controller={record.controller} "
                 f"status={record.status}\n")
        w = csv.writer(fh)
        w.writerow(record.columns)
        for r in record.rows:
            w.writerow([repr(float(x)) for x in r])


def read_csv(path) -> RunRecord:
    with Path(path).open(newline="") as fh:
        head = fh.readline()
        if not head.startswith("# modalshape-run v"):
            raise InvalidInputError(f"{path}: not a run record")
        meta = dict(kv.split("=", 1) for kv in head.split()[3:])
        rd = csv.reader(fh)
        cols = tuple(next(rd))
        rows = [tuple(float(x) for x in r) for r in rd]
    return RunRecord(meta.get("name", ""), meta.get("controller", ""), cols, rows, meta.get("status", ""))


def summarize(record: RunRecord, tol_rel=None) -> dict:
    if not len(record):
        return {"name": record.name, "controller": record.controller, "status": record.status, "ticks": 0}
    e = record.column("e_norm")
    dist = record.column("manip_dist")
    ed = np.column_stack([record.column(c) for c in record.columns_like("e_d_")])
    tail = ed[-max(1, len(ed) // 10):]
    out = {
        "name": record.name,
        "controller": record.controller,
        "status": record.status,
        "ticks": len(record),
        "initial_error": float(e[0]),
        "final_error": float(e[-1]),
        "final_e_x": float(record.column("e_x")[-1]),
        "steady_max_abs_e_d": float(np.abs(tail).max()),
        "initial_manip_dist": float(dist[0]),
        "final_manip_dist": float(dist[-1]),
    }
    if tol_rel is not None:
        hit = np.flatnonzero(e <= tol_rel * e[0])
        out["ticks_to_threshold"] = int(hit[0]) if hit.size else None
    return out


def sweep(paths, cache: BasisCache = None, baseline=False, workers=1):
    """Run several scenarios sharing one basis cache.

    Each distinct base mesh is solved once at the largest requested mode
    count, so every run in a family reads from the cache. Runs are
    independent; ``workers > 1`` spreads them over threads. A run that
    aborts is returned as its ``RunAborted`` in place of a record.
    """
    cache = DEFAULT_CACHE if cache is None else cache
    scenarios = [load_scenario(p) if isinstance(p, (str, Path)) else p for p in paths]
    # largest m first, so the first solve of each base mesh is the biggest
    ordered = sorted(scenarios, key=lambda s: -s.m)
    run = run_baseline if baseline else run_scenario

    def one(sc):
        try:
            return sc, run(sc, cache)
        except RunAborted as exc:
            log.error("%s: %s", sc.name, exc)
            return sc, exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, ordered))
    else:
        results = [one(sc) for sc in ordered]
    order = {id(s): i for i, s in enumerate(scenarios)}
    results.sort(key=lambda r: order[id(r[0])])
    return results
