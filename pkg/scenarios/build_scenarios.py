"""Regenerate the shipped meshes and scenario files.

Run from anywhere: ``python scenarios/build_scenarios.py``. Node ids in
the liver-analog scenarios are picked geometrically here, so the chosen
sets are documented by this script.
"""
from pathlib import Path

import numpy as np
import yaml

from modalshape.harness import BasisCache, loop_gain_eigenvalues, prepare
from modalshape.mesh import EllipsoidSpec, generate_box_mesh, lumpy_ellipsoid_mesh, write_mesh
from modalshape.scenario import scenario_from_dict

ROOT = Path(__file__).resolve().parent

LIVER_SPEC = EllipsoidSpec(5.0, 4.0, 3.0, n_lat=12, n_lon=8, n_rad=2)   # 181 nodes
LIVER_SEED = 3

BAR_SIZE = [0.06, 0.09, 0.005]
BAR_DIV = [6, 9, 1]
BLACK_MESH = [0.03, 0.045, 0.0025]

CACHE = BasisCache()
BENCH_GAIN = []


def _write(rel, data):
    path = ROOT / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "# generated by build_scenarios.py\n"
    path.write_text(header + yaml.safe_dump(data, sort_keys=False, default_flow_style=None))


def _farthest(X, cand, count, first):
    out = [first]
    cand = np.asarray(cand)
    while len(out) < count:
        d = np.min(np.linalg.norm(X[cand][:, None] - X[out][None], axis=2), axis=1)
        out.append(int(cand[int(np.argmax(d))]))
    return out


def liver_sets(mesh):
    X = mesh.nodes
    surf = mesh.surface_nodes()
    by = lambda key: [int(i) for i in sorted(surf, key=key)]
    manip = by(lambda i: -X[i, 0])[0]                         # right tip
    manip2 = by(lambda i: -X[i, 1])[0]                        # back lobe
    manip3 = by(lambda i: -(X[i, 0] + X[i, 2]))               # upper right
    manip3 = next(i for i in manip3 if i not in (manip, manip2))
    fixed = {
        "a": by(lambda i: X[i, 0])[:3],                       # far left end
        "b": by(lambda i: X[i, 2])[:3],                       # underside
        "c": by(lambda i: X[i, 1])[:3],                       # front side
    }
    trap_fixed = by(lambda i: X[i, 1] - 0.5 * X[i, 0])[:3]    # front left
    taken = {manip, manip2, manip3, *fixed["a"], *fixed["b"], *fixed["c"], *trap_fixed}
    free = [int(i) for i in surf if i not in taken]
    front = sorted(free, key=lambda i: -X[i, 2])[:10]
    anchor = X[fixed["a"]].mean(axis=0)
    # near the constraints, skipping the ten closest, which hardly move
    by_anchor = sorted(free, key=lambda i: np.linalg.norm(X[i] - anchor))
    far = by_anchor[10:20]
    close = sorted(free, key=lambda i: np.linalg.norm(X[i] - X[manip]))[:10]
    spread = _farthest(X, free, 30, front[0])
    return dict(manip=[manip, manip2, manip3], fixed=fixed, front=front, far=far, close=close,
                spread=spread, trap_fixed=trap_fixed, trap_far=by_anchor[:10])


def sim_scenarios(mesh_rel, sets, center):
    base = dict(
        family="sim",
        plant_mesh=mesh_rel,
        plant_E=100.0, plant_v=0.49, plant_M=100.0,
        fixed_nodes=sets["fixed"]["a"],
        manip_nodes=sets["manip"][:1],
        sampling="nodes",
        sample_nodes=sets["front"],
        manip_displacement=[1.0, 1.0, 0.8],
        base_mesh="given",
        base_axes=[5.0, 4.0, 3.0],
        base_translation=[float(c) for c in center],
        base_E=50.0, base_v=0.45, base_M=20.0,
        m=30,
    )
    out = {"benchmark.yaml": dict(base, name="benchmark")}
    out["rest.yaml"] = dict(base, name="rest", manip_displacement=[0.0, 0.0, 0.0])
    for tag, (E, v, M) in {"e100": (100.0, 0.49, 100.0), "e1000": (1000.0, 0.48, 3000.0),
                           "e5000": (5000.0, 0.47, 100.0), "e50000": (50000.0, 0.4, 3000.0)}.items():
        out[f"sim/material/{tag}.yaml"] = dict(base, name=f"material-{tag}", plant_E=E, plant_v=v, plant_M=M)
    for tag in ("a", "b", "c"):
        out[f"sim/boundary/fixed_{tag}.yaml"] = dict(base, name=f"boundary-{tag}", fixed_nodes=sets["fixed"][tag])
    for tag in ("front", "far", "close"):
        out[f"sim/sampling/{tag}.yaml"] = dict(base, name=f"sampling-{tag}", sample_nodes=sets[tag])
    # sets that drive the transpose law into a local minimum (stall, exit 2)
    out["sim/local_minimum/fixed_front_left.yaml"] = dict(base, name="trap-fixed", fixed_nodes=sets["trap_fixed"],
                                                          max_ticks=3000)
    out["sim/local_minimum/samples_at_constraints.yaml"] = dict(base, name="trap-samples",
                                                                sample_nodes=sets["trap_far"], max_ticks=3000)
    for k, tag in ((1, "one"), (2, "two"), (3, "three")):
        out[f"sim/manip/{tag}.yaml"] = dict(base, name=f"manip-{tag}", manip_nodes=sets["manip"][:k])
    for m in (3, 6, 30, 90):
        out[f"sim/modes/m{m}.yaml"] = dict(base, name=f"modes-{m}", m=m, sample_nodes=sets["spread"])
    return out


def limit_loop_gain(rel, data):
    """Keep K_s unless the initial discrete loop gain exceeds the explicit
    Euler bound of 2; then scale K_s to the benchmark's gain."""
    sc = scenario_from_dict(data, ROOT / rel)
    gain = loop_gain_eigenvalues(prepare(sc, CACHE)).real.max()
    if gain <= 2.0:
        return data, gain
    K_s = float(f"{sc.K_s * BENCH_GAIN[0] / gain:.3g}")
    return dict(data, K_s=K_s), gain


def bar_scenarios():
    X = generate_box_mesh(BAR_SIZE, BAR_DIV).nodes
    fixed = [int(i) for i in np.flatnonzero(X[:, 1] < 1e-9)]
    tip = np.flatnonzero((X[:, 1] > BAR_SIZE[1] - 1e-9) & (X[:, 2] > BAR_SIZE[2] - 1e-9))
    manip = [int(tip[len(tip) // 2])]
    base = dict(
        family="experiment",
        plant_box=BAR_SIZE, plant_box_divisions=BAR_DIV,
        plant_E=1.0e5, plant_v=0.45, plant_M=0.05,
        fixed_nodes=fixed, manip_nodes=manip,
        sampling="contour", n_samples=20,
        manip_displacement=[0.02, -0.01, 0.015],
        base_mesh="given", base_axes=BLACK_MESH,
        base_E=1.0e9, base_v=0.4, base_M=0.05,
        m=15,
        Gamma=1.0,
    )
    out = {}
    sizes = [[0.015, 0.05, 0.0075], [0.0175, 0.025, 0.001], BLACK_MESH, [0.001, 0.055, 0.001]]
    for i, a in enumerate(sizes, 1):
        out[f"experiment/size/s{i}.yaml"] = dict(base, name=f"size-{i}", base_axes=a)
    poses = [((-30, -30, -30), (0, 0, -0.02)), ((45, 45, 45), (0, 0, 0)), ((90, 0, 0), (0, 0, 0)),
             ((90, 90, 90), (0, 0, 0)), ((30, 30, 30), (-0.1, -0.1, -0.12)),
             ((75, 90, -20), (-0.1, -0.05, -0.25))]
    for i, (eu, t) in enumerate(poses, 1):
        out[f"experiment/pose/p{i}.yaml"] = dict(base, name=f"pose-{i}", base_euler_deg=list(eu),
                                                 base_offset=list(t))
    out["experiment/occlusion.yaml"] = dict(
        base, name="occlusion", tol_rel=1e-6,
        events=["4 lose 0 1 2", "8 lose 9 10 11", "12 lose 15 16", "20 restore 0 1 2 9 10 11 15 16"])
    out["experiment/estimated.yaml"] = dict(base, name="estimated-base", base_mesh="estimate",
                                            base_a_z=BLACK_MESH[2])
    out["compare/good.yaml"] = dict(base, name="compare-good", m=20)
    out["compare/bad.yaml"] = dict(base, name="compare-bad", m=20, sampling="contour_levels")
    return out


def main():
    liver = lumpy_ellipsoid_mesh(LIVER_SPEC, amplitude=0.15, seed=LIVER_SEED)
    write_mesh(liver, ROOT / "meshes" / "liver_analog.mesh")
    files = {}
    sets = liver_sets(liver)
    for rel, data in sim_scenarios("meshes/liver_analog.mesh", sets, liver.center).items():
        # plant mesh paths are relative to each scenario file
        depth = rel.count("/")
        files[rel] = dict(data, plant_mesh="../" * depth + data["plant_mesh"])
    files.update(bar_scenarios())
    BENCH_GAIN.append(loop_gain_eigenvalues(prepare(scenario_from_dict(files["benchmark.yaml"], ROOT / "x"),
                                                    CACHE)).real.max())
    for rel in sorted(files):
        if rel.startswith("sim/") and "local_minimum" not in rel:
            files[rel], gain = limit_loop_gain(rel, files[rel])
            if "K_s" in files[rel]:
                print(f"{rel}: loop gain {gain:.2f} > 2, K_s -> {files[rel]['K_s']}")
    for rel, data in files.items():
        _write(rel, data)
    print(f"wrote {len(files)} scenarios")


if __name__ == "__main__":
    main()
