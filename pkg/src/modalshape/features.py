"""Modal deformation features from 3D surface samplings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidInputError
from .mapping import FeatureProjector


@dataclass(frozen=True)
class SamplingSet:
    """Stacked sample positions ``[x0, y0, z0, x1, ...]`` in the base-mesh frame."""

    positions: np.ndarray
    timestamp: float = 0.0
    ids: tuple = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).ravel()
        if pos.size % 3:
            raise InvalidInputError(f"sample vector length {pos.size} is not a multiple of 3")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        ids = tuple(range(pos.size // 3)) if self.ids is None else tuple(self.ids)
        if len(ids) != pos.size // 3:
            raise InvalidInputError("one id per sample is required")
        object.__setattr__(self, "ids", ids)

    @property
    def points(self):
        return self.positions.reshape(-1, 3)


def resample_polyline(points, l, closed=False):
    """``l`` points at equal arc-length spacing along a polyline.

    Open polylines keep both endpoints. Closed ones start at the first
    vertex and space samples ``perimeter / l`` apart.
    """
    P = np.asarray(points, float).reshape(-1, 3)
    if len(P) < 2 or l < 2:
        raise DegenerateInputError("need at least 2 polyline points and l >= 2")
    if closed:
        P = np.vstack([P, P[:1]])
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if not total > 0:
        raise DegenerateInputError("polyline has zero length")
    if closed:
        targets = total * np.arange(l) / l
    else:
        targets = total * np.arange(l) / (l - 1)
        targets[-1] = total
    out = np.empty((l, 3))
    for i, s in enumerate(targets):
        j = int(np.searchsorted(cum, s, side="right")) - 1
        j = min(max(j, 0), len(seg) - 1)
        if s >= cum[j + 1]:
            out[i] = P[j + 1]
            continue
        a = (s - cum[j]) / seg[j]
        out[i] = P[j] if a == 0 else P[j] + a * (P[j + 1] - P[j])
    return out.ravel()


def compute_features(proj: FeatureProjector, samples) -> np.ndarray:
    """``D_Phi D_N (x - x(eta))`` for the samples matching ``proj``."""
    x = samples.positions if isinstance(samples, SamplingSet) else np.asarray(samples, float).ravel()
    if x.size != proj.rest_eta.size:
        raise InvalidInputError(
            f"{x.size // 3} samples supplied, projector expects {proj.n_points}")
    if isinstance(samples, SamplingSet) and proj.sample_ids and samples.ids != proj.sample_ids:
        raise InvalidInputError("sample ids do not match the projector")
    u = x - proj.rest_eta
    return proj.D_Phi @ (proj.D_N @ u)


def feature_error(s, s_star) -> np.ndarray:
    s = np.asarray(s, float)
    s_star = np.asarray(s_star, float)
    if s.shape != s_star.shape:
        raise InvalidInputError(f"feature dimensions differ: {s.shape} vs {s_star.shape}")
    return s - s_star


def error_norm(e) -> float:
    e = np.asarray(e, float)
    return float(np.sqrt(e @ e))
