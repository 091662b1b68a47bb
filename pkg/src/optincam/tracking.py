"""Unscented Kalman filtering of tag positions with NLoS-switched observation noise.

State is (x, v_x, y, v_y, z): constant velocity on the ground plane,
constant position for height. The observation model is the anchor-frame
polar conversion from the geometry module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .errors import (
    CovarianceNotPD,
    EmptyInput,
    NonMonotonicTimestamps,
    NonPositiveDt,
)
from .geometry import AnchorPose, PolarMeasurement, anchor_polar_to_world, wrap_angle

# scaled unscented transform parameters (Merwe defaults)
UKF_ALPHA = 1e-3
UKF_BETA = 2.0
UKF_KAPPA = 0.0

_POS_IDX = np.array([0, 2, 4])  # (x, y, z) entries of the state


@dataclass
class UkfState:
    mean: np.ndarray  # (5,)
    cov: np.ndarray  # (5, 5)
    timestamp: float

    def position(self) -> np.ndarray:
        return self.mean[_POS_IDX]

    def position_cov(self) -> np.ndarray:
        return self.cov[np.ix_(_POS_IDX, _POS_IDX)]


@dataclass
class NoiseModel:
    """Diagonal observation covariances for LoS/NLoS plus process-noise variances."""

    r_los: np.ndarray  # (3, 3) diagonal
    r_nlos: np.ndarray  # (3, 3) diagonal
    q_velocity_var: float = 4.0
    q_height_var: float = 0.25

    def __post_init__(self):
        self.r_los = _as_diag3(self.r_los)
        self.r_nlos = _as_diag3(self.r_nlos)

    @classmethod
    def hand_designed(cls) -> "NoiseModel":
        """Assumed errors: 0.5 m / 10 deg (LoS), 5.0 m / 45 deg (NLoS), squared."""
        a10, a45 = math.radians(10.0), math.radians(45.0)
        return cls(
            r_los=np.diag([0.5**2, a10**2, a10**2]),
            r_nlos=np.diag([5.0**2, a45**2, a45**2]),
        )


def _as_diag3(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape == (3,):
        m = np.diag(m)
    if m.shape != (3, 3):
        raise ValueError("observation covariance must be 3x3 or a 3-vector diagonal")
    if np.any(m.diagonal() < 0) or np.any(m[~np.eye(3, dtype=bool)] != 0):
        raise ValueError("observation covariance must be diagonal PSD")
    return m


@dataclass(frozen=True)
class UwbSample:
    tag_id: str
    timestamp: float
    z: PolarMeasurement
    features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float))


@dataclass
class InitPolicy:
    """Initial state construction from the first measurement."""

    pos_var: float = 1.0
    vel_var: float = 4.0
    height_var: float = 0.25

    def initial_state(self, sample: UwbSample, pose: AnchorPose) -> UkfState:
        p = anchor_polar_to_world(sample.z, pose)
        mean = np.array([p[0], 0.0, p[1], 0.0, p[2]])
        cov = np.diag([self.pos_var, self.vel_var, self.pos_var, self.vel_var, self.height_var])
        return UkfState(mean=mean, cov=cov, timestamp=sample.timestamp)


def process_noise(dt: float, q_v: float, q_z: float) -> np.ndarray:
    """Block-diagonal discrete-white-noise Q for the 5-dim state."""
    if dt <= 0:
        raise NonPositiveDt(f"dt must be > 0, got {dt}")
    block = np.array([[dt**4 / 4, dt**3 / 2], [dt**3 / 2, dt**2]])
    Q = np.zeros((5, 5))
    Q[0:2, 0:2] = q_v * block
    Q[2:4, 2:4] = q_v * block
    Q[4, 4] = q_z * dt**2
    return Q


def transition_matrix(dt: float) -> np.ndarray:
    F = np.eye(5)
    F[0, 1] = dt
    F[2, 3] = dt
    return F


def predict(state: UkfState, dt: float, noise: NoiseModel) -> UkfState:
    """Constant-velocity (x, y) / constant-position (z) prediction.

    The motion model is linear, so linear propagation is exact here.
    """
    if dt <= 0:
        raise NonPositiveDt(f"dt must be > 0, got {dt}")
    F = transition_matrix(dt)
    Q = process_noise(dt, noise.q_velocity_var, noise.q_height_var)
    mean = F @ state.mean
    cov = F @ state.cov @ F.T + Q
    cov = (cov + cov.T) / 2
    return UkfState(mean=mean, cov=cov, timestamp=state.timestamp + dt)


def _floor_to_pd(cov: np.ndarray, floor: float = 1e-9) -> np.ndarray:
    """Clamp eigenvalues from below so the covariance stays positive definite.

    The measurement downdate P - K S Kᵀ can overshoot into indefiniteness when
    a wildly-biased angular measurement lands near the wrap boundary and the
    sigma-point statistics misestimate the innovation covariance; flooring the
    spectrum keeps the filter running through such samples.
    """
    try:
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        vals = np.maximum(vals, floor)
        return (vecs * vals) @ vecs.T


def _cholesky_with_jitter(m: np.ndarray) -> np.ndarray:
    jitter = 0.0
    for attempt in range(4):
        try:
            return np.linalg.cholesky(m + jitter * np.eye(m.shape[0]))
        except np.linalg.LinAlgError:
            jitter = 1e-9 if jitter == 0.0 else jitter * 10
    raise CovarianceNotPD("Cholesky factorization failed after jitter")


def _sigma_points(mean: np.ndarray, cov: np.ndarray):
    n = mean.size
    lam = UKF_ALPHA**2 * (n + UKF_KAPPA) - n
    L = _cholesky_with_jitter((n + lam) * cov)
    pts = np.empty((2 * n + 1, n))
    pts[0] = mean
    pts[1 : n + 1] = mean + L.T
    pts[n + 1 :] = mean - L.T
    wm = np.full(2 * n + 1, 1.0 / (2 * (n + lam)))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = lam / (n + lam) + (1 - UKF_ALPHA**2 + UKF_BETA)
    return pts, wm, wc


def update(state: UkfState, z: PolarMeasurement, pose: AnchorPose, R: np.ndarray) -> UkfState:
    """UKF measurement update through the polar observation model.

    Azimuth/elevation residuals are wrapped to (-pi, pi].
    """
    pts, wm, wc = _sigma_points(state.mean, state.cov)
    Z = geometry.world_to_anchor_polar_batch(pts[:, _POS_IDX], pose)
    # keep sigma-point angles on the same branch as the central point before averaging
    Z[:, 1:] = Z[0, 1:] + wrap_angle(Z[:, 1:] - Z[0, 1:])
    z_pred = wm @ Z
    dz = Z - z_pred
    dz[:, 1:] = wrap_angle(dz[:, 1:])
    S = (dz.T * wc) @ dz + np.asarray(R, dtype=float)
    dx = pts - state.mean
    P_xz = (dx.T * wc) @ dz
    K = np.linalg.solve(S.T, P_xz.T).T
    innov = np.asarray(z.as_array()) - z_pred
    innov[1:] = wrap_angle(innov[1:])
    mean = state.mean + K @ innov
    cov = state.cov - K @ S @ K.T
    cov = (cov + cov.T) / 2
    cov = _floor_to_pd(cov)
    return UkfState(mean=mean, cov=cov, timestamp=state.timestamp)


def step(
    state: UkfState,
    sample: UwbSample,
    pose: AnchorPose,
    noise: NoiseModel,
    detector,
) -> Tuple[UkfState, bool]:
    """Predict to the sample time, then update with R switched on the NLoS detector.

    `detector` exposes is_nlos(features) -> bool; the branch taken is returned.
    """
    dt = sample.timestamp - state.timestamp
    predicted = predict(state, dt, noise)
    used_nlos = bool(detector.is_nlos(sample.features))
    R = noise.r_nlos if used_nlos else noise.r_los
    return update(predicted, sample.z, pose, R), used_nlos


def uncertainty_flag(state: UkfState, u_th: float) -> bool:
    """True iff the largest eigenvalue of the 3x3 position marginal exceeds u_th."""
    return bool(np.linalg.eigvalsh(state.position_cov())[-1] > u_th)


@dataclass
class TrajectoryPoint:
    timestamp: float
    position: np.ndarray
    position_cov: np.ndarray
    uncertain: bool


@dataclass
class TagTrajectory:
    """Filtered tag trajectory with query-at-time support for matching."""

    tag_id: str
    points: List[TrajectoryPoint]
    states: List[UkfState] = field(repr=False, default_factory=list)
    noise: Optional[NoiseModel] = field(repr=False, default=None)
    u_th: float = 1.5

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([p.timestamp for p in self.points])

    def query(self, t: float, align_tolerance: float = math.inf) -> Optional[TrajectoryPoint]:
        """Predicted position/cov at time t (pure prediction from the last posterior).

        Returns None if no sample lies within align_tolerance of t or t precedes
        the first sample by more than the tolerance.
        """
        ts = self.timestamps
        if ts.size == 0:
            return None
        nearest = float(np.min(np.abs(ts - t)))
        if nearest > align_tolerance:
            return None
        k = int(np.searchsorted(ts, t, side="right")) - 1
        if k < 0:
            # t precedes the first sample (within tolerance): use the first posterior
            state = self.states[0]
        else:
            state = self.states[k]
            if t > state.timestamp + 1e-12:
                state = predict(state, t - state.timestamp, self.noise)
        return TrajectoryPoint(
            timestamp=t,
            position=state.position(),
            position_cov=state.position_cov(),
            uncertain=uncertainty_flag(state, self.u_th),
        )


def track_tag(
    samples: Sequence[UwbSample],
    pose: AnchorPose,
    noise: NoiseModel,
    detector,
    init: Optional[InitPolicy] = None,
    u_th: float = 1.5,
) -> TagTrajectory:
    """Filter a tag's sample stream into a trajectory with per-step covariance."""
    if len(samples) == 0:
        raise EmptyInput("no samples")
    ts = np.array([s.timestamp for s in samples])
    if np.any(np.diff(ts) <= 0):
        raise NonMonotonicTimestamps("sample timestamps must be strictly increasing")
    init = init or InitPolicy()

    state = init.initial_state(samples[0], pose)
    states = [state]
    for sample in samples[1:]:
        state, _ = step(state, sample, pose, noise, detector)
        states.append(state)

    points = [
        TrajectoryPoint(
            timestamp=s.timestamp,
            position=st.position(),
            position_cov=st.position_cov(),
            uncertain=uncertainty_flag(st, u_th),
        )
        for s, st in zip(samples, states)
    ]
    return TagTrajectory(
        tag_id=samples[0].tag_id,
        points=points,
        states=states,
        noise=noise,
        u_th=u_th,
    )


class ConstantDetector:
    """Detector stub with a fixed decision; handy for tests and ablations."""

    def __init__(self, nlos: bool):
        self._nlos = nlos

    def is_nlos(self, features) -> bool:
        return self._nlos


class OracleDetector:
    """Detector that looks the answer up from a per-timestamp table."""

    def __init__(self, flags_by_key):
        self._flags = flags_by_key

    def is_nlos(self, features) -> bool:
        key = tuple(np.round(np.asarray(features, dtype=float), 9))
        return bool(self._flags.get(key, False))
