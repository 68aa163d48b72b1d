"""Yaw-augmented constant-acceleration extended Kalman filter.

The 11-dimensional state is [world position (3), body-frame velocity (3),
body-frame acceleration (3), yaw, yaw rate].  Each slot runs a prediction and
up to two sequential updates: a strong 7-dimensional pseudo-measurement built
from the previously authenticated decoded state (position, body velocity,
yaw), then a weak constraint from the current slot's sensed position and
Doppler-derived speed.  Measurement and process noise are never hand-tuned;
they are tracked online by exponentially smoothed residual outer products
with a positive-semidefinite projection (covariance matching).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .scenario import wrap_angle, yaw_rotation

log = logging.getLogger(__name__)

STATE_DIM = 11
DECODED_DIM = 7
SENSED_DIM = 4

R_FLOOR = 1e-6  # keeps the innovation matrix invertible after PSD projection

# Fading-memory guard: the covariance-matching recursion estimates R from
# the latest residuals, so a growing tracking error raises R and lowers the
# gain exactly when stronger corrections are needed; left alone this race
# can diverge.  When the normalized innovation squared exceeds NIS_GATE per
# measurement dimension, the prior covariance is inflated by the excess so
# the gain recovers on the spot.
NIS_GATE = 5.0

DEFAULT_E0 = np.diag(
    [100.0, 100.0, 100.0, 25.0, 25.0, 25.0, 4.0, 4.0, 4.0, (math.pi / 8) ** 2, 0.04]
)
DEFAULT_Q0_SCALE = 1e-2
DEFAULT_W0_SCALE = 1e-2

# Matched-covariance adaptation feeds on its own corrections (w = K r), so a
# freshly converged filter with small gain stops exciting W and Q decays to
# zero, freezing the gain permanently; worse, the indirectly observed states
# (body acceleration, turn rate) only receive corrections through cross
# covariances that vanish when Q underestimates their real variability, after
# which heading errors get blamed on the yaw measurement and the filter
# diverges.  The floor is therefore sized to a maximum-maneuver slot: ~1
# m/s^2 of commanded-acceleration change and ~0.4 rad/s of turn-rate change.
DEFAULT_Q_FLOOR = np.diag(
    [0.09, 0.09, 0.09, 0.09, 0.09, 0.09, 1.0, 1.0, 1.0, 2.5e-3, 0.16]
)


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

def transition(state: np.ndarray, dt: float, wrap: bool = True) -> np.ndarray:
    """One constant-acceleration step of the yaw-augmented model.

    ``wrap=False`` keeps the yaw unwrapped, which makes the map smooth for
    finite-difference checks; the filter itself always wraps.
    """
    p, v, a = state[0:3], state[3:6], state[6:9]
    psi, omega = state[9], state[10]
    rot = yaw_rotation(psi)
    out = np.empty(STATE_DIM)
    out[0:3] = p + rot @ v * dt + 0.5 * rot @ a * dt * dt
    out[3:6] = v + a * dt
    out[6:9] = a
    out[9] = wrap_angle(psi + omega * dt) if wrap else psi + omega * dt
    out[10] = omega
    return out


def jacobian_f(state: np.ndarray, dt: float) -> np.ndarray:
    """Analytic state-transition Jacobian of :func:`transition`."""
    v_f, v_r = state[3], state[4]
    a_f, a_r = state[6], state[7]
    psi = state[9]
    c, s = math.cos(psi), math.sin(psi)
    rot = yaw_rotation(psi)

    F = np.zeros((STATE_DIM, STATE_DIM))
    F[0:3, 0:3] = np.eye(3)
    F[0:3, 3:6] = dt * rot
    F[0:3, 6:9] = 0.5 * dt * dt * rot
    F[0, 9] = (-v_f * s - v_r * c) * dt - (a_f * s + a_r * c) * 0.5 * dt * dt
    F[1, 9] = (v_f * c - v_r * s) * dt + (a_f * c - a_r * s) * 0.5 * dt * dt
    F[3:6, 3:6] = np.eye(3)
    F[3:6, 6:9] = dt * np.eye(3)
    F[6:9, 6:9] = np.eye(3)
    F[9, 9] = 1.0
    F[9, 10] = dt
    F[10, 10] = 1.0
    return F


def decoded_jacobian() -> np.ndarray:
    """7x11 selector of [position, body velocity, yaw]."""
    M = np.zeros((DECODED_DIM, STATE_DIM))
    M[0:3, 0:3] = np.eye(3)
    M[3:6, 3:6] = np.eye(3)
    M[6, 9] = 1.0
    return M


def sensed_jacobian(state: np.ndarray) -> np.ndarray:
    """4x11 (or 3x11 at zero speed) Jacobian of [position, speed].

    The speed row differentiates ||v_body||; its yaw entry is identically
    zero because the body-to-world rotation preserves the norm.
    """
    M = np.zeros((SENSED_DIM, STATE_DIM))
    M[0:3, 0:3] = np.eye(3)
    v = state[3:6]
    speed = float(np.linalg.norm(v))
    if speed <= 0.0:
        return M[:3]
    M[3, 3:6] = v / speed
    M[3, 9] = 0.0  # the d speed / d yaw term cancels exactly
    return M


def psd_project(A: np.ndarray) -> np.ndarray:
    """Nearest (Frobenius) symmetric positive-semidefinite matrix: symmetrize,
    clamp negative eigenvalues at zero, reconstruct."""
    sym = 0.5 * (A + A.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals[0] >= 0.0:
        return sym
    return (vecs * np.maximum(vals, 0.0)) @ vecs.T


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------

@dataclass
class DecodedMeasurement:
    """Strong pseudo-measurement [p, v_body, psi] from the previous
    authenticated payload propagated one slot forward."""

    z1: np.ndarray

    @classmethod
    def from_previous_state(cls, state11: np.ndarray, dt: float) -> "DecodedMeasurement":
        propagated = transition(np.asarray(state11, dtype=float), dt)
        return cls(z1=decoded_jacobian() @ propagated)


@dataclass
class SensedMeasurement:
    """Weak constraint from the current capture: position and optional speed."""

    position: np.ndarray
    speed: float | None = None

    @property
    def speed_present(self) -> bool:
        return self.speed is not None

    def vector(self) -> np.ndarray:
        if self.speed_present:
            return np.concatenate([self.position, [self.speed]])
        return np.asarray(self.position, dtype=float)


# ---------------------------------------------------------------------------
# adaptive noise state
# ---------------------------------------------------------------------------

@dataclass
class NoiseChannel:
    """Residual/observation covariance pair for one measurement type.

    ``r_floor`` lower-bounds the adapted observation noise diagonal.  Without
    it the covariance-matching recursion can drive R to (numerically) zero on
    the first update, collapse E, and then lock the gain near zero for good
    once residuals inflate S; a floor at the scale of the measurement's own
    noise keeps the loop in its stable regime while adaptation still rules
    above the floor.
    """

    S: np.ndarray
    R: np.ndarray
    r_floor: np.ndarray


# The smoothed S is dominated by the latest residual outer product (~rank
# one), so the projected R leaves directions orthogonal to the current
# residual at the floor; floors must therefore sit at each channel's real
# noise scale or those directions get wildly over-trusted.  Decoded states
# carry navigation-grade noise (metres); sensed positions carry beam-grid and
# gain-regression errors of tens to hundreds of metres, worst vertically.
DECODED_R_FLOOR = np.array([9.0, 9.0, 9.0, 0.25, 0.25, 0.25, 2.5e-3])
SENSED_R_FLOOR = np.array([900.0, 900.0, 2500.0, 1.0])


@dataclass
class FilterNoise:
    """Estimation-error, process, and per-channel observation covariances."""

    E: np.ndarray = field(default_factory=lambda: DEFAULT_E0.copy())
    Q: np.ndarray = field(default_factory=lambda: DEFAULT_Q0_SCALE * np.eye(STATE_DIM))
    W: np.ndarray = field(default_factory=lambda: DEFAULT_W0_SCALE * np.eye(STATE_DIM))
    alpha: float = 0.2
    beta: float = 0.3
    q_floor: np.ndarray = field(default_factory=lambda: DEFAULT_Q_FLOOR.copy())
    decoded: NoiseChannel = field(
        default_factory=lambda: NoiseChannel(
            np.eye(DECODED_DIM), np.eye(DECODED_DIM), DECODED_R_FLOOR.copy()
        )
    )
    sensed: NoiseChannel = field(
        default_factory=lambda: NoiseChannel(
            np.eye(SENSED_DIM), np.eye(SENSED_DIM), SENSED_R_FLOOR.copy()
        )
    )


def _assert_psd(E: np.ndarray, what: str) -> None:
    if not np.allclose(E, E.T, atol=1e-8):
        raise ValueError(f"{what} covariance lost symmetry")
    if np.linalg.eigvalsh(E)[0] < -1e-9:
        raise ValueError(f"{what} covariance is not positive semidefinite")


def predict(state: np.ndarray, noise: FilterNoise, dt: float):
    """State and covariance propagation: x <- f(x), E <- F E F^T + Q."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    _assert_psd(noise.E, "prior")
    F = jacobian_f(state, dt)
    pred_state = transition(state, dt)
    pred_E = F @ noise.E @ F.T + noise.Q
    return pred_state, pred_E


def update(
    state: np.ndarray,
    E: np.ndarray,
    z: np.ndarray,
    M: np.ndarray,
    noise: FilterNoise,
    channel: str,
    angle_rows: tuple = (),
):
    """One covariance-matching EKF update.

    Runs, in order: residual, residual-covariance smoothing
    S <- a S + (1-a) r r^T, observation noise R = PSD(S - M E M^T) (plus a
    small diagonal floor), gain, state correction, process-residual smoothing
    W <- b W + (1-b) w w^T with Q = PSD(W), and the Joseph-form covariance
    update.  ``angle_rows`` marks residual components that live on the circle
    and are wrapped before use.  When the measurement carries fewer rows than
    the channel's running S (dropped speed), only the matching leading block
    is smoothed and read.
    """
    z = np.asarray(z, dtype=float)
    dim = len(z)
    chan = getattr(noise, channel)

    r = z - M @ state
    for row in angle_rows:
        r[row] = wrap_angle(r[row])

    S_full = chan.S
    S_blk = noise.alpha * S_full[:dim, :dim] + (1.0 - noise.alpha) * np.outer(r, r)
    S_full[:dim, :dim] = S_blk
    R = psd_project(S_blk - M @ E @ M.T) + np.diag(chan.r_floor[:dim] + R_FLOOR)
    chan.R[:dim, :dim] = R

    innovation = M @ E @ M.T + R
    nis = float(r @ np.linalg.solve(innovation, r))
    if nis > NIS_GATE * dim:
        E = E * (nis / (NIS_GATE * dim))
        innovation = M @ E @ M.T + R

    EMt = E @ M.T
    try:
        K = np.linalg.solve(innovation, EMt.T).T
    except np.linalg.LinAlgError:
        log.warning("singular innovation matrix; regularizing")
        K = np.linalg.solve(innovation + 1e-9 * np.eye(dim), EMt.T).T

    w = K @ r
    new_state = state + w
    if len(new_state) > 9:
        new_state[9] = wrap_angle(new_state[9])

    noise.W = noise.beta * noise.W + (1.0 - noise.beta) * np.outer(w, w)
    noise.Q = psd_project(noise.W) + noise.q_floor

    IKM = np.eye(len(state)) - K @ M
    new_E = IKM @ E @ IKM.T + K @ R @ K.T
    return new_state, new_E, noise


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------

class YawCaEkf:
    """Single-drone track: mutable state plus adaptive noise, one owner."""

    def __init__(self, initial_state, dt: float, alpha: float = 0.2, beta: float = 0.3):
        self.x = np.asarray(initial_state, dtype=float).copy()
        self.x[9] = wrap_angle(self.x[9])
        self.dt = dt
        self.noise = FilterNoise(alpha=alpha, beta=beta)

    def step(self, decoded: DecodedMeasurement | None, sensed: SensedMeasurement | None):
        """Predict, then strong (decoded) and weak (sensed) sequential updates.

        Returns the position estimate and its 3x3 covariance block for the
        fusion stage.  Either measurement may be absent (quarantined decode,
        missed detection); prediction still runs.
        """
        state, E = predict(self.x, self.noise, self.dt)
        if decoded is not None:
            state, E, self.noise = update(
                state, E, decoded.z1, decoded_jacobian(), self.noise, "decoded", angle_rows=(6,)
            )
        if sensed is not None:
            M = sensed_jacobian(state)
            z = sensed.vector()
            if not sensed.speed_present or M.shape[0] == 3:
                M = M[:3]
                z = z[:3]
            state, E, self.noise = update(state, E, z, M, self.noise, "sensed")
        self.x = state
        self.noise.E = E
        return state[0:3].copy(), E[0:3, 0:3].copy()

    def position_covariance(self) -> np.ndarray:
        return self.noise.E[0:3, 0:3].copy()

    def snapshot(self) -> dict:
        """Loggable view of the track (state, covariance diagonal)."""
        return {
            "state": [float(v) for v in self.x],
            "E_diag": [float(v) for v in np.diag(self.noise.E)],
        }

    def clone(self) -> "YawCaEkf":
        """Deep copy used for shadow evaluations that must not mutate the track."""
        import copy

        return copy.deepcopy(self)


def step(track: YawCaEkf, decoded: DecodedMeasurement | None, sensed: SensedMeasurement | None):
    """Functional wrapper over :meth:`YawCaEkf.step`."""
    return track.step(decoded, sensed)
