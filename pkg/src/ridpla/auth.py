"""Estimator fusion, threshold learning, and the per-slot verdict.

A frame passes only when every check does: the payload decoded (CRC), the
eigenvalue-based transmit-antenna count matches the claimed drone type, the
fused trajectory stays clear of no-fly zones, and the claimed position sits
within the learned distance threshold of the fused estimate.  A failed slot
is quarantined: its decoded state must not feed the next slot's strong EKF
update or the prediction window.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .phy import DRONE_TYPE_ANTENNAS
from .scenario import NoFlyZone, segment_intersects_nfz
from .sensing import SensingReport


@dataclass
class FusionInput:
    p_ekf: np.ndarray
    E_ekf: np.ndarray
    p_lstm: np.ndarray | None = None
    E_lstm: np.ndarray | None = None


@dataclass
class Threshold:
    gamma: float
    target_pfa: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


def _check_psd(A: np.ndarray, name: str) -> None:
    if not np.allclose(A, A.T, atol=1e-8) or np.linalg.eigvalsh(A)[0] < -1e-9:
        raise ValueError(f"{name} must be symmetric positive semidefinite")


def fuse(inp: FusionInput):
    """Error-aware combination of the two position estimators.

    p = p_ekf + A (p_lstm - p_ekf) with the matrix gain
    A = E_ekf (E_ekf + E_lstm)^-1, and the fused covariance (I - A) E_ekf.
    A missing LSTM estimate forces A = 0 (pure EKF).
    """
    _check_psd(inp.E_ekf, "E_ekf")
    if inp.p_lstm is None:
        return np.asarray(inp.p_ekf, dtype=float).copy(), inp.E_ekf.copy()
    _check_psd(inp.E_lstm, "E_lstm")
    total = inp.E_ekf + inp.E_lstm
    try:
        gain = np.linalg.solve(total.T, inp.E_ekf.T).T
    except np.linalg.LinAlgError:
        gain = np.linalg.solve(total.T + 1e-9 * np.eye(3), inp.E_ekf.T).T
    p = inp.p_ekf + gain @ (np.asarray(inp.p_lstm) - np.asarray(inp.p_ekf))
    E = (np.eye(3) - gain) @ inp.E_ekf
    return p, E


def learn_threshold(legit_distances, target_pfa: float = 0.05) -> Threshold:
    """Nearest-rank (1 - target_pfa) quantile of the legitimate distances."""
    dists = np.sort(np.asarray(list(legit_distances), dtype=float))
    if len(dists) == 0:
        raise ValueError("no legitimate distances to learn from")
    rank = int(math.ceil((1.0 - target_pfa) * len(dists)))
    gamma = float(dists[min(max(rank, 1), len(dists)) - 1])
    return Threshold(gamma=gamma, target_pfa=target_pfa)


def check_location(claimed, fused, gamma: float):
    """Pass iff the claimed position lies strictly inside the gamma ball."""
    distance = float(np.linalg.norm(np.asarray(claimed, dtype=float) - np.asarray(fused, dtype=float)))
    return distance < gamma, distance


def check_antennas(nt_hat: int, claimed_type) -> bool:
    """Closed-world check: unknown types fail."""
    expected = DRONE_TYPE_ANTENNAS.get(claimed_type)
    return expected is not None and nt_hat == expected


def check_nfz(prev_fused, fused, zones) -> bool:
    """Pass iff the fused step's horizontal segment avoids every zone."""
    if prev_fused is None:
        prev_fused = fused
    for zone in zones:
        if segment_intersects_nfz(np.asarray(prev_fused)[:2], np.asarray(fused)[:2], zone):
            return False
    return True


@dataclass
class AuthVerdict:
    D: bool
    distance_stat: float
    checks: dict
    gamma_used: float
    p_claimed: np.ndarray | None = None
    p_fused: np.ndarray | None = None

    def to_record(self, t: int, uuid_hex: str) -> dict:
        return {
            "t": t,
            "uuid": uuid_hex,
            "D": int(self.D),
            "distance": None if math.isinf(self.distance_stat) else self.distance_stat,
            "gamma": self.gamma_used,
            "checks": {k: int(v) for k, v in self.checks.items()},
            "p_claimed": None if self.p_claimed is None else [float(v) for v in self.p_claimed],
            "p_fused": None if self.p_fused is None else [float(v) for v in self.p_fused],
        }


def authenticate(
    report: SensingReport,
    fused_position,
    prev_fused,
    zones,
    threshold: Threshold,
) -> AuthVerdict:
    """Combine the per-slot checks into the final verdict (logical AND).

    An undecodable frame fails the decode check and, lacking any claim to
    verify, the dependent checks as well; its distance statistic is infinite
    so it is rejected at every threshold.
    """
    checks = {"decode": report.decode_ok, "antenna": False, "nfz": True, "location": False}
    distance = math.inf
    claimed = None
    if report.decode_ok:
        claimed = report.decoded.position
        checks["antenna"] = check_antennas(report.nt_hat, report.decoded.drone_type)
        checks["location"], distance = check_location(claimed, fused_position, threshold.gamma)
    checks["nfz"] = check_nfz(prev_fused, fused_position, zones)
    verdict = all(checks.values())
    return AuthVerdict(
        D=verdict,
        distance_stat=distance,
        checks=checks,
        gamma_used=threshold.gamma,
        p_claimed=None if claimed is None else np.asarray(claimed, dtype=float),
        p_fused=np.asarray(fused_position, dtype=float),
    )


def write_verdicts_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
