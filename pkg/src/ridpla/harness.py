"""End-to-end experiment orchestration.

A run proceeds in two phases.  The training phase generates its own
trajectories and captures to fit the gain-to-distance regressor (one per
transmit power), train the sequence predictor, precompute its error
covariance, and learn the decision threshold from legitimate distance
statistics.  The evaluation phase then runs Monte-Carlo trials: per slot it
simulates the legitimate capture (and a balanced replay attack), runs the
sensing stack, the two-stage EKF, the sequence predictor, error-aware fusion,
and the authentication checks, accumulating RMSE/MAPE per estimator, verdict
logs, ROC statistics for the proposed detector and the four classical
baselines, and a manifest sufficient to reproduce every byte.

Trials are embarrassingly parallel; each owns its filter, window, and RNG
streams, all derived from the experiment seed, so results do not depend on
scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
import yaml

from . import __version__
from .auth import AuthVerdict, FusionInput, Threshold, authenticate, fuse, learn_threshold
from .ekf import DecodedMeasurement, SensedMeasurement, YawCaEkf
from .errors import ConfigurationError, NoFrameDetected
from .neural import (
    ErrorCov3,
    NetParams,
    TrainConfig,
    error_cov_from_dataset,
    predict_position,
    train,
    update_error_cov,
)
from .phy import (
    C_LIGHT,
    DRONE_TYPE_ANTENNAS,
    ChannelParams,
    FrameConfig,
    IqCapture,
    RidPayload,
    apply_channel,
    modulate_frame,
)
from .scenario import (
    AttackerTrace,
    Pose,
    ScenarioConfig,
    Trajectory,
    generate_legit_trajectory,
    scenario1_config,
    scenario2_config,
    spawn_attacker,
    wrap_angle,
)
from .sensing import (
    AcgRegressor,
    SensingContext,
    SensingReport,
    analyze_capture,
    position_from_sensing,
    train_acg_regressor,
)

BASELINE_NAMES = ("rss", "cfo", "snrd", "aoa_cg")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ReportNoise:
    """Std-dev of the drone's self-reported state (its own navigation error)."""

    position: float = 3.0
    velocity: float = 0.4
    acceleration: float = 0.3
    yaw: float = 0.03
    yaw_rate: float = 0.03


@dataclass
class ExperimentConfig:
    scenario: str = "curved"  # 'curved' (scenario 1) or 'line_then_spiral' (scenario 2)
    T: int = 300
    slot_duration: float = 1.0
    seed: int = 0
    n_trials: int = 50
    p_t_list: list = field(default_factory=lambda: [30.0])
    n_rx: int = 8
    n_ry: int = 8
    drone_type: int = 0
    attacker_n_t: int = 1
    f_c: float = 2.4e9
    # desk-scale numerology: half the subcarriers and bandwidth of the full
    # frame (same spacing, same frame duration) to fit the Monte-Carlo budget
    bandwidth: float = 7.68e6
    n_subcarriers: int = 512
    n_data_subcarriers: int = 300
    n_cp: int = 36
    n_sym: int = 8
    f_s: float | None = None  # None -> capture directly at rate B (desk scale)
    noise_power_dbm: float = -62.0  # desk-scale floor; Table-level physical value is -100
    rician_K_db: float = 3.0
    G_t_db: float = 2.0
    G_r_db: float = 30.0
    osc_offset_frac: float = 0.1  # per-drone oscillator offset, uniform +- frac * delta_f
    window_t1: int = 8
    alpha: float = 0.2
    beta: float = 0.3
    target_pfa: float = 0.05
    attacks: bool = True
    report_noise: ReportNoise = field(default_factory=ReportNoise)
    n_train_trajectories: int = 6
    train_slot_stride: int = 1
    lstm_epochs: int = 60
    lstm_batch: int = 64
    lstm_hidden: int = 128
    lstm_heads: int = 4
    aic_subcarriers: int = 48
    roc_grid_size: int = 101
    baselines: list = field(default_factory=lambda: list(BASELINE_NAMES))
    workers: int = 1
    out_dir: str = "results"
    log_tracks_trial: int = 0  # trial whose track states are exported; -1 disables
    accel_noise: float = 0.6
    phi_min: float = -0.2  # drones fly above ground; keeps the elevation grid tight
    origin: tuple | None = None  # scenario endpoint overrides (scaled-down runs)
    dest: tuple | None = None

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        noise = raw.pop("report_noise", None)
        cfg = cls(**raw)
        if noise:
            cfg.report_noise = ReportNoise(**noise)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def frame_config(self, n_t: int | None = None) -> FrameConfig:
        return FrameConfig(
            N=self.n_subcarriers,
            N_dc=self.n_data_subcarriers,
            N_vc=self.n_subcarriers - self.n_data_subcarriers,
            N_cp=self.n_cp,
            N_sym=self.n_sym,
            B=self.bandwidth,
            f_c=self.f_c,
            N_t=DRONE_TYPE_ANTENNAS[self.drone_type] if n_t is None else n_t,
            slot_duration=self.slot_duration,
        )

    def scenario_config(self) -> ScenarioConfig:
        if self.scenario == "curved":
            sc = scenario1_config(T=self.T, slot_duration=self.slot_duration)
        elif self.scenario == "line_then_spiral":
            sc = scenario2_config(T=self.T, slot_duration=self.slot_duration)
        else:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}")
        sc.accel_noise = self.accel_noise
        if self.origin is not None:
            sc.origin = tuple(self.origin)
        if self.dest is not None:
            sc.dest = tuple(self.dest)
            sc.control_point = None  # rescale the bow to the overridden chord
        return sc

    @property
    def bs_position(self) -> np.ndarray:
        return np.array([500.0, 500.0, 10.0])

    def attacker_region(self):
        lo = np.minimum(self.scenario_config().origin, self.scenario_config().dest)
        hi = np.maximum(self.scenario_config().origin, self.scenario_config().dest)
        return (np.array([lo[0], lo[1], 0.0]), np.array([hi[0], hi[1], max(hi[2], 150.0)]))


# ---------------------------------------------------------------------------
# seeded stream helpers
# ---------------------------------------------------------------------------

def _seed(*keys) -> int:
    ss = np.random.SeedSequence(list(keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63))


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


# ---------------------------------------------------------------------------
# per-slot simulation
# ---------------------------------------------------------------------------

def reported_payload(
    traj: Trajectory, t: int, uuid: bytes, drone_type: int, noise: ReportNoise, rng
) -> RidPayload:
    """The state the drone broadcasts: truth plus its own navigation noise."""
    pose, st = traj.poses[t - 1], traj.states[t - 1]
    return RidPayload(
        uuid=uuid,
        drone_type=drone_type,
        position=pose.position + noise.position * rng.standard_normal(3),
        v_body=st.v_body + noise.velocity * rng.standard_normal(3),
        a_body=st.a_body + noise.acceleration * rng.standard_normal(3),
        yaw=wrap_angle(pose.yaw + noise.yaw * rng.standard_normal()),
        yaw_rate=st.yaw_rate + noise.yaw_rate * rng.standard_normal(),
    )


def simulate_capture(
    cfg: ExperimentConfig,
    frame_cfg: FrameConfig,
    payload: RidPayload,
    position: np.ndarray,
    yaw: float,
    speed: float,
    p_t_dbm: float,
    osc_offset_hz: float,
    seed: int,
) -> IqCapture:
    tx = modulate_frame(payload, frame_cfg)
    params = ChannelParams(
        pose=Pose(np.asarray(position, dtype=float), yaw, 1),
        bs_position=cfg.bs_position,
        speed=speed,
        P_t_dbm=p_t_dbm,
        G_t_db=cfg.G_t_db,
        G_r_db=cfg.G_r_db,
        rician_K_db=cfg.rician_K_db,
        f_s=cfg.f_s if cfg.f_s else frame_cfg.B,
        noise_power_dbm=cfg.noise_power_dbm,
        N_rx=cfg.n_rx,
        N_ry=cfg.n_ry,
        oscillator_offset_hz=osc_offset_hz,
    )
    return apply_channel(tx, params, frame_cfg, seed)


@dataclass
class SlotRecord:
    """Everything one received frame contributes to tracking and baselines."""

    t: int
    kind: str  # 'legit' or 'attack'
    report: SensingReport | None
    truth_position: np.ndarray
    truth_speed: float
    replay_source: int = 0


@dataclass
class TrialSensing:
    trial: int
    p_t: float
    legit: list
    attack: list
    trajectory: Trajectory
    calibration_hz: float


def _finalize_report(report: SensingReport, regressor: AcgRegressor | None, bs_position):
    if report is None or regressor is None:
        return report
    report.distance_hat = regressor.predict(report.acg)
    report.pos_sense = position_from_sensing(
        report.distance_hat, report.theta_hat, report.phi_hat, bs_position
    )
    return report


def run_trial_sensing(
    cfg: ExperimentConfig,
    p_t: float,
    trial: int,
    regressor: AcgRegressor | None,
    seed_domain: int = 2000,
    with_attacks: bool | None = None,
) -> TrialSensing:
    """Simulate one trial's captures and run the sensing stack on each."""
    with_attacks = cfg.attacks if with_attacks is None else with_attacks
    sc = cfg.scenario_config()
    traj = generate_legit_trajectory(cfg.scenario, sc, _seed(cfg.seed, seed_domain, trial, 0))
    frame_cfg = cfg.frame_config()
    att_frame_cfg = cfg.frame_config(n_t=cfg.attacker_n_t)

    rng_misc = _rng(cfg.seed, seed_domain, trial, 1)
    uuid = rng_misc.bytes(16)
    delta_f = frame_cfg.delta_f
    osc_legit = float(rng_misc.uniform(-cfg.osc_offset_frac, cfg.osc_offset_frac) * delta_f)
    osc_attacker = float(rng_misc.uniform(-cfg.osc_offset_frac, cfg.osc_offset_frac) * delta_f)
    attacker_yaw = float(rng_misc.uniform(-math.pi, math.pi))
    rng_report = _rng(cfg.seed, seed_domain, trial, 2)

    trace = None
    if with_attacks:
        trace = spawn_attacker(traj, cfg.attacker_region(), _seed(cfg.seed, seed_domain, trial, 3))

    ctx = SensingContext(
        bs_position=cfg.bs_position,
        n_rx=cfg.n_rx,
        n_ry=cfg.n_ry,
        regressor=regressor,
        aic_subcarriers=cfg.aic_subcarriers,
        phi_lo=cfg.phi_min,
    )

    payloads = []
    legit_records, attack_records = [], []
    calibration = 0.0
    for t in range(1, len(traj) + 1):
        payload = reported_payload(traj, t, uuid, cfg.drone_type, cfg.report_noise, rng_report)
        payloads.append(payload)
        pose, st = traj.poses[t - 1], traj.states[t - 1]
        speed = float(np.linalg.norm(st.v_body))
        capture = simulate_capture(
            cfg, frame_cfg, payload, pose.position, pose.yaw, speed, p_t,
            osc_legit, _seed(cfg.seed, seed_domain, trial, 10, t),
        )
        try:
            report = analyze_capture(capture, frame_cfg, ctx, calibration)
        except NoFrameDetected:
            report = None
        if t == 1 and report is not None:
            # the first (stationary) slot isolates the oscillator offset
            calibration = delta_f * report.eps_hat
            report.fd_hat = delta_f * report.eps_hat - calibration
            report.speed_sense = None
        legit_records.append(
            SlotRecord(t, "legit", report, pose.position.copy(), speed)
        )

        if trace is not None and t in trace.active_slots:
            src = int(trace.replay_source[t - 1])
            att_pos = trace.true_position[t - 1]
            capture = simulate_capture(
                cfg, att_frame_cfg, payloads[src - 1], att_pos, attacker_yaw, 0.0,
                p_t, osc_attacker, _seed(cfg.seed, seed_domain, trial, 11, t),
            )
            try:
                att_report = analyze_capture(capture, att_frame_cfg, ctx, calibration)
            except NoFrameDetected:
                att_report = None
            attack_records.append(
                SlotRecord(t, "attack", att_report, att_pos.copy(), 0.0, replay_source=src)
            )

    return TrialSensing(
        trial=trial,
        p_t=p_t,
        legit=legit_records,
        attack=attack_records,
        trajectory=traj,
        calibration_hz=calibration,
    )


# ---------------------------------------------------------------------------
# tracking + authentication over one trial
# ---------------------------------------------------------------------------

@dataclass
class TrackingArtifacts:
    regressors: dict  # p_t -> AcgRegressor
    rss_regressors: dict  # p_t -> AcgRegressor on linear received power
    net: NetParams
    error_cov0: ErrorCov3
    threshold: Threshold
    train_history: list = field(default_factory=list)


@dataclass
class TrialResult:
    trial: int
    p_t: float
    truth: np.ndarray
    estimates: dict  # name -> (T, 3) with NaN rows when unavailable
    legit_dist: np.ndarray
    attack_dist: np.ndarray
    legit_D: np.ndarray
    attack_D: np.ndarray
    baseline_stats: dict
    verdict_records: list
    track_records: list


def run_tracking(
    sensing: TrialSensing,
    artifacts: TrackingArtifacts,
    cfg: ExperimentConfig,
    alpha: float | None = None,
    beta: float | None = None,
    log_tracks: bool = False,
) -> TrialResult:
    """Run the EKF + predictor + fusion + verdict chain over stored reports."""
    alpha = cfg.alpha if alpha is None else alpha
    beta = cfg.beta if beta is None else beta
    zones = cfg.scenario_config().zones
    threshold = artifacts.threshold
    T = len(sensing.legit)
    t1 = cfg.window_t1

    truth = np.stack([rec.truth_position for rec in sensing.legit])
    est = {name: np.full((T, 3), np.nan) for name in ("ekf", "lstm", "fused")}
    legit_dist = np.full(T, np.inf)
    legit_D = np.zeros(T, dtype=int)
    attack_dist = np.full(len(sensing.attack), np.inf)
    attack_D = np.zeros(len(sensing.attack), dtype=int)
    verdicts, tracks = [], []

    track: YawCaEkf | None = None
    last_auth: np.ndarray | None = None
    window: list = []
    cov = ErrorCov3(artifacts.error_cov0.sum_outer.copy(), artifacts.error_cov0.count)
    prev_fused: np.ndarray | None = None
    uuid_hex = ""

    attack_by_slot = {rec.t: (i, rec) for i, rec in enumerate(sensing.attack)}

    def lstm_predict():
        if len(window) < t1:
            return None, None
        pred = predict_position(np.stack(window[-t1:]), artifacts.net)
        return pred, cov.matrix() + 1e-6 * np.eye(3)

    for idx, rec in enumerate(sensing.legit):
        t = rec.t
        report = rec.report

        if track is None:
            # bootstrap: seed the filter from the first decodable frame
            if report is not None and report.decode_ok:
                state0 = report.decoded.state_vector()
                track = YawCaEkf(state0, cfg.slot_duration, alpha=alpha, beta=beta)
                uuid_hex = report.decoded.uuid.hex()
                p_fused = state0[0:3].copy()
                est["ekf"][idx] = p_fused
                est["fused"][idx] = p_fused
                verdict = authenticate(report, p_fused, prev_fused, zones, threshold)
                verdict.checks["location"] = True  # no estimate exists yet to test
                verdict.D = all(verdict.checks.values())
                legit_dist[idx] = 0.0
                legit_D[idx] = int(verdict.D)
                verdicts.append(verdict.to_record(t, uuid_hex) | {"stream": "legit"})
                if verdict.D:
                    last_auth = state0
                    window.append(state0)
                prev_fused = p_fused
            continue

        decoded_meas = (
            DecodedMeasurement.from_previous_state(last_auth, cfg.slot_duration)
            if last_auth is not None
            else None
        )
        sensed_meas = None
        if report is not None and report.pos_sense is not None:
            sensed_meas = SensedMeasurement(report.pos_sense, report.speed_sense)
        p_ekf, E_ekf = track.step(decoded_meas, sensed_meas)
        est["ekf"][idx] = p_ekf

        p_lstm, E_lstm = lstm_predict()
        if p_lstm is not None:
            est["lstm"][idx] = p_lstm
        p_fused, E_fused = fuse(FusionInput(p_ekf, E_ekf, p_lstm, E_lstm))
        est["fused"][idx] = p_fused

        if report is not None:
            verdict = authenticate(report, p_fused, prev_fused, zones, threshold)
        else:
            verdict = AuthVerdict(
                D=False,
                distance_stat=math.inf,
                checks={"decode": False, "antenna": False, "nfz": True, "location": False},
                gamma_used=threshold.gamma,
                p_fused=p_fused,
            )
        legit_dist[idx] = verdict.distance_stat
        legit_D[idx] = int(verdict.D)
        verdicts.append(verdict.to_record(t, uuid_hex) | {"stream": "legit"})

        if verdict.D and report is not None and report.decode_ok:
            last_auth = report.decoded.state_vector()
            window.append(last_auth)
            if len(window) > t1:
                window.pop(0)
            if p_lstm is not None:
                cov = update_error_cov(cov, p_lstm, p_fused)
        else:
            last_auth = None
            window.clear()

        if log_tracks:
            tracks.append({"t": t, "stream": "legit"} | track.snapshot())

        # balanced replay attack evaluated against a shadow copy of the track
        if t in attack_by_slot:
            ai, arec = attack_by_slot[t]
            if arec.report is not None:
                shadow = track.clone()
                sm = None
                if arec.report.pos_sense is not None:
                    sm = SensedMeasurement(arec.report.pos_sense, arec.report.speed_sense)
                dm = (
                    DecodedMeasurement.from_previous_state(last_auth, cfg.slot_duration)
                    if last_auth is not None
                    else None
                )
                sp_ekf, sE_ekf = shadow.step(dm, sm)
                sp_lstm, sE_lstm = lstm_predict()
                sp_fused, _ = fuse(FusionInput(sp_ekf, sE_ekf, sp_lstm, sE_lstm))
                averdict = authenticate(arec.report, sp_fused, prev_fused, zones, threshold)
                attack_dist[ai] = averdict.distance_stat
                attack_D[ai] = int(averdict.D)
                verdicts.append(averdict.to_record(t, uuid_hex) | {"stream": "attack"})
            else:
                verdicts.append(
                    {
                        "t": t, "uuid": uuid_hex, "D": 0, "distance": None,
                        "gamma": threshold.gamma,
                        "checks": {"decode": 0, "antenna": 0, "nfz": 1, "location": 0},
                        "p_claimed": None, "p_fused": None, "stream": "attack",
                    }
                )

        prev_fused = p_fused

    baseline_stats = {
        name: compute_baseline_stats(name, sensing, artifacts, cfg)
        for name in cfg.baselines
    }
    return TrialResult(
        trial=sensing.trial,
        p_t=sensing.p_t,
        truth=truth,
        estimates=est,
        legit_dist=legit_dist,
        attack_dist=attack_dist,
        legit_D=legit_D,
        attack_D=attack_D,
        baseline_stats=baseline_stats,
        verdict_records=verdicts,
        track_records=tracks,
    )


# ---------------------------------------------------------------------------
# classical baselines
# ---------------------------------------------------------------------------

def _claimed_of(report: SensingReport | None):
    if report is None or not report.decode_ok:
        return None
    return report.decoded


def compute_baseline_stats(name: str, sensing: TrialSensing, artifacts, cfg: ExperimentConfig):
    """Per-slot scalar consistency statistic for one classical detector.

    rss     |inferred distance - claimed distance| from received power
    cfo     |raw Doppler speed - claimed speed| (no oscillator calibration)
    snrd    |SNR(t) - SNR(previous legitimate slot)|
    aoa_cg  ||sensed position - claimed position||
    """
    if name not in BASELINE_NAMES:
        raise ConfigurationError(f"unknown baseline {name!r}")
    bs = cfg.bs_position
    rss_reg = artifacts.rss_regressors.get(sensing.p_t)
    legit, attack = [], []

    legit_snr = {}
    for rec in sensing.legit:
        if rec.report is not None:
            legit_snr[rec.t] = rec.report.snr_hat_db

    def stat_for(rec: SlotRecord):
        report = rec.report
        if report is None:
            return math.inf
        claimed = _claimed_of(report)
        if name == "snrd":
            prev = legit_snr.get(rec.t - 1)
            if prev is None or not np.isfinite(report.snr_hat_db):
                return None
            return abs(report.snr_hat_db - prev)
        if claimed is None:
            return math.inf
        if name == "rss":
            if rss_reg is None or not np.isfinite(report.snr_hat_db):
                return None
            noise_w = 10.0 ** ((cfg.noise_power_dbm - 30.0) / 10.0)
            power_lin = noise_w * 10.0 ** (report.snr_hat_db / 10.0)
            d_hat = rss_reg.predict(power_lin)
            return abs(d_hat - float(np.linalg.norm(claimed.position - bs)))
        if name == "cfo":
            c = math.cos(report.theta_hat)
            if abs(c) < 0.2:
                return None
            raw_speed = C_LIGHT * (cfg.frame_config().delta_f * report.eps_hat) / (cfg.f_c * c)
            return abs(raw_speed - float(np.linalg.norm(claimed.v_body)))
        if name == "aoa_cg":
            if report.pos_sense is None:
                return None
            return float(np.linalg.norm(report.pos_sense - claimed.position))
        return None

    for rec in sensing.legit[1:]:
        s = stat_for(rec)
        if s is not None:
            legit.append(float(s))
    for rec in sensing.attack:
        s = stat_for(rec)
        if s is not None:
            attack.append(float(s))
    return {"legit": legit, "attack": attack}


def run_baseline(name: str, sensing: TrialSensing, artifacts, cfg: ExperimentConfig):
    """Public wrapper returning the per-slot statistics of one baseline."""
    return compute_baseline_stats(name, sensing, artifacts, cfg)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def compute_rmse(truth: np.ndarray, estimate: np.ndarray) -> float:
    """Root mean squared Euclidean position error over valid slots."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    mask = ~np.any(np.isnan(estimate), axis=1)
    if not np.any(mask):
        return float("nan")
    err = np.linalg.norm(truth[mask] - estimate[mask], axis=1)
    return float(np.sqrt(np.mean(err**2)))


def compute_mape(truth: np.ndarray, estimate: np.ndarray, min_norm: float = 1.0) -> float:
    """Mean absolute percentage position error; slots with ||truth|| below
    ``min_norm`` (the takeoff origin) are excluded to avoid the 0 division."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    norms = np.linalg.norm(truth, axis=1)
    mask = (norms >= min_norm) & ~np.any(np.isnan(estimate), axis=1)
    if not np.any(mask):
        return float("nan")
    err = np.linalg.norm(truth[mask] - estimate[mask], axis=1)
    return float(np.mean(err / norms[mask]) * 100.0)


@dataclass
class RocCurve:
    points: list  # (gamma, p_fa, p_d)
    auc: float


def compute_roc(legit_distances, attack_distances, gamma_grid=None, grid_size: int = 101) -> RocCurve:
    """Detection/false-alarm tradeoff over a threshold sweep.

    A slot is declared illegal when its statistic is >= gamma.  The grid is
    augmented with 0 and infinity so the curve pins (1,1) and (0,0); AUC is
    the trapezoid integral over points sorted by false-alarm rate.
    """
    legit = np.asarray(list(legit_distances), dtype=float)
    attack = np.asarray(list(attack_distances), dtype=float)
    if gamma_grid is None:
        pooled = np.concatenate([legit[np.isfinite(legit)], attack[np.isfinite(attack)]])
        if len(pooled) == 0:
            pooled = np.array([1.0])
        qs = np.linspace(0.0, 1.0, max(grid_size - 2, 2))
        gamma_grid = np.unique(np.quantile(pooled, qs))
    gammas = np.concatenate([[0.0], np.sort(np.asarray(gamma_grid, dtype=float)), [np.inf]])
    points = []
    for gamma in gammas:
        p_fa = float(np.mean(legit >= gamma)) if len(legit) else 0.0
        p_d = float(np.mean(attack >= gamma)) if len(attack) else 0.0
        points.append((float(gamma), p_fa, p_d))
    xy = sorted(((p_fa, p_d) for _, p_fa, p_d in points))
    xs = np.array([p[0] for p in xy])
    ys = np.array([p[1] for p in xy])
    auc = float(np.trapezoid(ys, xs))
    return RocCurve(points=points, auc=auc)


# ---------------------------------------------------------------------------
# training phase
# ---------------------------------------------------------------------------

def _train_sensing_worker(args):
    cfg, p_t, trial = args
    return run_trial_sensing(cfg, p_t, trial, regressor=None, seed_domain=1000, with_attacks=False)


def train_pipeline(cfg: ExperimentConfig) -> TrackingArtifacts:
    """Fit every learned component from freshly simulated training flights."""
    p_ref = max(cfg.p_t_list)
    regressors, rss_regressors = {}, {}
    ref_sensings = []

    jobs = [
        (cfg, p_t, i)
        for p_t in sorted(set(cfg.p_t_list))
        for i in range(cfg.n_train_trajectories)
    ]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            sensings = list(pool.map(_train_sensing_worker, jobs))
    else:
        sensings = [_train_sensing_worker(job) for job in jobs]

    noise_w = 10.0 ** ((cfg.noise_power_dbm - 30.0) / 10.0)
    by_pt = {}
    for (_, p_t, _i), sensing in zip(jobs, sensings):
        by_pt.setdefault(p_t, []).append(sensing)
    for p_t, group in by_pt.items():
        acg_samples, rss_samples = [], []
        for sensing in group:
            for rec in sensing.legit[:: cfg.train_slot_stride]:
                if rec.report is None:
                    continue
                d_true = float(np.linalg.norm(rec.truth_position - cfg.bs_position))
                acg_samples.append((rec.report.acg, d_true))
                if np.isfinite(rec.report.snr_hat_db):
                    rss_samples.append(
                        (noise_w * 10.0 ** (rec.report.snr_hat_db / 10.0), d_true)
                    )
        regressors[p_t] = train_acg_regressor(acg_samples)
        rss_regressors[p_t] = train_acg_regressor(rss_samples)
        if p_t == p_ref:
            ref_sensings = group

    # sequence-model dataset from decoded (reported) states, targets from truth
    t1 = cfg.window_t1
    dataset = []
    for sensing in ref_sensings:
        rows = [
            (rec.t, rec.report.decoded.state_vector())
            for rec in sensing.legit
            if rec.report is not None and rec.report.decode_ok
        ]
        for k in range(t1, len(rows)):
            window_rows = rows[k - t1 : k]
            target_t = rows[k][0]
            if window_rows[-1][0] != target_t - 1 or window_rows[0][0] != target_t - t1:
                continue  # keep windows strictly consecutive
            window = np.stack([r[1] for r in window_rows])
            dataset.append((window, sensing.trajectory.poses[target_t - 1].position.copy()))
    if not dataset:
        raise ConfigurationError("training produced no usable windows; raise P_t or SNR")

    net, history = train(
        dataset,
        TrainConfig(
            epochs=cfg.lstm_epochs,
            batch_size=cfg.lstm_batch,
            seed=cfg.seed,
            hidden=cfg.lstm_hidden,
            heads=cfg.lstm_heads,
        ),
    )
    cov0 = error_cov_from_dataset(net, dataset)

    # threshold from legitimate distance statistics at the reference power
    provisional = TrackingArtifacts(
        regressors=regressors,
        rss_regressors=rss_regressors,
        net=net,
        error_cov0=cov0,
        threshold=Threshold(gamma=np.inf, target_pfa=cfg.target_pfa),
        train_history=history,
    )
    legit_distances = []
    for sensing in ref_sensings:
        for rec in sensing.legit:
            _finalize_report(rec.report, regressors[p_ref], cfg.bs_position)
        result = run_tracking(sensing, provisional, cfg)
        finite = result.legit_dist[np.isfinite(result.legit_dist)]
        legit_distances.extend(finite.tolist())
    threshold = learn_threshold(legit_distances, cfg.target_pfa)
    return TrackingArtifacts(
        regressors=regressors,
        rss_regressors=rss_regressors,
        net=net,
        error_cov0=cov0,
        threshold=threshold,
        train_history=history,
    )


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------

def _run_single_trial(args):
    cfg, artifacts, p_t, trial = args
    sensing = run_trial_sensing(cfg, p_t, trial, artifacts.regressors[p_t])
    log_tracks = trial == cfg.log_tracks_trial
    return run_tracking(sensing, artifacts, cfg, log_tracks=log_tracks)


def run_trials(cfg: ExperimentConfig, artifacts: TrackingArtifacts, p_t: float):
    """All Monte-Carlo trials at one transmit power, optionally in parallel."""
    jobs = [(cfg, artifacts, p_t, trial) for trial in range(cfg.n_trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_single_trial, jobs))
    else:
        results = [_run_single_trial(job) for job in jobs]
    return results


@dataclass
class MetricsRow:
    estimator: str
    p_t: float
    rmse: float
    mape: float
    n_slots: int


def aggregate_metrics(results, p_t: float):
    rows = []
    for name in ("ekf", "lstm", "fused"):
        truth = np.concatenate([r.truth for r in results])
        est = np.concatenate([r.estimates[name] for r in results])
        mask = ~np.any(np.isnan(est), axis=1)
        rows.append(
            MetricsRow(
                estimator=name,
                p_t=p_t,
                rmse=compute_rmse(truth, est),
                mape=compute_mape(truth, est),
                n_slots=int(np.sum(mask)),
            )
        )
    return rows


def pooled_roc(results, cfg: ExperimentConfig):
    """ROC per detector (proposed plus baselines) pooled over trials."""
    curves = {}
    legit = np.concatenate([r.legit_dist[1:] for r in results])
    attack = np.concatenate([r.attack_dist for r in results])
    curves["proposed"] = compute_roc(legit, attack, grid_size=cfg.roc_grid_size)
    for name in cfg.baselines:
        lg = np.concatenate([np.asarray(r.baseline_stats[name]["legit"]) for r in results])
        at = np.concatenate([np.asarray(r.baseline_stats[name]["attack"]) for r in results])
        curves[name] = compute_roc(lg, at, grid_size=cfg.roc_grid_size)
    return curves


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "p_t_dbm", "rmse_m", "mape_pct", "n_slots"])
        for row in rows:
            writer.writerow([row.estimator, repr(row.p_t), repr(row.rmse), repr(row.mape), row.n_slots])


def write_roc_csv(curves: dict, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["detector", "gamma", "p_fa", "p_d", "auc"])
        for name in sorted(curves):
            curve = curves[name]
            for gamma, p_fa, p_d in curve.points:
                writer.writerow([name, repr(gamma), repr(p_fa), repr(p_d), repr(curve.auc)])


def read_metrics_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            rows.append(
                MetricsRow(
                    estimator=raw["estimator"],
                    p_t=float(raw["p_t_dbm"]),
                    rmse=float(raw["rmse_m"]),
                    mape=float(raw["mape_pct"]),
                    n_slots=int(raw["n_slots"]),
                )
            )
    return rows


def run_experiment(cfg: ExperimentConfig, artifacts: TrackingArtifacts | None = None) -> dict:
    """Full experiment: train (unless given artifacts), evaluate, write outputs.

    Writes metrics.csv, roc.csv, verdicts.jsonl, tracks.jsonl, errors.csv and
    manifest.json under ``cfg.out_dir``; returns a summary dictionary.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    if artifacts is None:
        artifacts = train_pipeline(cfg)

    all_rows, verdicts, tracks = [], [], []
    roc_by_pt = {}
    error_rows = []
    for pt_idx, p_t in enumerate(cfg.p_t_list):
        results = run_trials(cfg, artifacts, p_t)
        all_rows.extend(aggregate_metrics(results, p_t))
        if cfg.attacks:
            roc_by_pt[p_t] = pooled_roc(results, cfg)
        for r in results:
            for rec in r.verdict_records:
                verdicts.append({"p_t": p_t, "trial": r.trial} | rec)
            tracks.extend({"p_t": p_t, "trial": r.trial} | t for t in r.track_records)
            err = np.linalg.norm(r.truth - r.estimates["fused"], axis=1)
            for t, e in enumerate(err, start=1):
                if np.isfinite(e):
                    error_rows.append((p_t, r.trial, t, e))

    write_metrics_csv(all_rows, os.path.join(cfg.out_dir, "metrics.csv"))
    if roc_by_pt:
        merged = {}
        for p_t, curves in roc_by_pt.items():
            for name, curve in curves.items():
                merged[f"{name}@{p_t:g}dBm"] = curve
        write_roc_csv(merged, os.path.join(cfg.out_dir, "roc.csv"))
    with open(os.path.join(cfg.out_dir, "verdicts.jsonl"), "w") as fh:
        for rec in verdicts:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(os.path.join(cfg.out_dir, "tracks.jsonl"), "w") as fh:
        for rec in tracks:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(os.path.join(cfg.out_dir, "errors.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p_t_dbm", "trial", "t", "fused_error_m"])
        for p_t, trial, t, e in error_rows:
            writer.writerow([repr(p_t), trial, t, repr(float(e))])
    manifest = {
        "config": cfg.to_dict(),
        "config_sha256": cfg.config_hash(),
        "package_version": __version__,
        "versions": {"numpy": np.__version__},
        "gamma": artifacts.threshold.gamma,
    }
    with open(os.path.join(cfg.out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    summary = {
        "metrics": all_rows,
        "roc": roc_by_pt,
        "gamma": artifacts.threshold.gamma,
    }
    return summary


# ---------------------------------------------------------------------------
# smoothing-factor sensitivity sweep
# ---------------------------------------------------------------------------

def _sweep_worker(args):
    cfg, artifacts, trial, alphas, betas = args
    p_t = max(cfg.p_t_list)
    sensing = run_trial_sensing(cfg, p_t, trial, artifacts.regressors[p_t], with_attacks=False)
    out = np.zeros((len(alphas), len(betas)))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            result = run_tracking(sensing, artifacts, cfg, alpha=a, beta=b)
            out[i, j] = compute_mape(result.truth, result.estimates["fused"])
    return out


def sweep_alpha_beta(
    cfg: ExperimentConfig,
    artifacts: TrackingArtifacts | None = None,
    alphas=None,
    betas=None,
) -> dict:
    """Grid the residual/process smoothing factors; sensing runs once per trial
    and every grid cell replays the stored reports through the tracker."""
    alphas = np.round(np.arange(0.1, 1.0, 0.1), 2) if alphas is None else np.asarray(alphas)
    betas = np.round(np.arange(0.1, 1.0, 0.1), 2) if betas is None else np.asarray(betas)
    if artifacts is None:
        artifacts = train_pipeline(cfg)
    jobs = [(cfg, artifacts, trial, alphas, betas) for trial in range(cfg.n_trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            grids = list(pool.map(_sweep_worker, jobs))
    else:
        grids = [_sweep_worker(job) for job in jobs]
    mape = np.mean(np.stack(grids), axis=0)
    return {"alphas": alphas, "betas": betas, "mape": mape}
