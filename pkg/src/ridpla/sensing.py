"""Receiver-side wireless sensing and decoding of Remote-ID captures.

From raw multi-antenna samples this module recovers frame timing (cyclic
prefix or training-symbol autocorrelation), the normalized carrier offset and
Doppler, the angle of arrival via a beamforming grid search, the
per-subcarrier channel and its average gain, the transmit-antenna count via
per-subcarrier eigenvalue information criteria, and the decoded payload.
:func:`analyze_capture` chains everything into one report per slot.

All estimators are deterministic functions of the capture and configuration.
Correlation sums are accumulated in double precision regardless of the
capture dtype.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy.signal import resample_poly

from . import codec
from .errors import EstimationFailure, NoFrameDetected
from .phy import (
    C_LIGHT,
    PAYLOAD_BYTES,
    FrameConfig,
    IqCapture,
    RidPayload,
    training_grids,
    _symbol_norm,
)

BEAM_CONST = 1.772  # angular resolution constant: 1.772 / (aperture in elements)
DEFAULT_DETECTION_FLOOR = 0.3
COS_GUARD = 0.2  # below this |cos(theta)| the Doppler->speed inversion is dropped


# ---------------------------------------------------------------------------
# synchronization
# ---------------------------------------------------------------------------

@dataclass
class SyncResult:
    frame_start: int
    mode: str
    metric_peak: float
    eps_hat: float
    R_max: complex
    k1: int
    k2: int


def _window_sums(values: np.ndarray, k1: int) -> np.ndarray:
    """Sliding sums over k1-long windows along the last axis (f64 accumulation)."""
    dtype = np.complex128 if np.iscomplexobj(values) else np.float64
    csum = np.cumsum(values, axis=-1, dtype=dtype)
    csum = np.concatenate([np.zeros(csum.shape[:-1] + (1,), dtype=dtype), csum], axis=-1)
    return csum[..., k1:] - csum[..., :-k1]


def sync_metric(x: np.ndarray, k1: int, k2: int):
    """Normalized squared autocorrelation metric and the complex correlation.

    Index n corresponds to the window covering samples [n, n + k1) against
    [n + k2, n + k1 + k2).  Antennas are combined noncoherently (magnitudes
    of per-antenna correlations, summed energies), which keeps the
    Cauchy-Schwarz bound M(n) <= 1 intact.
    """
    x = np.atleast_2d(x)
    length = x.shape[1]
    if length < k1 + k2:
        raise ValueError("capture shorter than one correlation window")
    prod = x[:, : length - k2] * np.conj(x[:, k2:])
    power = x.real.astype(np.float64) ** 2 + x.imag.astype(np.float64) ** 2
    corr = _window_sums(prod, k1)
    e1 = _window_sums(power[:, : length - k2], k1)
    e2 = _window_sums(power[:, k2:], k1)
    corr_sum = np.sum(corr, axis=0)
    amp = np.sum(np.abs(corr), axis=0)
    denom = np.sum(e1, axis=0) * np.sum(e2, axis=0)
    metric = amp**2 / np.maximum(denom, 1e-30)
    return metric, corr_sum


def _sync_windows(cfg: FrameConfig, mode: str):
    if mode == "cp_based" or mode == "cp":
        return cfg.N_cp, cfg.N
    if mode == "zc_based" or mode == "zc":
        return cfg.N // 2, cfg.N // 2
    raise ValueError(f"unknown sync mode {mode!r}")


def coarse_time_sync(
    capture,
    cfg: FrameConfig,
    mode: str = "cp",
    detection_floor: float = DEFAULT_DETECTION_FLOOR,
) -> SyncResult:
    """Locate the frame start from the autocorrelation metric.

    CP mode (K1=N_cp, K2=N) produces one sharp peak per OFDM symbol; the
    first prominent one marks the frame.  ZC mode (K1=K2=N/2) rides the
    half-symbol repetition of the first training symbol, whose metric forms a
    plateau starting at the frame; the leading edge of the topmost plateau is
    taken.  Raises :class:`NoFrameDetected` when nothing clears the floor.
    """
    x = capture.samples if isinstance(capture, IqCapture) else np.atleast_2d(capture)
    k1, k2 = _sync_windows(cfg, mode)
    metric, corr = sync_metric(x, k1, k2)
    peak_val = float(np.max(metric))
    if peak_val < detection_floor:
        raise NoFrameDetected(f"sync metric peak {peak_val:.3f} below floor {detection_floor}")

    # the metric peaks once per repetition structure (every CP in cp mode);
    # take the first contiguous run that rivals the global maximum
    mask = metric >= max(detection_floor, 0.85 * peak_val)
    first = int(np.argmax(mask))
    run_end = first
    while run_end + 1 < len(mask) and mask[run_end + 1]:
        run_end += 1
    peak = first + int(np.argmax(metric[first : run_end + 1]))
    if k2 == cfg.N:
        frame_start = peak  # single full-overlap point sits at the frame start
    else:
        lead = peak  # plateau: walk to its leading edge
        while lead > first and metric[lead - 1] >= 0.97 * metric[peak]:
            lead -= 1
        frame_start = lead
    r_max = complex(corr[peak])
    eps_hat = float(-math.atan2(r_max.imag, r_max.real) * cfg.N / (2.0 * math.pi * k1))
    return SyncResult(
        frame_start=frame_start,
        mode="cp_based" if k2 == cfg.N else "zc_based",
        metric_peak=peak_val,
        eps_hat=eps_hat,
        R_max=r_max,
        k1=k1,
        k2=k2,
    )


def zc_autocorrelation_at(x: np.ndarray, cfg: FrameConfig, frame_start: int) -> SyncResult:
    """ZC-mode correlation anchored mid-plateau of a known frame position.

    Cheaper and more robust than a fresh peak search once coarse timing is
    available; tolerates timing errors up to half a cyclic prefix.
    """
    k1 = k2 = cfg.N // 2
    n = frame_start + cfg.N_cp // 2
    n = max(0, min(n, x.shape[1] - k1 - k2))
    seg = x[:, n : n + k1 + k2]
    metric, corr = sync_metric(seg, k1, k2)
    r_max = complex(corr[0])
    if r_max == 0:
        raise EstimationFailure("zero autocorrelation at the training symbol")
    eps_hat = float(-math.atan2(r_max.imag, r_max.real) * cfg.N / (2.0 * math.pi * k1))
    return SyncResult(
        frame_start=frame_start,
        mode="zc_based",
        metric_peak=float(metric[0]),
        eps_hat=eps_hat,
        R_max=r_max,
        k1=k1,
        k2=k2,
    )


def estimate_cfo(sync: SyncResult, cfg: FrameConfig, oscillator_calibration_hz: float = 0.0):
    """Normalized CFO and the calibrated Doppler estimate in Hz.

    eps_hat = -atan2(Im R, Re R) * N / (2 pi K1) is exact for the K1 = K2
    training-symbol windows; the per-drone constant oscillator component
    (calibrated during an initial stationary slot) is subtracted from the
    Hz-domain estimate to leave the motion-induced part.
    """
    if sync.R_max == 0:
        raise EstimationFailure("zero correlation peak")
    eps_hat = float(
        -math.atan2(sync.R_max.imag, sync.R_max.real) * cfg.N / (2.0 * math.pi * sync.k1)
    )
    fd_hat = cfg.delta_f * eps_hat - oscillator_calibration_hz
    return eps_hat, fd_hat


# ---------------------------------------------------------------------------
# baseband conditioning
# ---------------------------------------------------------------------------

def spectrum_centroid(x: np.ndarray, f_s: float) -> float:
    """Power-weighted mean frequency of the capture (coarse centre estimate)."""
    x = np.atleast_2d(x)
    spec = np.abs(scipy.fft.fft(x[0].astype(np.complex128))) ** 2
    freqs = scipy.fft.fftfreq(x.shape[1], d=1.0 / f_s)
    total = float(np.sum(spec))
    if total <= 0:
        return 0.0
    return float(np.sum(freqs * spec) / total)


def resample_baseband(capture, cfg: FrameConfig, center_shift: bool = True) -> np.ndarray:
    """Shift the capture to zero centre frequency and decimate to rate B.

    The centre estimate is the power-spectrum centroid; the polyphase
    resampler provides the anti-alias low-pass.  A capture already at rate B
    is returned unchanged (up to the optional centre shift).
    """
    if isinstance(capture, IqCapture):
        x, f_s = capture.samples, capture.f_s
    else:
        x, f_s = np.atleast_2d(capture), cfg.B
    if center_shift:
        f0 = spectrum_centroid(x, f_s)
        # centroid noise floor: ignore shifts below a fraction of the spacing
        if abs(f0) > 0.05 * cfg.delta_f:
            n = np.arange(x.shape[1])
            x = x * np.exp(-2j * np.pi * f0 * n / f_s).astype(np.complex64)
    if f_s == cfg.B:
        return x
    from fractions import Fraction

    ratio = Fraction(cfg.B / f_s).limit_denominator(10000)
    return resample_poly(x, ratio.numerator, ratio.denominator, axis=1)


# ---------------------------------------------------------------------------
# angle of arrival
# ---------------------------------------------------------------------------

@dataclass
class AngleGrid:
    thetas: np.ndarray
    phis: np.ndarray
    steering: np.ndarray  # (n_theta * n_phi, N_r), conjugated for fast products
    n_rx: int
    n_ry: int


def build_angle_grid(
    n_rx: int,
    n_ry: int,
    theta_lo: float = -math.pi,
    theta_hi: float = math.pi,
    phi_lo: float = -math.pi / 2,
    phi_hi: float = math.pi / 2,
) -> AngleGrid:
    """Beamforming grid with spacing half the array's angular resolution."""
    d_theta = 0.5 * BEAM_CONST / n_rx
    d_phi = 0.5 * BEAM_CONST / n_ry
    n_t = max(2, int(math.ceil((theta_hi - theta_lo) / d_theta)))
    n_p = max(2, int(math.ceil((phi_hi - phi_lo) / d_phi)) + 1)
    thetas = theta_lo + (theta_hi - theta_lo) * np.arange(n_t) / n_t  # theta wraps
    phis = np.linspace(phi_lo, phi_hi, n_p)
    u = np.arange(n_rx)[:, None]
    v = np.arange(n_ry)[None, :]
    cos_p = np.cos(phis)[:, None, None, None]
    arg = cos_p * (
        u[None, None] * np.cos(thetas)[None, :, None, None]
        + v[None, None] * np.sin(thetas)[None, :, None, None]
    )
    steering = np.exp(1j * np.pi * arg)  # conj of the array response
    steering = steering.reshape(n_p, n_t, n_rx * n_ry).transpose(1, 0, 2)
    return AngleGrid(
        thetas=thetas,
        phis=phis,
        steering=steering.reshape(-1, n_rx * n_ry).astype(np.complex64),
        n_rx=n_rx,
        n_ry=n_ry,
    )


def _parabolic_refine(vals, spacing):
    """Vertex offset of the parabola through three equispaced samples."""
    left, mid, right = vals
    denom = left - 2.0 * mid + right
    if denom >= -1e-30:
        return 0.0
    delta = 0.5 * (left - right) / denom
    return float(np.clip(delta, -0.5, 0.5)) * spacing


def estimate_aoa(X_i: np.ndarray, grid: AngleGrid):
    """Azimuth/elevation maximizing the beamformed energy |a^H X| on the grid,
    refined once per axis by local quadratic interpolation."""
    if grid.steering.size == 0 or len(grid.thetas) < 2 or len(grid.phis) < 2:
        raise ValueError("degenerate angle grid")
    X = np.atleast_2d(X_i)
    proj = grid.steering @ X.astype(np.complex64)
    obj = np.sum(np.abs(proj.astype(np.complex128)) ** 2, axis=1)
    obj = obj.reshape(len(grid.thetas), len(grid.phis))
    it, ip = np.unravel_index(int(np.argmax(obj)), obj.shape)

    n_t = len(grid.thetas)
    t_spacing = grid.thetas[1] - grid.thetas[0]
    tri = obj[[(it - 1) % n_t, it, (it + 1) % n_t], ip]
    theta = grid.thetas[it] + _parabolic_refine(tri, t_spacing)

    phi = grid.phis[ip]
    if 0 < ip < len(grid.phis) - 1:
        p_spacing = grid.phis[1] - grid.phis[0]
        tri = obj[it, ip - 1 : ip + 2]
        phi = phi + _parabolic_refine(tri, p_spacing)
    return float(theta), float(phi)


# ---------------------------------------------------------------------------
# channel estimation and decoding
# ---------------------------------------------------------------------------

def estimate_channel(rx_zc: np.ndarray, tx_zc: np.ndarray):
    """Per-subcarrier least-squares channel from the training symbols.

    Minimizes sum_i |x_i - s_i h|^2 over the provided symbol rows; subcarriers
    with no training energy get h = 0.  Returns the channel vector and the
    average channel gain E[|h|^2] over the supported subcarriers.
    """
    rx = np.atleast_2d(np.asarray(rx_zc))
    tx = np.atleast_2d(np.asarray(tx_zc))
    if rx.shape != tx.shape:
        raise ValueError("training shapes disagree")
    denom = np.sum(np.abs(tx.astype(np.complex128)) ** 2, axis=0)
    if np.all(denom == 0):
        raise ValueError("training symbols carry no energy")
    num = np.sum(np.conj(tx) * rx, axis=0, dtype=np.complex128)
    h = np.where(denom > 0, num / np.maximum(denom, 1e-30), 0.0)
    acg = float(np.mean(np.abs(h[denom > 0]) ** 2))
    return h, acg


def equalize_and_decode(symbols: np.ndarray, h_hat: np.ndarray, cfg: FrameConfig):
    """Matched-filter equalize the data symbols and decode the payload.

    Subcarriers with a vanishing channel estimate contribute zero soft values
    (erasures) instead of blowing up; decode failure is reported as None.
    """
    symbols = np.atleast_2d(symbols)
    h = np.asarray(h_hat)
    scale = np.mean(np.abs(h) ** 2)
    if scale <= 0:
        return None
    mf = (np.conj(h)[None, :] * symbols) / scale
    soft = codec.qpsk_soft_demodulate(mf.reshape(-1))
    n_payload_bits = 8 * PAYLOAD_BYTES
    n_coded = 2 * (n_payload_bits + codec.CONSTRAINT - 1)
    if len(soft) < n_coded:
        return None
    soft = soft[:n_coded]
    flips = 1.0 - 2.0 * codec.scramble_sequence(n_coded).astype(float)
    bits = codec.viterbi_decode(soft * flips, n_payload_bits)
    return RidPayload.unpack(codec.bits_to_bytes(bits))


# ---------------------------------------------------------------------------
# transmit antenna count
# ---------------------------------------------------------------------------

def estimate_num_tx_antennas(X_subcarriers: np.ndarray, n_sym: int | None = None) -> int:
    """Source count from per-subcarrier covariance eigenvalues (AIC).

    ``X_subcarriers`` has shape (n_sub, N_r, N_sym).  With N_sym snapshots the
    covariance rank is at most min(N_r, N_sym), so the trailing eigenvalue
    sets are truncated there (the remainder is structurally zero) and the
    candidate count j runs over 0 .. min(N_r, N_sym) - 2; a one-element
    trailing set carries no spread information and would otherwise win on its
    vanishing dimension penalty alone.  Per subcarrier and candidate j:

        AIC_i(j) = -2 (N_r - j) N_sym log( G[l_{j+1..m}] / E[l_{j+1..m}] )
                   + 2 j (N_r - j)

    with G/E the geometric/arithmetic means, summed over subcarriers.
    """
    X = np.asarray(X_subcarriers)
    if X.ndim != 3:
        raise ValueError("expected (n_sub, N_r, N_sym) input")
    n_sub, n_r, snapshots = X.shape
    if n_sym is None:
        n_sym = snapshots
    if n_sym < 2:
        raise ValueError("need at least two symbols for a covariance estimate")

    # nonzero covariance spectrum via the Gram matrix of the smaller dimension
    if snapshots <= n_r:
        gram = np.einsum("spq,spr->sqr", np.conj(X), X)  # (n_sub, N_sym, N_sym)
    else:
        gram = np.einsum("sqp,srp->sqr", X, np.conj(X))  # (n_sub, N_r, N_r)
    eig = np.linalg.eigvalsh(gram) / n_sym
    eig = eig[:, ::-1]  # descending
    m = min(n_r, snapshots)
    eig = np.maximum(eig[:, :m], 0.0)

    floor = 1e-12 * np.maximum(eig[:, :1], 1e-300)
    clamped = np.maximum(eig, floor)
    logs = np.log(clamped)

    # suffix arithmetic and log means for every candidate j
    suf_sum = np.cumsum(eig[:, ::-1], axis=1)[:, ::-1]
    suf_log = np.cumsum(logs[:, ::-1], axis=1)[:, ::-1]
    counts = m - np.arange(m)
    aic = np.zeros((n_sub, m - 1))
    for j in range(m - 1):
        k = counts[j]
        arith = suf_sum[:, j] / k
        geom = np.exp(suf_log[:, j] / k)
        ratio = np.where(arith <= floor[:, 0], 1.0, geom / np.maximum(arith, 1e-300))
        aic[:, j] = -2.0 * (n_r - j) * n_sym * np.log(ratio) + 2.0 * j * (n_r - j)
    return int(np.argmin(np.sum(aic, axis=0)))


# ---------------------------------------------------------------------------
# distance, position, speed
# ---------------------------------------------------------------------------

@dataclass
class AcgRegressor:
    """Affine map from log average channel gain to distance (two parameters)."""

    weight: float
    bias: float

    def predict(self, acg: float) -> float:
        return max(self.weight * math.log(max(acg, 1e-30)) + self.bias, 1.0)


def train_acg_regressor(samples) -> AcgRegressor:
    """Least-squares fit of distance = weight * log(acg) + bias."""
    acgs = np.array([s[0] for s in samples], dtype=float)
    dists = np.array([s[1] for s in samples], dtype=float)
    if len(acgs) < 2:
        raise ValueError("need at least two training samples")
    x = np.log(np.maximum(acgs, 1e-30))
    if np.ptp(x) < 1e-12:
        raise ValueError("training gains are degenerate (constant ACG)")
    coeffs = np.polyfit(x, dists, 1)
    return AcgRegressor(weight=float(coeffs[0]), bias=float(coeffs[1]))


def position_from_sensing(d_hat: float, theta_hat: float, phi_hat: float, bs_position) -> np.ndarray:
    """Back-project the range/angle estimates to a world position."""
    if d_hat <= 0:
        raise ValueError("distance must be positive")
    direction = np.array(
        [
            math.cos(phi_hat) * math.cos(theta_hat),
            math.cos(phi_hat) * math.sin(theta_hat),
            math.sin(phi_hat),
        ]
    )
    return np.asarray(bs_position, dtype=float) + d_hat * direction


def speed_from_doppler(
    fd_hat: float, f_c: float, theta_hat: float, cos_guard: float = COS_GUARD
):
    """Invert the Doppler relation; None inside the broadside guard band where
    the 1/cos(theta) amplification makes the estimate useless."""
    c = math.cos(theta_hat)
    if abs(c) < cos_guard:
        return None
    return C_LIGHT * fd_hat / (f_c * c)


# ---------------------------------------------------------------------------
# full-capture analysis
# ---------------------------------------------------------------------------

@dataclass
class SensingContext:
    """Static receiver-side state shared across slots."""

    bs_position: np.ndarray
    n_rx: int = 8
    n_ry: int = 8
    regressor: AcgRegressor | None = None
    detection_floor: float = DEFAULT_DETECTION_FLOOR
    aic_subcarriers: int = 48
    sync_antennas: int = 8  # coarse timing needs only a few rows of the array
    phi_lo: float = -math.pi / 2
    phi_hi: float = math.pi / 2
    grid: AngleGrid | None = None

    def angle_grid(self) -> AngleGrid:
        if self.grid is None:
            self.grid = build_angle_grid(
                self.n_rx, self.n_ry, phi_lo=self.phi_lo, phi_hi=self.phi_hi
            )
        return self.grid


@dataclass
class SensingReport:
    """Per-slot estimates handed to the tracker and the authenticator."""

    theta_hat: float
    phi_hat: float
    eps_hat: float
    fd_hat: float
    acg: float
    nt_hat: int
    snr_hat_db: float
    metric_peak: float
    frame_start: int
    decoded: RidPayload | None = None
    distance_hat: float | None = None
    pos_sense: np.ndarray | None = None
    speed_sense: float | None = None
    h_hat: np.ndarray | None = None

    @property
    def decode_ok(self) -> bool:
        return self.decoded is not None

    def to_json(self) -> str:
        payload = None
        if self.decoded is not None:
            payload = {
                "uuid": self.decoded.uuid.hex(),
                "drone_type": self.decoded.drone_type,
                "position": [float(v) for v in self.decoded.position],
                "v_body": [float(v) for v in self.decoded.v_body],
                "a_body": [float(v) for v in self.decoded.a_body],
                "yaw": float(self.decoded.yaw),
                "yaw_rate": float(self.decoded.yaw_rate),
            }
        record = {
            "theta_hat": self.theta_hat,
            "phi_hat": self.phi_hat,
            "eps_hat": self.eps_hat,
            "fd_hat": self.fd_hat,
            "acg": self.acg,
            "nt_hat": self.nt_hat,
            "snr_hat_db": self.snr_hat_db,
            "metric_peak": self.metric_peak,
            "frame_start": self.frame_start,
            "decoded": payload,
            "distance_hat": self.distance_hat,
            "pos_sense": None if self.pos_sense is None else [float(v) for v in self.pos_sense],
            "speed_sense": self.speed_sense,
        }
        return json.dumps(record, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SensingReport":
        raw = json.loads(line)
        decoded = None
        if raw["decoded"] is not None:
            d = raw["decoded"]
            decoded = RidPayload(
                uuid=bytes.fromhex(d["uuid"]),
                drone_type=d["drone_type"],
                position=np.array(d["position"]),
                v_body=np.array(d["v_body"]),
                a_body=np.array(d["a_body"]),
                yaw=d["yaw"],
                yaw_rate=d["yaw_rate"],
            )
        return cls(
            theta_hat=raw["theta_hat"],
            phi_hat=raw["phi_hat"],
            eps_hat=raw["eps_hat"],
            fd_hat=raw["fd_hat"],
            acg=raw["acg"],
            nt_hat=raw["nt_hat"],
            snr_hat_db=raw["snr_hat_db"],
            metric_peak=raw["metric_peak"],
            frame_start=raw["frame_start"],
            decoded=decoded,
            distance_hat=raw["distance_hat"],
            pos_sense=None if raw["pos_sense"] is None else np.array(raw["pos_sense"]),
            speed_sense=raw["speed_sense"],
        )


def write_reports_jsonl(reports, path) -> None:
    with open(path, "w") as fh:
        for report in reports:
            fh.write(report.to_json() + "\n")


def read_reports_jsonl(path):
    with open(path) as fh:
        return [SensingReport.from_json(line) for line in fh if line.strip()]


def _fine_time_sync(stream: np.ndarray, cfg: FrameConfig, coarse_start: int) -> int:
    """Refine the frame boundary by cross-correlating the known first training
    symbol (with its prefix) against the beamformed stream."""
    tr1, _ = training_grids(cfg)
    time = np.sqrt(cfg.N) * scipy.fft.ifft(_symbol_norm(tr1, cfg.N))
    template = np.concatenate([time[-cfg.N_cp :], time])
    half = cfg.N_cp
    lo = max(coarse_start - half, 0)
    hi = min(coarse_start + half + len(template), len(stream))
    seg = stream[lo:hi]
    if len(seg) < len(template):
        return coarse_start
    xc = np.abs(np.correlate(seg, template, mode="valid"))
    return lo + int(np.argmax(xc))


def analyze_capture(
    capture: IqCapture,
    cfg: FrameConfig,
    ctx: SensingContext,
    oscillator_calibration_hz: float = 0.0,
) -> SensingReport:
    """Run the whole sensing chain on one capture.

    Steps: resample to rate B, CP-based coarse timing, training-symbol
    autocorrelation for the carrier offset, CFO correction, per-antenna
    demodulation (AoA + antenna count), beamforming, fine timing, channel
    estimation, payload decode, and the range/angle/Doppler back-projection.
    Raises :class:`NoFrameDetected` when coarse sync finds nothing.

    The capture is already nominally at baseband, so the centre-frequency
    hunt inside :func:`resample_baseband` is skipped; residual offsets below
    a subcarrier spacing belong to the fine CFO stage.
    """
    x = resample_baseband(capture, cfg, center_shift=False)
    n_sync = min(ctx.sync_antennas, x.shape[0])
    sync = coarse_time_sync(x[:n_sync], cfg, "cp", ctx.detection_floor)
    start = int(np.clip(sync.frame_start, 0, x.shape[1] - cfg.frame_samples))

    zc_sync = zc_autocorrelation_at(x, cfg, start)
    eps_hat, fd_hat = estimate_cfo(zc_sync, cfg, oscillator_calibration_hz)

    lo = max(start - cfg.N_cp, 0)
    hi = min(start + cfg.frame_samples + cfg.N_cp, x.shape[1])
    start_in_seg = start - lo

    # per-antenna symbols at coarse timing, without CFO correction: AoA and
    # the antenna count ride magnitudes/covariances, which neither timing
    # phase ramps nor the (sub-spacing) residual offset disturb
    def gather(spec):
        neg, pos = cfg.bin_slices()
        return np.concatenate([spec[..., neg], spec[..., pos]], axis=-1)

    coarse = x[:, start : start + cfg.frame_samples]
    n_ant = coarse.shape[0]
    sym = coarse.reshape(n_ant, cfg.N_sym, cfg.symbol_samples)[:, :, cfg.N_cp :]
    spectra = scipy.fft.fft(sym, axis=2)
    occ = gather(spectra) / np.float32(np.sqrt(cfg.N))  # (N_r, N_sym, n_occ)

    power = occ.real.astype(np.float64) ** 2 + occ.imag.astype(np.float64) ** 2
    ref = int(np.argmax(np.sum(power, axis=(0, 1))))
    theta_hat, phi_hat = estimate_aoa(occ[:, :, ref], ctx.angle_grid())

    n_occ = occ.shape[2]
    step = max(1, n_occ // ctx.aic_subcarriers)
    sel = np.arange(0, n_occ, step)[: ctx.aic_subcarriers]
    nt_hat = estimate_num_tx_antennas(occ[:, :, sel].transpose(2, 0, 1), cfg.N_sym)

    from .phy import array_response

    weights = np.conj(array_response(theta_hat, phi_hat, ctx.n_rx, ctx.n_ry)) / math.sqrt(n_ant)
    stream = weights.astype(np.complex64) @ x[:, lo:hi]
    n = np.arange(len(stream))
    stream = stream * np.exp(-2j * np.pi * eps_hat * n / cfg.N).astype(np.complex64)
    fine = _fine_time_sync(stream, cfg, start_in_seg)
    short = fine + cfg.frame_samples - len(stream)
    if short > 0:  # frame clipped by the capture window edge
        stream = np.concatenate([stream, np.zeros(short, dtype=stream.dtype)])
    frame = stream[fine : fine + cfg.frame_samples]
    fsym = frame.reshape(cfg.N_sym, cfg.symbol_samples)[:, cfg.N_cp :]
    fspec = scipy.fft.fft(fsym, axis=1) / np.sqrt(cfg.N)
    focc = gather(fspec)

    tr1, tr2 = training_grids(cfg)
    s1 = gather(_symbol_norm(tr1, cfg.N))
    s2 = gather(_symbol_norm(tr2, cfg.N))
    h_hat, acg = estimate_channel(focc[:2], np.stack([s1, s2]))
    h_data, _ = estimate_channel(focc[1:2], s2[None, :])
    decoded = equalize_and_decode(focc[2:], h_data, cfg)

    frame_abs_start = lo + fine
    row = x[0]
    a, b = frame_abs_start, frame_abs_start + cfg.frame_samples
    n_out = len(row) - (min(b, len(row)) - a)
    if n_out > 64:
        sum_all = float(np.sum(row.real.astype(np.float64) ** 2 + row.imag.astype(np.float64) ** 2))
        seg_in = row[a:b]
        sum_in = float(np.sum(seg_in.real.astype(np.float64) ** 2 + seg_in.imag.astype(np.float64) ** 2))
        margin_power = (sum_all - sum_in) / n_out
        frame_power = sum_in / max(len(seg_in), 1)
        snr_hat = 10.0 * math.log10(max(frame_power - margin_power, 1e-30) / max(margin_power, 1e-30))
    else:
        snr_hat = float("nan")

    distance_hat = None
    pos_sense = None
    if ctx.regressor is not None:
        distance_hat = ctx.regressor.predict(acg)
        pos_sense = position_from_sensing(distance_hat, theta_hat, phi_hat, ctx.bs_position)
    speed = speed_from_doppler(fd_hat, cfg.f_c, theta_hat)

    return SensingReport(
        theta_hat=theta_hat,
        phi_hat=phi_hat,
        eps_hat=eps_hat,
        fd_hat=fd_hat,
        acg=acg,
        nt_hat=nt_hat,
        snr_hat_db=snr_hat,
        metric_peak=sync.metric_peak,
        frame_start=frame_abs_start,
        decoded=decoded,
        distance_hat=distance_hat,
        pos_sense=pos_sense,
        speed_sense=speed,
        h_hat=h_hat,
    )
