"""OFDM Remote-ID frame construction and the air-to-ground channel simulator.

A frame is ``N_sym`` OFDM symbols: two Zadoff-Chu training symbols followed
by QPSK payload symbols, with a cyclic prefix per symbol.  The first training
symbol occupies only even subcarrier offsets, which gives its time-domain
waveform a half-symbol repetition used for autocorrelation sync; the second
covers the full data band and anchors channel estimation.  On a two-antenna
drone the two training symbols are radiated from different antennas and the
payload follows the second, so the received per-subcarrier covariance carries
one spatial direction per transmit antenna.

Subcarrier bookkeeping is DC-centred: offset 0 (the exact centre bin for even
``N``) is left unused, the ``N_dc`` data subcarriers sit at offsets
+-1..+-N_dc/2, and the remaining bins are virtual (zero) to keep out-of-band
emissions down.

The channel applies, per subcarrier and antenna pair, a Rician mixture of a
deterministic line-of-sight response (true array phase, propagation-delay
ramp) and an i.i.d. multipath tail, scaled by the free-space link budget,
then a common Doppler/oscillator frequency ramp, a random capture offset, and
additive white Gaussian noise.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy.signal import resample_poly

from . import codec
from .errors import ConfigurationError
from .scenario import Pose, yaw_rotation

C_LIGHT = 3e8

# drone type code -> number of transmit antennas (closed world)
DRONE_TYPE_ANTENNAS = {0: 1, 1: 2}

ZC_ROOT_SYM1 = 25
ZC_ROOT_SYM2 = 29
PAYLOAD_BYTES = 63  # uuid(16) + type(1) + 11 float32 states(44) + crc(2)


# ---------------------------------------------------------------------------
# configuration and payload
# ---------------------------------------------------------------------------

@dataclass
class FrameConfig:
    """Static frame and numerology parameters."""

    N: int = 1024
    N_dc: int = 600
    N_vc: int = 424
    N_cp: int = 72
    N_sym: int = 8
    B: float = 15.36e6
    f_c: float = 2.4e9
    N_t: int = 1
    slot_duration: float = 1.0

    def __post_init__(self):
        if self.N_dc + self.N_vc != self.N:
            raise ConfigurationError("data + virtual subcarriers must equal N")
        if self.N_dc % 2:
            raise ConfigurationError("data subcarriers must split evenly around DC")
        if self.N_t not in (1, 2):
            raise ConfigurationError("only 1 or 2 transmit antennas supported")
        if self.frame_duration / self.slot_duration >= 0.01:
            raise ConfigurationError("frame must be much shorter than a slot")

    @property
    def delta_f(self) -> float:
        return self.B / self.N

    @property
    def symbol_samples(self) -> int:
        return self.N + self.N_cp

    @property
    def frame_samples(self) -> int:
        return self.N_sym * self.symbol_samples

    @property
    def frame_duration(self) -> float:
        return self.frame_samples / self.B

    @property
    def wavelength(self) -> float:
        return C_LIGHT / self.f_c

    def occupied_offsets(self) -> np.ndarray:
        """Data subcarrier offsets from the centre bin, ascending (DC omitted)."""
        half = self.N_dc // 2
        return np.concatenate([np.arange(-half, 0), np.arange(1, half + 1)])

    def bin_slices(self):
        """FFT-bin slices of the occupied band (negative block, positive block).

        The occupied offsets are two contiguous runs, so gathers/scatters can
        use slices instead of fancy indexing.
        """
        half = self.N_dc // 2
        return slice(self.N - half, self.N), slice(1, half + 1)

    def training_offsets(self) -> np.ndarray:
        """Even offsets carry the first training symbol (half-symbol repetition)."""
        offs = self.occupied_offsets()
        return offs[offs % 2 == 0]

    def payload_capacity_bits(self) -> int:
        return 2 * self.N_dc * (self.N_sym - 2)


@dataclass
class RidPayload:
    """Broadcast identity and motion state carried by one frame."""

    uuid: bytes
    drone_type: int
    position: np.ndarray
    v_body: np.ndarray
    a_body: np.ndarray
    yaw: float
    yaw_rate: float

    def expected_antennas(self) -> int | None:
        return DRONE_TYPE_ANTENNAS.get(self.drone_type)

    def state_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.position, self.v_body, self.a_body, [self.yaw, self.yaw_rate]]
        )

    def pack(self) -> bytes:
        if len(self.uuid) != 16:
            raise ValueError("uuid must be 16 bytes")
        body = self.uuid + struct.pack(
            "<B11f",
            self.drone_type,
            *np.asarray(self.position, dtype=np.float32),
            *np.asarray(self.v_body, dtype=np.float32),
            *np.asarray(self.a_body, dtype=np.float32),
            np.float32(self.yaw),
            np.float32(self.yaw_rate),
        )
        return codec.append_crc(body)

    @classmethod
    def unpack(cls, data: bytes) -> "RidPayload | None":
        if len(data) != PAYLOAD_BYTES or not codec.check_crc(data):
            return None
        uuid = data[:16]
        fields = struct.unpack("<B11f", data[16:-2])
        return cls(
            uuid=uuid,
            drone_type=fields[0],
            position=np.array(fields[1:4]),
            v_body=np.array(fields[4:7]),
            a_body=np.array(fields[7:10]),
            yaw=float(fields[10]),
            yaw_rate=float(fields[11]),
        )


# ---------------------------------------------------------------------------
# training sequences and frame synthesis
# ---------------------------------------------------------------------------

def build_zc_symbol(root: int, length: int) -> np.ndarray:
    """Zadoff-Chu sequence of the given root and length.

    Uses exp(-j pi u n(n+1)/L) for odd lengths and exp(-j pi u n^2 / L) for
    even ones; the root must be coprime with the length for the constant
    periodic autocorrelation property.
    """
    if length < 2 or root < 1 or math.gcd(root, length) != 1:
        raise ValueError("ZC root must be coprime with the sequence length")
    n = np.arange(length)
    if length % 2:
        phase = -np.pi * root * n * (n + 1) / length
    else:
        phase = -np.pi * root * n * n / length
    return np.exp(1j * phase)


def _largest_coprime_prime(limit: int) -> int:
    for cand in range(limit, 1, -1):
        if all(cand % k for k in range(2, int(math.sqrt(cand)) + 1)):
            return cand
    raise ValueError("no prime below limit")


def _cyclic_fit(seq: np.ndarray, length: int) -> np.ndarray:
    reps = int(np.ceil(length / len(seq)))
    return np.tile(seq, reps)[:length]


def training_grids(cfg: FrameConfig):
    """Frequency-domain training symbols on the full FFT grid (unnormalised)."""
    grid1 = np.zeros(cfg.N, dtype=complex)
    offs1 = cfg.training_offsets()
    zc1 = build_zc_symbol(ZC_ROOT_SYM1, _largest_coprime_prime(len(offs1)))
    grid1[offs1 % cfg.N] = _cyclic_fit(zc1, len(offs1))

    grid2 = np.zeros(cfg.N, dtype=complex)
    offs2 = cfg.occupied_offsets()
    zc2 = build_zc_symbol(ZC_ROOT_SYM2, _largest_coprime_prime(len(offs2)))
    grid2[offs2 % cfg.N] = _cyclic_fit(zc2, len(offs2))
    return grid1, grid2


def _symbol_norm(grid: np.ndarray, N: int) -> np.ndarray:
    """Scale so the synthesised symbol has unit mean time-domain power."""
    occ = np.count_nonzero(np.abs(grid) > 0)
    return grid * np.sqrt(N / occ)


def payload_to_symbols(payload_bits: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Coded payload plus pseudo-random filler mapped to QPSK data symbols."""
    coded = codec.scramble(codec.conv_encode(payload_bits))
    capacity = cfg.payload_capacity_bits()
    if len(coded) > capacity:
        raise ConfigurationError(
            f"payload needs {len(coded)} coded bits, frame carries {capacity}"
        )
    filler = codec.scramble_sequence(capacity)[len(coded):]
    allbits = np.concatenate([coded, filler])
    return codec.qpsk_modulate(allbits).reshape(cfg.N_sym - 2, cfg.N_dc)


def frame_grid(payload: RidPayload, cfg: FrameConfig) -> np.ndarray:
    """Frequency-domain frame, shape (N_sym, N, N_t), unit power per symbol.

    Training symbol 1 radiates from antenna 0, training symbol 2 and the data
    symbols from the last antenna, so each transmit antenna contributes an
    independent temporal stream.
    """
    grid = np.zeros((cfg.N_sym, cfg.N, cfg.N_t), dtype=complex)
    tr1, tr2 = training_grids(cfg)
    data_ant = cfg.N_t - 1
    grid[0, :, 0] = _symbol_norm(tr1, cfg.N)
    grid[1, :, data_ant] = _symbol_norm(tr2, cfg.N)
    qpsk = payload_to_symbols(codec.bytes_to_bits(payload.pack()), cfg)
    bins = cfg.occupied_offsets() % cfg.N
    for sym in range(cfg.N_sym - 2):
        grid[2 + sym, bins, data_ant] = qpsk[sym]
        grid[2 + sym, :, data_ant] = _symbol_norm(grid[2 + sym, :, data_ant], cfg.N)
    return grid


def synthesize(grid: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """IFFT each symbol, prepend cyclic prefixes; shape (N_t, frame_samples)."""
    time = np.sqrt(cfg.N) * np.fft.ifft(grid, axis=1)
    with_cp = np.concatenate([time[:, -cfg.N_cp :, :], time], axis=1)
    return with_cp.transpose(2, 0, 1).reshape(grid.shape[2], -1)


def modulate_frame(payload: RidPayload, cfg: FrameConfig) -> np.ndarray:
    """Full transmit chain: pack, protect, map, synthesise (N_t x samples)."""
    return synthesize(frame_grid(payload, cfg), cfg)


def demodulate_symbols(samples: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Strip CPs and FFT an aligned frame; inverse of :func:`synthesize`."""
    n_ant = samples.shape[0] if samples.ndim == 2 else 1
    x = np.atleast_2d(samples)[:, : cfg.frame_samples]
    x = x.reshape(n_ant, cfg.N_sym, cfg.symbol_samples)[:, :, cfg.N_cp :]
    return np.fft.fft(x, axis=2) / np.sqrt(cfg.N)


# ---------------------------------------------------------------------------
# link budget pieces
# ---------------------------------------------------------------------------

def free_space_path_loss(d: float, f_c: float) -> float:
    """Free-space loss in dB: 20 lg d + 20 lg f_c - 147.55."""
    if d <= 0:
        raise ValueError("distance must be positive")
    return 20.0 * math.log10(d) + 20.0 * math.log10(f_c) - 147.55


def doppler_shift(v: float, f_c: float, theta: float) -> float:
    """Doppler in Hz for speed v at azimuth theta: v f_c cos(theta) / c."""
    return v * f_c * math.cos(theta) / C_LIGHT


def array_response(theta: float, phi: float, N_rx: int, N_ry: int) -> np.ndarray:
    """UPA steering vector at azimuth theta / elevation phi, lambda/2 spacing.

    Element (u, v) = exp(-j pi (u cos(phi) cos(theta) + v cos(phi) sin(theta)))
    flattened with the second axis fastest.
    """
    u = np.arange(N_rx)[:, None]
    v = np.arange(N_ry)[None, :]
    phase = -np.pi * np.cos(phi) * (u * np.cos(theta) + v * np.sin(theta))
    return np.exp(1j * phase).reshape(-1)


def aoa_from_geometry(bs_position, target_position):
    """(theta, phi, distance) of the target as seen from the base station."""
    delta = np.asarray(target_position, dtype=float) - np.asarray(bs_position, dtype=float)
    d = float(np.linalg.norm(delta))
    theta = math.atan2(delta[1], delta[0])
    phi = math.asin(np.clip(delta[2] / d, -1.0, 1.0))
    return theta, phi, d


# ---------------------------------------------------------------------------
# channel
# ---------------------------------------------------------------------------

@dataclass
class ChannelParams:
    """Link geometry and budget for one capture."""

    pose: Pose
    bs_position: np.ndarray
    speed: float = 0.0
    P_t_dbm: float = 30.0
    G_t_db: float = 2.0
    G_r_db: float = 30.0
    rician_K_db: float = 3.0
    f_s: float = 100e6
    noise_power_dbm: float = -100.0
    N_rx: int = 8
    N_ry: int = 8
    oscillator_offset_hz: float = 0.0
    nlos_taps: int = 4
    nlos_decay: float = 1.0
    window_margin: int = 768

    def __post_init__(self):
        self.bs_position = np.asarray(self.bs_position, dtype=float)


@dataclass
class CaptureTruth:
    """Ground truth for evaluation only; never consumed by the sensing path."""

    position: np.ndarray
    theta: float
    phi: float
    distance: float
    speed: float
    doppler_hz: float
    oscillator_offset_hz: float
    frame_offset: int
    n_t: int
    P_r_dbm: float
    payload: RidPayload | None = None


@dataclass
class IqCapture:
    """Multi-antenna baseband samples at rate f_s plus hidden truth."""

    samples: np.ndarray
    f_s: float
    noise_power_dbm: float
    truth: CaptureTruth | None = None

    @property
    def n_antennas(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def complex_awgn(rng: np.random.Generator, shape, power: float) -> np.ndarray:
    """Circularly symmetric complex Gaussian noise of the given total power.

    Polar Box-Muller on float32 uniforms: one log/sqrt plus one cos/sin pass,
    about half the cost of two ziggurat draws at this array size.
    """
    u = rng.random(shape, dtype=np.float32)
    v = rng.random(shape, dtype=np.float32)
    radius = np.sqrt(np.float32(-power) * np.log1p(-u))
    angle = np.float32(2.0 * np.pi) * v
    out = np.empty(shape, dtype=np.complex64)
    out.real = radius * np.cos(angle)
    out.imag = radius * np.sin(angle)
    return out


def _tx_antenna_geometry(params: ChannelParams, cfg: FrameConfig):
    """Per-transmit-antenna AoA/delay: elements sit lambda/2 apart on the body-right axis."""
    right = yaw_rotation(params.pose.yaw) @ np.array([0.0, 1.0, 0.0])
    half = (cfg.N_t - 1) / 2.0
    out = []
    for p in range(cfg.N_t):
        pos = params.pose.position + (p - half) * (cfg.wavelength / 2.0) * right
        theta, phi, d = aoa_from_geometry(params.bs_position, pos)
        out.append((theta, phi, d))
    return out


def apply_channel(tx: np.ndarray, params: ChannelParams, cfg: FrameConfig, seed: int) -> IqCapture:
    """Propagate a transmitted frame to the array and produce a noisy capture.

    Per subcarrier i and antenna pair (q, p) the gain is
    sqrt(P_r) * ( sqrt(K/(K+1)) a_q(theta_p, phi_p) e^{-j 2 pi (f_c + f_i) tau_p}
                  + sqrt(1/(K+1)) sum_m g_{m,q,p} e^{-j 2 pi f_i tau_m} )
    with an exponential multipath power profile confined to the cyclic prefix.
    The whole frame then receives the Doppler-plus-oscillator frequency ramp,
    lands at a random offset inside the capture window, and white Gaussian
    noise at the configured floor is added.
    """
    rng = np.random.default_rng(seed)
    tx = np.atleast_2d(tx)
    if tx.shape[0] != cfg.N_t:
        raise ValueError("transmit matrix rows must match N_t")
    n_r = params.N_rx * params.N_ry

    theta0, phi0, d0 = aoa_from_geometry(params.bs_position, params.pose.position)
    if d0 <= 0:
        raise ValueError("drone is at the base station")
    p_r_dbm = params.P_t_dbm + params.G_t_db + params.G_r_db - free_space_path_loss(d0, cfg.f_c)
    amp = math.sqrt(dbm_to_watt(p_r_dbm))
    k_lin = 10.0 ** (params.rician_K_db / 10.0)

    offs = cfg.occupied_offsets()
    bins = offs % cfg.N
    f_base = offs * cfg.delta_f  # baseband subcarrier frequencies

    # the bulk propagation delay is indistinguishable from the unknown frame
    # position and is absorbed by the capture offset; only the per-antenna
    # delay spread (sub-sample) rides the subcarrier phase ramp, keeping the
    # effective impulse response inside the cyclic prefix at any range
    los = np.zeros((len(offs), n_r, cfg.N_t), dtype=np.complex64)
    for p, (theta_p, phi_p, d_p) in enumerate(_tx_antenna_geometry(params, cfg)):
        tau = d_p / C_LIGHT
        tau_rel = (d_p - d0) / C_LIGHT
        ramp = np.exp(-2j * np.pi * (cfg.f_c * tau + f_base * tau_rel)).astype(np.complex64)
        resp = array_response(theta_p, phi_p, params.N_rx, params.N_ry).astype(np.complex64)
        los[:, :, p] = ramp[:, None] * resp[None, :]

    tap_pow = np.exp(-np.arange(params.nlos_taps) / params.nlos_decay)
    tap_pow /= tap_pow.sum()
    g = rng.standard_normal((params.nlos_taps, n_r, cfg.N_t)) + 1j * rng.standard_normal(
        (params.nlos_taps, n_r, cfg.N_t)
    )
    g *= np.sqrt(tap_pow / 2.0)[:, None, None]
    tap_ramp = np.exp(
        -2j * np.pi * np.outer(f_base, np.arange(params.nlos_taps) / cfg.B)
    )
    nlos = (tap_ramp.astype(np.complex64) @ g.reshape(params.nlos_taps, -1).astype(np.complex64))
    nlos = nlos.reshape(len(offs), n_r, cfg.N_t)

    h = np.complex64(amp) * (
        np.complex64(math.sqrt(k_lin / (k_lin + 1.0))) * los
        + np.complex64(math.sqrt(1.0 / (k_lin + 1.0))) * nlos
    )

    # frequency-domain application, exact since the delay spread sits in the CP
    tx_grid = demodulate_symbols(tx, cfg)  # (N_t, N_sym, N)
    s_occ = tx_grid[:, :, bins].astype(np.complex64) * np.complex64(math.sqrt(cfg.N))
    rx_grid = h[:, :, 0].T[:, None, :] * s_occ[0][None, :, :]  # (n_r, N_sym, occ)
    for p in range(1, cfg.N_t):
        rx_grid += h[:, :, p].T[:, None, :] * s_occ[p][None, :, :]
    full = np.zeros((n_r, cfg.N_sym, cfg.N), dtype=np.complex64)
    neg, pos = cfg.bin_slices()
    half = cfg.N_dc // 2
    full[:, :, neg] = rx_grid[:, :, :half]
    full[:, :, pos] = rx_grid[:, :, half:]
    body = scipy.fft.ifft(full, axis=2, overwrite_x=True)
    frame = np.empty((n_r, cfg.N_sym, cfg.symbol_samples), dtype=np.complex64)
    frame[:, :, cfg.N_cp :] = body
    frame[:, :, : cfg.N_cp] = body[:, :, -cfg.N_cp :]
    frame = frame.reshape(n_r, -1)

    f_d = doppler_shift(params.speed, cfg.f_c, theta0)
    eps_hz = f_d + params.oscillator_offset_hz
    if abs(eps_hz) >= cfg.delta_f:
        raise ValueError("total frequency offset exceeds one subcarrier spacing")
    if eps_hz != 0.0:
        n = np.arange(frame.shape[1])
        frame *= np.exp(2j * np.pi * eps_hz * n / cfg.B).astype(np.complex64)[None, :]

    if params.f_s != cfg.B:
        from fractions import Fraction

        ratio = Fraction(params.f_s / cfg.B).limit_denominator(10000)
        frame = resample_poly(frame, ratio.numerator, ratio.denominator, axis=1)
    frame_len = frame.shape[1]

    margin = max(params.window_margin, 8)
    window = frame_len + margin
    offset = int(rng.integers(0, margin))
    samples = complex_awgn(rng, (n_r, window), dbm_to_watt(params.noise_power_dbm))
    samples[:, offset : offset + frame_len] += frame.astype(np.complex64)

    truth = CaptureTruth(
        position=params.pose.position.copy(),
        theta=theta0,
        phi=phi0,
        distance=d0,
        speed=params.speed,
        doppler_hz=f_d,
        oscillator_offset_hz=params.oscillator_offset_hz,
        frame_offset=offset,
        n_t=cfg.N_t,
        P_r_dbm=p_r_dbm,
    )
    return IqCapture(samples=samples, f_s=params.f_s, noise_power_dbm=params.noise_power_dbm, truth=truth)


# ---------------------------------------------------------------------------
# capture file format
# ---------------------------------------------------------------------------

_CAPTURE_MAGIC = b"RIDIQ001"
_HEADER = struct.Struct("<8sIQdd")  # magic, N_r, L, f_s, noise dBm


def save_capture(capture: IqCapture, path) -> None:
    """Binary capture file: little-endian header then float32 I/Q, antenna-major."""
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                _CAPTURE_MAGIC,
                capture.n_antennas,
                capture.n_samples,
                capture.f_s,
                capture.noise_power_dbm,
            )
        )
        inter = np.empty((capture.n_antennas, 2 * capture.n_samples), dtype=np.float32)
        inter[:, 0::2] = capture.samples.real
        inter[:, 1::2] = capture.samples.imag
        inter.tofile(fh)


def load_capture(path) -> IqCapture:
    with open(path, "rb") as fh:
        magic, n_r, length, f_s, noise_dbm = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _CAPTURE_MAGIC:
            raise ValueError("not a capture file")
        raw = np.fromfile(fh, dtype=np.float32, count=2 * n_r * length)
    raw = raw.reshape(n_r, 2 * length)
    samples = (raw[:, 0::2] + 1j * raw[:, 1::2]).astype(np.complex64)
    return IqCapture(samples=samples, f_s=f_s, noise_power_dbm=noise_dbm, truth=None)
