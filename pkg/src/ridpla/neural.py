"""Data-driven motion estimator: LSTM, multi-head self-attention with a
residual connection, layer normalization, temporal average pooling, ReLU, and
an affine head, implemented directly on numpy with hand-derived reverse-mode
gradients (no autodiff framework).

Inputs are windows of the last T1 decoded 11-dimensional state vectors,
z-scored with statistics frozen at training time.  The head regresses the
normalized one-slot displacement, which is rescaled and added to the window's
last position; learning displacements keeps the regression targets
well-conditioned at kilometre-scale coordinates while the network remains a
deterministic function of (window, parameters).

Training is plain mini-batch Adam with plateau-halving of the step size and a
fixed seed, which makes parameter trajectories bitwise reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDiverged

LN_EPS = 1e-5
POSITION_SLICE = slice(0, 3)  # position columns inside a state row


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

PARAM_ORDER = [
    "Wx", "Wh", "b", "Wq", "Wk", "Wv", "Wo", "bo",
    "ln_gain", "ln_bias", "Wf", "bf",
]
STAT_ORDER = ["in_mean", "in_scale", "out_scale"]


@dataclass
class NetParams:
    """All trainable tensors plus the frozen normalization statistics."""

    Wx: np.ndarray
    Wh: np.ndarray
    b: np.ndarray
    Wq: np.ndarray  # (heads, H, H//heads)
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    Wf: np.ndarray
    bf: np.ndarray
    in_mean: np.ndarray
    in_scale: np.ndarray
    out_scale: np.ndarray

    @property
    def hidden(self) -> int:
        return self.Wh.shape[0]

    @property
    def heads(self) -> int:
        return self.Wq.shape[0]

    @property
    def in_dim(self) -> int:
        return self.Wx.shape[0]

    def trainable(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_ORDER}


def init_params(
    seed: int,
    in_dim: int = 11,
    hidden: int = 128,
    heads: int = 4,
    in_mean=None,
    in_scale=None,
    out_scale=None,
) -> NetParams:
    """Seeded scaled-uniform initialization; forget-gate bias starts at 1."""
    if hidden % heads:
        raise ValueError("hidden size must divide evenly across heads")
    rng = np.random.default_rng(seed)
    dh = hidden // heads

    def uni(*shape, fan):
        bound = np.sqrt(1.0 / fan)
        return rng.uniform(-bound, bound, size=shape)

    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0
    return NetParams(
        Wx=uni(in_dim, 4 * hidden, fan=in_dim),
        Wh=uni(hidden, 4 * hidden, fan=hidden),
        b=b,
        Wq=uni(heads, hidden, dh, fan=hidden),
        Wk=uni(heads, hidden, dh, fan=hidden),
        Wv=uni(heads, hidden, dh, fan=hidden),
        Wo=uni(hidden, hidden, fan=hidden),
        bo=np.zeros(hidden),
        ln_gain=np.ones(hidden),
        ln_bias=np.zeros(hidden),
        Wf=uni(hidden, 3, fan=hidden),
        bf=np.zeros(3),
        in_mean=np.zeros(in_dim) if in_mean is None else np.asarray(in_mean, dtype=float),
        in_scale=np.ones(in_dim) if in_scale is None else np.asarray(in_scale, dtype=float),
        out_scale=np.ones(3) if out_scale is None else np.asarray(out_scale, dtype=float),
    )


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_forward(window: np.ndarray, params: NetParams, cache: dict | None = None) -> np.ndarray:
    """Standard LSTM over the (already normalized) rows; zero initial state.

    Per step: xi_j = o_j * tanh(f_j * c_{j-1} + i_j * c~_j).  Accepts (T, D)
    or batched (B, T, D); returns matching (.., T, H).
    """
    single = window.ndim == 2
    x = window[None] if single else window
    B, T, _ = x.shape
    H = params.hidden
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    xi = np.empty((B, T, H))
    steps = []
    for j in range(T):
        z = x[:, j] @ params.Wx + h @ params.Wh + params.b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = _sigmoid(z[:, 3 * H :])
        c_prev = c
        c = f * c_prev + i * g
        hc = np.tanh(c)
        h_prev = h
        h = o * hc
        xi[:, j] = h
        if cache is not None:
            steps.append((i, f, g, o, c_prev, hc, h_prev))
    if cache is not None:
        cache["steps"] = steps
        cache["x"] = x
    return xi[0] if single else xi


def mha_forward(xi: np.ndarray, params: NetParams, cache: dict | None = None) -> np.ndarray:
    """Multi-head scaled dot-product self-attention plus output projection."""
    single = xi.ndim == 2
    X = xi[None] if single else xi
    heads, dh = params.heads, params.Wq.shape[2]
    outs, saved = [], []
    for m in range(heads):
        Q = X @ params.Wq[m]
        K = X @ params.Wk[m]
        V = X @ params.Wv[m]
        S = Q @ K.transpose(0, 2, 1) / np.sqrt(dh)
        S = S - np.max(S, axis=-1, keepdims=True)
        expS = np.exp(S)
        P = expS / np.sum(expS, axis=-1, keepdims=True)
        outs.append(P @ V)
        if cache is not None:
            saved.append((Q, K, V, P))
    concat = np.concatenate(outs, axis=-1)
    out = concat @ params.Wo + params.bo
    if cache is not None:
        cache["heads"] = saved
        cache["concat"] = concat
        cache["xi_in"] = X
    return out[0] if single else out


def attention_weights(xi: np.ndarray, params: NetParams) -> np.ndarray:
    """Per-head softmax attention matrices, shape (heads, T, T)."""
    X = xi[None] if xi.ndim == 2 else xi
    dh = params.Wq.shape[2]
    mats = []
    for m in range(params.heads):
        S = (X @ params.Wq[m]) @ (X @ params.Wk[m]).transpose(0, 2, 1) / np.sqrt(dh)
        S = S - np.max(S, axis=-1, keepdims=True)
        e = np.exp(S)
        mats.append(e / np.sum(e, axis=-1, keepdims=True))
    return np.stack(mats, axis=1)[0] if xi.ndim == 2 else np.stack(mats, axis=1)


def normalize_window(window: np.ndarray, params: NetParams) -> np.ndarray:
    return (window - params.in_mean) / params.in_scale


def denormalize_window(normed: np.ndarray, params: NetParams) -> np.ndarray:
    return normed * params.in_scale + params.in_mean


def _forward(window_raw: np.ndarray, params: NetParams, cache: dict | None = None):
    x = normalize_window(window_raw, params)
    xi = lstm_forward(x, params, cache)
    att = mha_forward(xi, params, cache)
    U = xi + att
    mu = np.mean(U, axis=-1, keepdims=True)
    var = np.var(U, axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (U - mu) * ivar
    Y = params.ln_gain * xhat + params.ln_bias
    u = np.mean(Y, axis=-2)
    r = np.maximum(u, 0.0)
    yn = r @ params.Wf + params.bf
    pred = window_raw[..., -1, POSITION_SLICE] + params.out_scale * yn
    if cache is not None:
        cache.update(U=U, ivar=ivar, xhat=xhat, u=u, r=r, yn=yn)
    return pred


def predict_position(window: np.ndarray, params: NetParams) -> np.ndarray:
    """Position estimate for the slot following the window (meters)."""
    window = np.asarray(window, dtype=float)
    if window.ndim != 2:
        raise ValueError("expected a single (T1, D) window")
    return _forward(window, params)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _backward(dpred: np.ndarray, params: NetParams, cache: dict) -> dict:
    """Gradients of the scalar loss w.r.t. every trainable tensor.

    ``dpred`` is dL/d(prediction in meters), shape (B, 3).
    """
    H = params.hidden
    heads, dh = params.heads, params.Wq.shape[2]
    B, T, _ = cache["x"].shape
    grads = {}

    dyn = dpred * params.out_scale
    grads["Wf"] = cache["r"].T @ dyn
    grads["bf"] = np.sum(dyn, axis=0)
    dr = dyn @ params.Wf.T
    du = dr * (cache["u"] > 0)
    dY = np.repeat(du[:, None, :], T, axis=1) / T

    # layer norm
    xhat, ivar = cache["xhat"], cache["ivar"]
    grads["ln_gain"] = np.sum(dY * xhat, axis=(0, 1))
    grads["ln_bias"] = np.sum(dY, axis=(0, 1))
    dxhat = dY * params.ln_gain
    dU = (
        dxhat - np.mean(dxhat, axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    ) * ivar

    dxi = dU.copy()  # residual path
    datt = dU

    # output projection
    concat = cache["concat"]
    grads["Wo"] = concat.reshape(-1, H).T @ datt.reshape(-1, H)
    grads["bo"] = np.sum(datt, axis=(0, 1))
    dconcat = datt @ params.Wo.T

    X = cache["xi_in"]
    grads["Wq"] = np.zeros_like(params.Wq)
    grads["Wk"] = np.zeros_like(params.Wk)
    grads["Wv"] = np.zeros_like(params.Wv)
    for m in range(heads):
        Q, K, V, P = cache["heads"][m]
        dOm = dconcat[:, :, m * dh : (m + 1) * dh]
        dP = dOm @ V.transpose(0, 2, 1)
        dV = P.transpose(0, 2, 1) @ dOm
        dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True))
        dS = dS / np.sqrt(dh)
        dQ = dS @ K
        dK = dS.transpose(0, 2, 1) @ Q
        grads["Wq"][m] = X.reshape(-1, H).T @ dQ.reshape(-1, dh)
        grads["Wk"][m] = X.reshape(-1, H).T @ dK.reshape(-1, dh)
        grads["Wv"][m] = X.reshape(-1, H).T @ dV.reshape(-1, dh)
        dxi += dQ @ params.Wq[m].T + dK @ params.Wk[m].T + dV @ params.Wv[m].T

    # LSTM backprop through time
    grads["Wx"] = np.zeros_like(params.Wx)
    grads["Wh"] = np.zeros_like(params.Wh)
    grads["b"] = np.zeros_like(params.b)
    dh_carry = np.zeros((B, H))
    dc_carry = np.zeros((B, H))
    for j in range(T - 1, -1, -1):
        i, f, g, o, c_prev, hc, h_prev = cache["steps"][j]
        dhid = dxi[:, j] + dh_carry
        do = dhid * hc
        dc = dc_carry + dhid * o * (1.0 - hc * hc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc_carry = dc * f
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)],
            axis=1,
        )
        grads["Wx"] += cache["x"][:, j].T @ dz
        grads["Wh"] += h_prev.T @ dz
        grads["b"] += np.sum(dz, axis=0)
        dh_carry = dz @ params.Wh.T
    return grads


def loss_and_grads(windows: np.ndarray, targets: np.ndarray, params: NetParams):
    """Mean squared position error (m^2) over the batch and its gradients."""
    cache = {}
    pred = _forward(windows, params, cache)
    err = pred - targets
    loss = float(np.mean(np.sum(err * err, axis=1)))
    dpred = 2.0 * err / windows.shape[0]
    return loss, _backward(dpred, params, cache)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    hidden: int = 128
    heads: int = 4
    plateau_patience: int = 8
    plateau_factor: float = 0.5
    min_lr: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


def fit_normalization(windows: np.ndarray, targets: np.ndarray):
    """Frozen z-score stats for inputs and the displacement scale for targets."""
    flat = windows.reshape(-1, windows.shape[-1])
    in_mean = np.mean(flat, axis=0)
    in_scale = np.maximum(np.std(flat, axis=0), 1e-6)
    disp = targets - windows[:, -1, POSITION_SLICE]
    out_scale = np.maximum(np.std(disp, axis=0), 1e-6)
    return in_mean, in_scale, out_scale


def train(dataset, config: TrainConfig = TrainConfig()) -> tuple[NetParams, list]:
    """Fit the estimator on (window, true position) pairs.

    Mini-batch Adam on the squared-error loss; the step size halves when the
    epoch-median loss stops improving.  Returns the parameters and the
    per-epoch median loss history.  Raises :class:`TrainingDiverged` on NaN.
    """
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    windows = np.stack([np.asarray(w, dtype=float) for w, _ in dataset])
    targets = np.stack([np.asarray(t, dtype=float) for _, t in dataset])
    in_mean, in_scale, out_scale = fit_normalization(windows, targets)
    params = init_params(
        config.seed,
        in_dim=windows.shape[-1],
        hidden=config.hidden,
        heads=config.heads,
        in_mean=in_mean,
        in_scale=in_scale,
        out_scale=out_scale,
    )

    rng = np.random.default_rng(config.seed + 1)
    m_state = {k: np.zeros_like(v) for k, v in params.trainable().items()}
    v_state = {k: np.zeros_like(v) for k, v in params.trainable().items()}
    step = 0
    lr = config.lr
    history = []
    best = np.inf
    stalled = 0

    n = len(windows)
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            loss, grads = loss_and_grads(windows[idx], targets[idx], params)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at step {step}")
            losses.append(loss)
            step += 1
            for name, grad in grads.items():
                m_state[name] = config.adam_beta1 * m_state[name] + (1 - config.adam_beta1) * grad
                v_state[name] = config.adam_beta2 * v_state[name] + (1 - config.adam_beta2) * grad**2
                mhat = m_state[name] / (1 - config.adam_beta1**step)
                vhat = v_state[name] / (1 - config.adam_beta2**step)
                getattr(params, name)[...] -= lr * mhat / (np.sqrt(vhat) + config.adam_eps)
        median = float(np.median(losses))
        history.append(median)
        if median < best * (1.0 - 1e-3):
            best = median
            stalled = 0
        else:
            stalled += 1
            if stalled >= config.plateau_patience:
                lr = max(lr * config.plateau_factor, config.min_lr)
                stalled = 0
    return params, history


# ---------------------------------------------------------------------------
# prediction-error covariance
# ---------------------------------------------------------------------------

@dataclass
class ErrorCov3:
    """Running mean of prediction-error outer products (3x3, PSD)."""

    sum_outer: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    count: int = 0

    def matrix(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros((3, 3))
        return self.sum_outer / self.count


def update_error_cov(cov: ErrorCov3, pred, reference) -> ErrorCov3:
    """Fold one prediction error into the running covariance.

    Offline the reference is ground truth; online it is the fused position of
    authenticated slots, the only reference that exists at runtime.
    """
    err = np.asarray(pred, dtype=float) - np.asarray(reference, dtype=float)
    return ErrorCov3(sum_outer=cov.sum_outer + np.outer(err, err), count=cov.count + 1)


def error_cov_from_dataset(params: NetParams, dataset) -> ErrorCov3:
    cov = ErrorCov3()
    for window, target in dataset:
        cov = update_error_cov(cov, predict_position(np.asarray(window, dtype=float), params), target)
    return cov


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"RIDNET01"
_CKPT_VERSION = 1


def save_checkpoint(params: NetParams, path) -> None:
    """Versioned binary checkpoint: header with shapes, then row-major float64."""
    names = PARAM_ORDER + STAT_ORDER
    meta = {
        "version": _CKPT_VERSION,
        "arrays": [[name, list(getattr(params, name).shape)] for name in names],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(getattr(params, name), dtype=np.float64).tobytes())


def load_checkpoint(path) -> NetParams:
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(fh.read(blob_len))
        arrays = {}
        for name, shape in meta["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype=np.float64).reshape(shape)
            arrays[name] = data.copy()
    return NetParams(**arrays)
