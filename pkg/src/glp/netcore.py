"""Micro recurrent network with hand-derived gradients.

Architecture
------------
Encoder ("LIBC", longitudinal iterative block): a 5-hidden-unit LSTM run over
the 12-month window in both directions, the two per-month hidden states
concatenated (10), passed through ReLU, then an affine condensing map back to
5 channels followed by ReLU. Output shape equals input shape, so the block
can be iterated autoregressively: the value channel of one application's
output feeds the next application's input while age/gender are held, the
real-flag channel is zeroed (everything generated is an estimate) and the
discrete channel is recomputed from the denormalized value.

Regressor: affine 5->2, ReLU, affine 2->2, ReLU, affine 2->1. Its scalar
output is the normalized-value forecast one month past the current window.

Training graphs
---------------
`rollout_loss_and_grads` computes batch-mean MSE and its exact gradient for
both graphs: gap = 0 is the single-pass supervised path, gap = g > 0 unrolls
g encoder applications and backpropagates through all of them (the discrete
recomputation and the held channels are constants, so between applications
gradient flows through the value channel only). Gradients are verified
against central finite differences in the test suite.

Weight file format ("GLP1", version 1)
--------------------------------------
Little-endian: magic "GLP1", u16 format version, u8 parameter id (index into
`PARAMETER_ORDER`), u8 certainty threshold, then 516 IEEE-754 float64 values
in `PARAM_LAYOUT` order, then u32 CRC-32 of all preceding bytes. Recurrent
weight matrices are stored with the direction axis first (0 = forward scan,
1 = backward scan) and gate rows ordered input, forget, cell, output; all
arrays are row-major.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .cohort import PARAMETER_ORDER, LabParameter
from .encoding import discrete_codes
from .errors import IntegrityError, TrainingError

HIDDEN = 5
CHANNELS = 5
GATE_ROWS = 4 * HIDDEN  # gate order: input, forget, cell, output


@dataclass
class LibcParams:
    w_x: np.ndarray  # (2, 20, 5) input weights, per direction
    w_h: np.ndarray  # (2, 20, 5) recurrent weights
    b: np.ndarray    # (2, 20) gate biases
    w_c: np.ndarray  # (5, 10) condensing map
    b_c: np.ndarray  # (5,)


@dataclass
class RegressorParams:
    w1: np.ndarray  # (2, 5)
    b1: np.ndarray  # (2,)
    w2: np.ndarray  # (2, 2)
    b2: np.ndarray  # (2,)
    w3: np.ndarray  # (1, 2)
    b3: np.ndarray  # (1,)


@dataclass
class GlpModel:
    parameter: LabParameter
    certain: int
    libc: LibcParams
    regressor: RegressorParams
    version: int = 1


PARAM_LAYOUT: tuple[tuple[str, tuple[int, ...]], ...] = (
    ("libc.w_x", (2, GATE_ROWS, CHANNELS)),
    ("libc.w_h", (2, GATE_ROWS, HIDDEN)),
    ("libc.b", (2, GATE_ROWS)),
    ("libc.w_c", (HIDDEN, 2 * HIDDEN)),
    ("libc.b_c", (HIDDEN,)),
    ("regressor.w1", (2, 5)),
    ("regressor.b1", (2,)),
    ("regressor.w2", (2, 2)),
    ("regressor.b2", (2,)),
    ("regressor.w3", (1, 2)),
    ("regressor.b3", (1,)),
)


_N_PARAMETERS = sum(
    int(np.prod(shape)) for _, shape in PARAM_LAYOUT
)


def n_parameters() -> int:
    return _N_PARAMETERS


def _model_arrays(model: GlpModel) -> list[np.ndarray]:
    arrays = []
    for path, _ in PARAM_LAYOUT:
        obj = model
        for part in path.split("."):
            obj = getattr(obj, part)
        arrays.append(obj)
    return arrays


def model_to_vector(model: GlpModel) -> np.ndarray:
    return np.concatenate([a.ravel() for a in _model_arrays(model)])


def vector_to_model(vec: np.ndarray, parameter: LabParameter, certain: int) -> GlpModel:
    if vec.shape != (n_parameters(),):
        raise IntegrityError(f"expected {n_parameters()} parameters, got {vec.shape}")
    pieces = {}
    offset = 0
    for path, shape in PARAM_LAYOUT:
        size = int(np.prod(shape))
        pieces[path] = vec[offset : offset + size].reshape(shape).copy()
        offset += size
    libc = LibcParams(
        pieces["libc.w_x"], pieces["libc.w_h"], pieces["libc.b"], pieces["libc.w_c"], pieces["libc.b_c"]
    )
    reg = RegressorParams(
        pieces["regressor.w1"], pieces["regressor.b1"], pieces["regressor.w2"],
        pieces["regressor.b2"], pieces["regressor.w3"], pieces["regressor.b3"],
    )
    return GlpModel(parameter, certain, libc, reg)


def set_model_vector(model: GlpModel, vec: np.ndarray) -> None:
    """Overwrite a model's parameters in place from a flat vector."""
    offset = 0
    for array in _model_arrays(model):
        size = array.size
        array[...] = vec[offset : offset + size].reshape(array.shape)
        offset += size


def models_equal(a: GlpModel, b: GlpModel) -> bool:
    return (
        a.parameter is b.parameter
        and a.certain == b.certain
        and a.version == b.version
        and all(np.array_equal(x, y) for x, y in zip(_model_arrays(a), _model_arrays(b)))
    )


def init_model(parameter: LabParameter, certain: int, seed: int) -> GlpModel:
    """Uniform +-sqrt(6/(fan_in+fan_out)) per affine map and gate block;
    forget-gate bias starts at 1."""
    rng = np.random.default_rng(seed)

    def block(fan_in, fan_out, shape):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    w_x = np.empty((2, GATE_ROWS, CHANNELS))
    w_h = np.empty((2, GATE_ROWS, HIDDEN))
    for d in range(2):
        for gate in range(4):
            rows = slice(gate * HIDDEN, (gate + 1) * HIDDEN)
            w_x[d, rows] = block(CHANNELS, HIDDEN, (HIDDEN, CHANNELS))
            w_h[d, rows] = block(HIDDEN, HIDDEN, (HIDDEN, HIDDEN))
    b = np.zeros((2, GATE_ROWS))
    b[:, HIDDEN : 2 * HIDDEN] = 1.0
    libc = LibcParams(w_x, w_h, b, block(2 * HIDDEN, HIDDEN, (HIDDEN, 2 * HIDDEN)), np.zeros(HIDDEN))
    reg = RegressorParams(
        block(5, 2, (2, 5)), np.zeros(2),
        block(2, 2, (2, 2)), np.zeros(2),
        block(2, 1, (1, 2)), np.zeros(1),
    )
    return GlpModel(parameter, certain, libc, reg)


# ---------------------------------------------------------------------------
# forward


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LibcTrace:
    xs: np.ndarray        # (2, B, 12, 5) scan-order inputs
    gate_i: np.ndarray    # (2, B, 12, 5)
    gate_f: np.ndarray
    gate_g: np.ndarray
    gate_o: np.ndarray
    c_prev: np.ndarray    # (2, B, 12, 5)
    tanh_c: np.ndarray
    h_prev: np.ndarray
    concat: np.ndarray    # (B, 12, 10) aligned pre-ReLU
    pre: np.ndarray       # (B, 12, 5) pre-ReLU condensed


def libc_forward(p: LibcParams, x: np.ndarray, need_trace: bool = False):
    """Run the encoder over a (B, 12, 5) batch; returns (out, trace)."""
    if not np.all(np.isfinite(x)):
        raise TrainingError("non-finite encoder input")
    B, T, _ = x.shape
    xs = np.stack([x, x[:, ::-1, :]])  # direction 0 reads months forward, 1 backward
    w_x_t = p.w_x.transpose(0, 2, 1)  # (2, 5, 20)
    w_h_t = p.w_h.transpose(0, 2, 1)  # (2, 5, 20)
    xz = xs.reshape(2, B * T, CHANNELS) @ w_x_t
    xz = xz.reshape(2, B, T, GATE_ROWS) + p.b[:, None, None, :]
    h = np.zeros((2, B, HIDDEN))
    c = np.zeros((2, B, HIDDEN))
    hs = np.empty((2, B, T, HIDDEN))
    if need_trace:
        tr = LibcTrace(
            xs=xs,
            gate_i=np.empty((2, B, T, HIDDEN)), gate_f=np.empty((2, B, T, HIDDEN)),
            gate_g=np.empty((2, B, T, HIDDEN)), gate_o=np.empty((2, B, T, HIDDEN)),
            c_prev=np.empty((2, B, T, HIDDEN)), tanh_c=np.empty((2, B, T, HIDDEN)),
            h_prev=np.empty((2, B, T, HIDDEN)), concat=None, pre=None,
        )
    for t in range(T):
        z = xz[:, :, t, :] + h @ w_h_t
        gi_gf = _sigmoid(z[..., 0:10])
        gi = gi_gf[..., 0:5]
        gf = gi_gf[..., 5:10]
        gg = np.tanh(z[..., 10:15])
        go = _sigmoid(z[..., 15:20])
        if need_trace:
            tr.gate_i[:, :, t] = gi
            tr.gate_f[:, :, t] = gf
            tr.gate_g[:, :, t] = gg
            tr.gate_o[:, :, t] = go
            tr.c_prev[:, :, t] = c
            tr.h_prev[:, :, t] = h
        c = gf * c + gi * gg
        tc = np.tanh(c)
        h = go * tc
        if need_trace:
            tr.tanh_c[:, :, t] = tc
        hs[:, :, t] = h
    concat = np.concatenate([hs[0], hs[1][:, ::-1, :]], axis=2)  # (B, T, 10)
    act = np.maximum(concat, 0.0)
    pre = act @ p.w_c.T + p.b_c
    out = np.maximum(pre, 0.0)
    if need_trace:
        tr.concat = concat
        tr.pre = pre
        return out, tr
    return out, None


def libc_backward(p: LibcParams, tr: LibcTrace, d_out: np.ndarray):
    """Gradient of a scalar loss wrt encoder params and input, given d_out."""
    act = np.maximum(tr.concat, 0.0)
    d_pre = d_out * (tr.pre > 0)
    B, T = d_out.shape[0], tr.xs.shape[2]
    d_wc = d_pre.reshape(B * T, HIDDEN).T @ act.reshape(B * T, 2 * HIDDEN)
    d_bc = d_pre.sum(axis=(0, 1))
    d_act = d_pre @ p.w_c
    d_concat = d_act * (tr.concat > 0)
    # back to scan order per direction
    d_hs = np.stack([d_concat[:, :, :HIDDEN], d_concat[:, ::-1, HIDDEN:]])

    d_wx = np.zeros_like(p.w_x)
    d_wh = np.zeros_like(p.w_h)
    d_b = np.zeros_like(p.b)
    d_xs = np.empty_like(tr.xs)
    dz_all = np.empty((2, B, T, GATE_ROWS))
    dh_carry = np.zeros((2, B, HIDDEN))
    dc_carry = np.zeros_like(dh_carry)
    for t in range(T - 1, -1, -1):
        gi = tr.gate_i[:, :, t]
        gf = tr.gate_f[:, :, t]
        gg = tr.gate_g[:, :, t]
        go = tr.gate_o[:, :, t]
        tc = tr.tanh_c[:, :, t]
        dh = d_hs[:, :, t] + dh_carry
        do = dh * tc
        dc = dc_carry + dh * go * (1.0 - tc * tc)
        dc_carry = dc * gf
        dz = dz_all[:, :, t]
        dz[..., 0:5] = dc * gg * gi * (1 - gi)
        dz[..., 5:10] = dc * tr.c_prev[:, :, t] * gf * (1 - gf)
        dz[..., 10:15] = dc * gi * (1 - gg * gg)
        dz[..., 15:20] = do * go * (1 - go)
        d_xs[:, :, t] = dz @ p.w_x
        dh_carry = dz @ p.w_h
    # weight gradients accumulate over batch and time in two stacked matmuls
    dz_flat = dz_all.reshape(2, B * T, GATE_ROWS).transpose(0, 2, 1)
    d_wx += dz_flat @ tr.xs.reshape(2, B * T, CHANNELS)
    d_wh += dz_flat @ tr.h_prev.reshape(2, B * T, HIDDEN)
    d_b += dz_all.sum(axis=(1, 2))
    d_x = d_xs[0] + d_xs[1][:, ::-1, :]
    grads = LibcParams(d_wx, d_wh, d_b, d_wc, d_bc)
    return grads, d_x


@dataclass
class RegressorTrace:
    latent: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray


def regressor_forward(p: RegressorParams, latent: np.ndarray, need_trace: bool = False):
    """Forecast scalar from a (B, 5) latent batch; returns (pred, trace)."""
    if not np.all(np.isfinite(latent)):
        raise TrainingError("non-finite regressor input")
    z1 = latent @ p.w1.T + p.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ p.w2.T + p.b2
    a2 = np.maximum(z2, 0.0)
    y = (a2 @ p.w3.T + p.b3)[:, 0]
    if need_trace:
        return y, RegressorTrace(latent, z1, a1, z2, a2)
    return y, None


def regressor_backward(p: RegressorParams, tr: RegressorTrace, d_y: np.ndarray):
    d_y2 = d_y[:, None]
    d_w3 = d_y2.T @ tr.a2
    d_b3 = np.array([d_y.sum()])
    d_a2 = d_y2 @ p.w3
    d_z2 = d_a2 * (tr.z2 > 0)
    d_w2 = d_z2.T @ tr.a1
    d_b2 = d_z2.sum(axis=0)
    d_a1 = d_z2 @ p.w2
    d_z1 = d_a1 * (tr.z1 > 0)
    d_w1 = d_z1.T @ tr.latent
    d_b1 = d_z1.sum(axis=0)
    d_latent = d_z1 @ p.w1
    grads = RegressorParams(d_w1, d_b1, d_w2, d_b2, d_w3, d_b3)
    return grads, d_latent


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape or pred.size < 1:
        raise TrainingError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# rollout graph


def next_input(out: np.ndarray, x0: np.ndarray, parameter: LabParameter) -> np.ndarray:
    """Reproject an encoder output onto the frame-encoding manifold so it can
    feed the next application: age/gender held from the original frame, flag
    0 (estimated), discrete code recomputed from the denormalized value."""
    nxt = np.empty_like(out)
    nxt[:, :, 0] = x0[:, 0:1, 0]
    nxt[:, :, 1] = x0[:, 0:1, 1]
    nxt[:, :, 2] = 0.0
    nxt[:, :, 3] = discrete_codes(parameter, np.expm1(out[:, :, 4]))
    nxt[:, :, 4] = out[:, :, 4]
    return nxt


def rollout_forward(model: GlpModel, x0: np.ndarray, gap: int, need_trace: bool = False):
    """Apply the encoder max(gap, 1) times, then the regressor once.

    Returns (pred (B,), latents, libc_traces, regressor_trace) where latents
    has one final-month (B, 5) vector per encoder application.
    """
    applications = max(int(gap), 1)
    seq = x0
    latents = []
    traces = [] if need_trace else None
    for k in range(applications):
        out, tr = libc_forward(model.libc, seq, need_trace)
        if need_trace:
            traces.append(tr)
        latents.append(out[:, -1, :])
        if k < applications - 1:
            seq = next_input(out, x0, model.parameter)
    pred, rtr = regressor_forward(model.regressor, latents[-1], need_trace)
    return pred, latents, traces, rtr


def rollout_loss_and_grads(
    model: GlpModel,
    x0: np.ndarray,
    targets: np.ndarray,
    gap: int,
    stop_gradient: bool = False,
):
    """Batch-mean MSE and its exact gradient as a flat parameter vector.

    gap = 0 is the supervised single-pass graph; gap > 0 backpropagates
    through every unrolled application unless `stop_gradient`, which confines
    gradients to the final application (ablation switch).
    """
    B = x0.shape[0]
    pred, _, traces, rtr = rollout_forward(model, x0, gap, need_trace=True)
    diff = pred - targets
    loss = float(np.mean(diff * diff))
    d_pred = 2.0 * diff / B

    reg_grads, d_latent = regressor_backward(model.regressor, rtr, d_pred)
    d_out = np.zeros_like(x0)
    d_out[:, -1, :] = d_latent

    acc = LibcParams(
        np.zeros_like(model.libc.w_x), np.zeros_like(model.libc.w_h),
        np.zeros_like(model.libc.b), np.zeros_like(model.libc.w_c),
        np.zeros_like(model.libc.b_c),
    )
    for k in range(len(traces) - 1, -1, -1):
        libc_grads, d_x = libc_backward(model.libc, traces[k], d_out)
        acc.w_x += libc_grads.w_x
        acc.w_h += libc_grads.w_h
        acc.b += libc_grads.b
        acc.w_c += libc_grads.w_c
        acc.b_c += libc_grads.b_c
        if k > 0:
            if stop_gradient:
                break
            d_out = np.zeros_like(x0)
            d_out[:, :, 4] = d_x[:, :, 4]

    flat = np.concatenate(
        [acc.w_x.ravel(), acc.w_h.ravel(), acc.b.ravel(), acc.w_c.ravel(), acc.b_c.ravel(),
         reg_grads.w1.ravel(), reg_grads.b1.ravel(), reg_grads.w2.ravel(), reg_grads.b2.ravel(),
         reg_grads.w3.ravel(), reg_grads.b3.ravel()]
    )
    return loss, flat


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int
    learning_rate: float
    beta1: float
    beta2: float
    epsilon: float

    @classmethod
    def create(cls, size: int, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(np.zeros(size), np.zeros(size), 0, learning_rate, beta1, beta2, epsilon)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise TrainingError("adam_step shape mismatch")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, m=m, v=v, step=t)


# ---------------------------------------------------------------------------
# weight files

MAGIC = b"GLP1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBB")


def _payload(model: GlpModel) -> bytes:
    vec = model_to_vector(model)
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, PARAMETER_ORDER.index(model.parameter), model.certain)
    return head + vec.astype("<f8").tobytes()


def model_checksum(model: GlpModel) -> int:
    """CRC-32 over the serialized payload; stable fingerprint of the weights."""
    return zlib.crc32(_payload(model))


def save_weights(model: GlpModel, path) -> None:
    payload = _payload(model)
    with open(path, "wb") as fh:
        fh.write(payload + struct.pack("<I", zlib.crc32(payload)))


def load_weights(path) -> GlpModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    expected = _HEADER.size + n_parameters() * 8 + 4
    if len(blob) != expected:
        raise IntegrityError(f"{path}: truncated or oversized ({len(blob)} bytes, want {expected})")
    payload, (stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != stored:
        raise IntegrityError(f"{path}: checksum failure")
    magic, version, param_index, certain = _HEADER.unpack(payload[: _HEADER.size])
    if magic != MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"{path}: version mismatch ({version}, supported {FORMAT_VERSION})")
    if param_index >= len(PARAMETER_ORDER):
        raise IntegrityError(f"{path}: unknown parameter id {param_index}")
    if not 0 <= certain <= 5:
        raise IntegrityError(f"{path}: certainty threshold {certain} outside [0, 5]")
    vec = np.frombuffer(payload[_HEADER.size :], dtype="<f8").astype(float)
    model = vector_to_model(vec, PARAMETER_ORDER[param_index], certain)
    model.version = version
    return model
