"""Forecaster zoo behind one contract: ``predict(window) -> t_out values``.

Neural families (dual-attention RNN, dual self-attention network, temporal
convnet) are built on the in-package autodiff engine and trained with Adam
on mean squared error over all output steps. The AR(p)/MA(q) model is fit
by conditional least squares, and the lookahead baseline trades on actual
future test prices.

Batched forwards use column-batched tensors: activations are (dim, B)
matrices whose columns are independent windows.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Window


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""


class SingularDesignError(np.linalg.LinAlgError):
    """The regression design matrix could not be solved."""


NEURAL_FAMILIES = ("fcn", "darnn", "dsanet")


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def _param_rng(seed: int, name: str):
    # one stream per parameter name: tensors whose shapes agree are identical
    # across runs that only differ in extra input channels
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_uniform(seed: int, name: str, shape, fan_in: int) -> ad.Tensor:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) parameter tensor."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    values = _param_rng(seed, name).uniform(-bound, bound, size=shape)
    return ad.Tensor(values, requires_grad=True)


def named_parameters(obj, prefix: str = "") -> dict:
    """Walk a params dataclass and collect its tensors in field order."""
    out = {}
    if isinstance(obj, ad.Tensor):
        out[prefix] = obj
        return out
    if is_dataclass(obj):
        for f in fields(obj):
            v = getattr(obj, f.name)
            key = f"{prefix}.{f.name}" if prefix else f.name
            out.update(named_parameters(v, key))
        return out
    if isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            out.update(named_parameters(v, f"{prefix}[{i}]"))
        return out
    return out


def _as_col(x):
    t = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    if t.values.ndim == 1:
        t = ad.reshape(t, (t.values.shape[0], 1))
    return t


def _zeros(dim, batch):
    return ad.Tensor(np.zeros((dim, batch)))


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

@dataclass
class LstmParams:
    """Gate weights over the concatenated [h_prev; x] input."""

    w_f: ad.Tensor
    w_i: ad.Tensor
    w_o: ad.Tensor
    w_s: ad.Tensor
    b_f: ad.Tensor
    b_i: ad.Tensor
    b_o: ad.Tensor
    b_s: ad.Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_f.values.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_f.values.shape[1] - self.hidden_size


def init_lstm_params(seed: int, name: str, hidden: int, input_dim: int) -> LstmParams:
    fan = hidden + input_dim
    mk = lambda tag, shape: init_uniform(seed, f"{name}.{tag}", shape, fan)
    return LstmParams(
        w_f=mk("w_f", (hidden, fan)), w_i=mk("w_i", (hidden, fan)),
        w_o=mk("w_o", (hidden, fan)), w_s=mk("w_s", (hidden, fan)),
        b_f=mk("b_f", (hidden,)), b_i=mk("b_i", (hidden,)),
        b_o=mk("b_o", (hidden,)), b_s=mk("b_s", (hidden,)),
    )


def lstm_step(x, h_prev, s_prev, params: LstmParams):
    """One cell update; forget/input/output gates then state and output.

    Accepts vectors or column-batched matrices; returns Tensors of the same
    layout as the inputs.
    """
    squeeze = not isinstance(x, ad.Tensor) and np.asarray(x).ndim == 1 or (
        isinstance(x, ad.Tensor) and x.values.ndim == 1)
    x, h_prev, s_prev = _as_col(x), _as_col(h_prev), _as_col(s_prev)
    if h_prev.values.shape != s_prev.values.shape:
        raise ad.ShapeMismatchError("lstm_step: h_prev and s_prev shapes differ")
    hx = ad.concat([h_prev, x], axis=0)
    f = ad.sigmoid(ad.add_bias(ad.matmul(params.w_f, hx), params.b_f, 0))
    i = ad.sigmoid(ad.add_bias(ad.matmul(params.w_i, hx), params.b_i, 0))
    o = ad.sigmoid(ad.add_bias(ad.matmul(params.w_o, hx), params.b_o, 0))
    s_tilde = ad.tanh(ad.add_bias(ad.matmul(params.w_s, hx), params.b_s, 0))
    s = ad.add(ad.mul(f, s_prev), ad.mul(i, s_tilde))
    h = ad.mul(o, ad.tanh(s))
    if squeeze:
        n = h.values.shape[0]
        return ad.reshape(h, (n,)), ad.reshape(s, (n,))
    return h, s


# ---------------------------------------------------------------------------
# dual-attention RNN
# ---------------------------------------------------------------------------

@dataclass
class DarnnParams:
    """Encoder/decoder LSTMs plus both attention stages and the output head.

    Shapes: v_e (1, t_in), w_e (t_in, 2m), u_e (t_in, t_in) for the input
    attention; v_d (1, m), w_d (m, 2p), u_d (m, m) for the temporal
    attention; w_tilde/b_tilde map [y_prev; context] to the decoder input;
    w_y (p, p), b_w (p,), v_y (1, p), b_v (1,) form the head, which sees the
    decoder state only (no context vector).
    """

    encoder: LstmParams
    decoder: LstmParams
    v_e: ad.Tensor
    w_e: ad.Tensor
    u_e: ad.Tensor
    v_d: ad.Tensor
    w_d: ad.Tensor
    u_d: ad.Tensor
    w_tilde: ad.Tensor
    b_tilde: ad.Tensor
    w_y: ad.Tensor
    b_w: ad.Tensor
    v_y: ad.Tensor
    b_v: ad.Tensor
    t_in: int = 0
    t_out: int = 1
    target_channel: int = 0

    @property
    def m(self) -> int:
        return self.encoder.hidden_size

    @property
    def p(self) -> int:
        return self.decoder.hidden_size

    @property
    def n_encoder_channels(self) -> int:
        return self.encoder.input_size


def init_darnn_params(seed: int, n_channels: int, t_in: int, t_out: int,
                      m: int, p: int, target_channel: int = 0) -> DarnnParams:
    n_enc = n_channels - 1
    if n_enc < 1:
        raise ValueError("dual-attention RNN needs at least one non-target channel")
    u = lambda tag, shape, fan: init_uniform(seed, f"darnn.{tag}", shape, fan)
    return DarnnParams(
        encoder=init_lstm_params(seed, "darnn.encoder", m, n_enc),
        decoder=init_lstm_params(seed, "darnn.decoder", p, 1),
        v_e=u("v_e", (1, t_in), t_in),
        w_e=u("w_e", (t_in, 2 * m), 2 * m),
        u_e=u("u_e", (t_in, t_in), t_in),
        v_d=u("v_d", (1, m), m),
        w_d=u("w_d", (m, 2 * p), 2 * p),
        u_d=u("u_d", (m, m), m),
        w_tilde=u("w_tilde", (1, m + 1), m + 1),
        b_tilde=u("b_tilde", (1,), m + 1),
        w_y=u("w_y", (p, p), p),
        b_w=u("b_w", (p,), p),
        v_y=u("v_y", (1, p), p),
        b_v=u("b_v", (1,), p),
        t_in=t_in, t_out=t_out, target_channel=target_channel,
    )


def _input_attention_step(params, h, s, ux, x_t, n_enc, batch):
    """Scores e^k = v_e' tanh(W_e [h; s] + U_e x^k), softmax over drivers."""
    hs = ad.concat([h, s], axis=0)
    q = ad.matmul(params.w_e, hs)                       # (t_in, B)
    q_tiled = ad.concat([q] * n_enc, axis=1)            # (t_in, n_enc*B)
    z = ad.tanh(ad.add(q_tiled, ux))
    e = ad.matmul(params.v_e, z)                        # (1, n_enc*B)
    alpha = ad.softmax(ad.reshape(e, (n_enc, batch)), axis=0)
    return alpha, ad.mul(alpha, x_t)


def _temporal_attention_step(params, d, s2, uh, h_list, t_in, batch):
    """Weights over encoder states and their convex combination (context)."""
    ds = ad.concat([d, s2], axis=0)
    q = ad.matmul(params.w_d, ds)                       # (m, B)
    q_tiled = ad.concat([q] * t_in, axis=1)             # (m, t_in*B)
    z = ad.tanh(ad.add(q_tiled, uh))
    scores = ad.matmul(params.v_d, z)                   # (1, t_in*B)
    beta = ad.softmax(ad.reshape(scores, (t_in, batch)), axis=0)
    context = ad.colscale(h_list[0], ad.narrow(beta, 0, 0, 1))
    for t in range(1, t_in):
        context = ad.add(context, ad.colscale(h_list[t], ad.narrow(beta, 0, t, 1)))
    return beta, context


def _series_major(x: np.ndarray) -> np.ndarray:
    """(B, n, T) -> (T, n*B) where column k*B + b is series k of window b."""
    b, n, t = x.shape
    return x.transpose(2, 1, 0).reshape(t, n * b)


def darnn_forward_batch(inputs: np.ndarray, params: DarnnParams, collect=None) -> ad.Tensor:
    """Batched forward pass: (B, C, t_in) ndarray -> (t_out, B) Tensor."""
    if inputs.ndim != 3:
        raise ad.ShapeMismatchError("darnn_forward_batch expects (B, C, t_in)")
    batch, n_channels, t_in = inputs.shape
    if t_in != params.t_in or n_channels != params.n_encoder_channels + 1:
        raise ad.ShapeMismatchError(
            f"window shape {inputs.shape[1:]} does not match params "
            f"({params.n_encoder_channels + 1}, {params.t_in})")
    enc_idx = [c for c in range(n_channels) if c != params.target_channel]
    x_enc = inputs[:, enc_idx, :]                       # (B, n_enc, t_in)
    y_hist = inputs[:, params.target_channel, :]        # (B, t_in)
    n_enc = len(enc_idx)

    ux = ad.matmul(params.u_e, ad.Tensor(_series_major(x_enc)))
    h = _zeros(params.m, batch)
    s = _zeros(params.m, batch)
    h_list = []
    for t in range(t_in):
        x_t = ad.Tensor(x_enc[:, :, t].T)               # (n_enc, B)
        alpha, x_weighted = _input_attention_step(params, h, s, ux, x_t, n_enc, batch)
        if collect is not None:
            collect.setdefault("input_attention", []).append(alpha.values.copy())
        h, s = lstm_step(x_weighted, h, s, params.encoder)
        h_list.append(h)

    uh = ad.matmul(params.u_d, ad.concat(h_list, axis=1))
    d = _zeros(params.p, batch)
    s2 = _zeros(params.p, batch)
    y_prev = ad.Tensor(y_hist[:, -1].reshape(1, batch))
    outputs = []
    for _ in range(params.t_out):
        beta, context = _temporal_attention_step(params, d, s2, uh, h_list, t_in, batch)
        if collect is not None:
            collect.setdefault("temporal_attention", []).append(beta.values.copy())
        dec_in = ad.add_bias(ad.matmul(params.w_tilde, ad.concat([y_prev, context], axis=0)),
                             params.b_tilde, 0)
        d, s2 = lstm_step(dec_in, d, s2, params.decoder)
        out = ad.add_bias(ad.matmul(params.v_y, ad.add_bias(ad.matmul(params.w_y, d),
                                                            params.b_w, 0)),
                          params.b_v, 0)
        outputs.append(out)
        y_prev = out
    return ad.concat(outputs, axis=0)


def darnn_forward(window: Window, params: DarnnParams, collect=None) -> np.ndarray:
    out = darnn_forward_batch(window.inputs[None, :, :], params, collect=collect)
    return out.values[:, 0].copy()


def darnn_input_attention(params: DarnnParams, x_columns: np.ndarray,
                          h_prev: np.ndarray, s_prev: np.ndarray) -> np.ndarray:
    """Attention weights over the driving series for one encoder step."""
    x_columns = np.asarray(x_columns, dtype=np.float64)
    n_enc, t_in = x_columns.shape
    ux = ad.matmul(params.u_e, ad.Tensor(x_columns.T))  # (t_in, n_enc), B=1 layout
    alpha, _ = _input_attention_step(params, _as_col(h_prev), _as_col(s_prev), ux,
                                     ad.Tensor(np.zeros((n_enc, 1))), n_enc, 1)
    return alpha.values[:, 0].copy()


def darnn_temporal_attention(params: DarnnParams, encoder_states: np.ndarray,
                             d_prev: np.ndarray, s_prev: np.ndarray):
    """Weights over encoder states plus the context vector they produce."""
    encoder_states = np.asarray(encoder_states, dtype=np.float64)  # (t_in, m)
    t_in = encoder_states.shape[0]
    h_list = [ad.Tensor(encoder_states[t].reshape(-1, 1)) for t in range(t_in)]
    uh = ad.matmul(params.u_d, ad.concat(h_list, axis=1))
    beta, context = _temporal_attention_step(params, _as_col(d_prev), _as_col(s_prev),
                                             uh, h_list, t_in, 1)
    return beta.values[:, 0].copy(), context.values[:, 0].copy()


# ---------------------------------------------------------------------------
# dual self-attention network
# ---------------------------------------------------------------------------

@dataclass
class DsanetBranchParams:
    w_q: ad.Tensor
    w_k: ad.Tensor
    w_v: ad.Tensor
    w_o: ad.Tensor
    w_ffn1: ad.Tensor
    b_ffn1: ad.Tensor
    w_ffn2: ad.Tensor
    b_ffn2: ad.Tensor


@dataclass
class DsanetParams:
    """Global/local temporal convolutions, per-branch self-attention stacks,
    the dense head over both branch representations, and the parallel AR
    part over the target channel's input window."""

    w_global: ad.Tensor          # (t_in, n_filters): full-window filters
    b_global: ad.Tensor
    w_local: ad.Tensor           # (n_filters, 1, local_kernel)
    b_local: ad.Tensor
    global_branch: DsanetBranchParams
    local_branch: DsanetBranchParams
    w_head: ad.Tensor
    b_head: ad.Tensor
    w_ar: ad.Tensor
    b_ar: ad.Tensor
    n_head: int = 1
    t_in: int = 0
    t_out: int = 1
    n_series: int = 1
    target_channel: int = 0

    @property
    def n_filters(self) -> int:
        return self.w_global.values.shape[1]

    @property
    def d_k(self) -> int:
        return self.n_filters // self.n_head


def _init_branch(seed, name, d, ffn_dim):
    u = lambda tag, shape, fan: init_uniform(seed, f"{name}.{tag}", shape, fan)
    return DsanetBranchParams(
        w_q=u("w_q", (d, d), d), w_k=u("w_k", (d, d), d), w_v=u("w_v", (d, d), d),
        w_o=u("w_o", (d, d), d),
        w_ffn1=u("w_ffn1", (d, ffn_dim), d), b_ffn1=u("b_ffn1", (ffn_dim,), d),
        w_ffn2=u("w_ffn2", (ffn_dim, d), ffn_dim), b_ffn2=u("b_ffn2", (d,), ffn_dim),
    )


def init_dsanet_params(seed: int, n_channels: int, t_in: int, t_out: int,
                       n_filters: int = 32, local_kernel: int = 3, n_head: int = 8,
                       ffn_dim: int | None = None, target_channel: int = 0) -> DsanetParams:
    if local_kernel >= t_in:
        raise ValueError(f"local kernel length {local_kernel} must be < t_in {t_in}")
    if n_filters % n_head != 0:
        raise ValueError(f"n_filters {n_filters} must be divisible by n_head {n_head}")
    ffn_dim = ffn_dim or 2 * n_filters
    u = lambda tag, shape, fan: init_uniform(seed, f"dsanet.{tag}", shape, fan)
    feat_dim = 2 * n_channels * n_filters
    return DsanetParams(
        w_global=u("w_global", (t_in, n_filters), t_in),
        b_global=u("b_global", (n_filters,), t_in),
        w_local=u("w_local", (n_filters, 1, local_kernel), local_kernel),
        b_local=u("b_local", (n_filters,), local_kernel),
        global_branch=_init_branch(seed, "dsanet.global", n_filters, ffn_dim),
        local_branch=_init_branch(seed, "dsanet.local", n_filters, ffn_dim),
        w_head=u("w_head", (t_out, feat_dim), feat_dim),
        b_head=u("b_head", (t_out,), feat_dim),
        w_ar=u("w_ar", (t_out, t_in), t_in),
        b_ar=u("b_ar", (t_out,), t_in),
        n_head=n_head, t_in=t_in, t_out=t_out, n_series=n_channels,
        target_channel=target_channel,
    )


def _self_attention_block(h, bp: DsanetBranchParams, n_head: int, collect=None):
    """Multi-head scaled dot-product self-attention over the series axis,
    with residual + layer norm and a position-wise feed-forward stage."""
    d = h.values.shape[1]
    d_k = d // n_head
    q = ad.matmul(h, bp.w_q)
    k = ad.matmul(h, bp.w_k)
    v = ad.matmul(h, bp.w_v)
    heads = []
    for i in range(n_head):
        qh = ad.narrow(q, 1, i * d_k, d_k)
        kh = ad.narrow(k, 1, i * d_k, d_k)
        vh = ad.narrow(v, 1, i * d_k, d_k)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(d_k))
        weights = ad.softmax(scores, axis=1)
        if collect is not None:
            collect.setdefault("self_attention", []).append(weights.values.copy())
        heads.append(ad.matmul(weights, vh))
    z = ad.matmul(ad.concat(heads, axis=1), bp.w_o)
    normed = ad.layer_norm(ad.add(h, z), axis=1)
    ffn = ad.add_bias(
        ad.matmul(ad.relu(ad.add_bias(ad.matmul(normed, bp.w_ffn1), bp.b_ffn1, 1)),
                  bp.w_ffn2),
        bp.b_ffn2, 1)
    return ad.layer_norm(ad.add(normed, ffn), axis=1)


def dsanet_forward_window(inputs: np.ndarray, params: DsanetParams, collect=None) -> ad.Tensor:
    """(C, t_in) ndarray -> (t_out, 1) Tensor."""
    if inputs.shape != (params.n_series, params.t_in):
        raise ad.ShapeMismatchError(
            f"window shape {inputs.shape} does not match params "
            f"({params.n_series}, {params.t_in})")
    x = ad.Tensor(inputs)
    # global branch: one full-window filter response per series
    h_global = ad.relu(ad.add_bias(ad.matmul(x, params.w_global), params.b_global, 1))
    # local branch: short filters, max-pooled over time, per series
    rows = []
    for i in range(params.n_series):
        conv = ad.conv1d(ad.narrow(x, 0, i, 1), params.w_local, params.b_local, stride=1)
        pooled = ad.global_max_pool(ad.relu(conv))
        rows.append(ad.reshape(pooled, (1, params.n_filters)))
    h_local = ad.concat(rows, axis=0)

    f_global = _self_attention_block(h_global, params.global_branch, params.n_head, collect)
    f_local = _self_attention_block(h_local, params.local_branch, params.n_head, collect)

    n_feat = params.n_series * params.n_filters
    feats = ad.concat([ad.reshape(f_global, (n_feat, 1)),
                       ad.reshape(f_local, (n_feat, 1))], axis=0)
    head = ad.add_bias(ad.matmul(params.w_head, feats), params.b_head, 0)
    y_win = ad.Tensor(inputs[params.target_channel].reshape(params.t_in, 1))
    ar = ad.add_bias(ad.matmul(params.w_ar, y_win), params.b_ar, 0)
    return ad.add(head, ar)


def dsanet_forward(window: Window, params: DsanetParams, collect=None) -> np.ndarray:
    return dsanet_forward_window(window.inputs, params, collect=collect).values[:, 0].copy()


def dsanet_ar_output(inputs: np.ndarray, params: DsanetParams) -> np.ndarray:
    """The linear AR part alone, for decomposition checks."""
    y_win = inputs[params.target_channel]
    return params.w_ar.values @ y_win + params.b_ar.values


# ---------------------------------------------------------------------------
# temporal convnet
# ---------------------------------------------------------------------------

@dataclass
class FcnConvLayer:
    w: ad.Tensor
    b: ad.Tensor


@dataclass
class FcnParams:
    """Three valid convolutions (kernels 7/5/3 by default) and a dense head."""

    convs: list
    w_head: ad.Tensor
    b_head: ad.Tensor
    channels: tuple = (0,)
    t_in: int = 0
    t_out: int = 1

    @property
    def kernels(self) -> tuple:
        return tuple(layer.w.values.shape[2] for layer in self.convs)


def fcn_output_lengths(t_in: int, kernels=(7, 5, 3)):
    lengths = []
    length = t_in
    for k in kernels:
        length = length - k + 1
        lengths.append(length)
    return lengths


def init_fcn_params(seed: int, t_in: int, t_out: int, channels=(0,),
                    filters: int = 32, kernels=(7, 5, 3)) -> FcnParams:
    lengths = fcn_output_lengths(t_in, kernels)
    if lengths[-1] < 1:
        raise ValueError(
            f"t_in={t_in} too short for kernel chain {tuple(kernels)}; "
            f"need at least {sum(kernels) - len(kernels) + 1}")
    convs = []
    c_in = len(channels)
    for i, k in enumerate(kernels):
        fan = c_in * k
        convs.append(FcnConvLayer(
            w=init_uniform(seed, f"fcn.conv{i}.w", (filters, c_in, k), fan),
            b=init_uniform(seed, f"fcn.conv{i}.b", (filters,), fan)))
        c_in = filters
    feat = filters * lengths[-1]
    return FcnParams(
        convs=convs,
        w_head=init_uniform(seed, "fcn.head.w", (t_out, feat), feat),
        b_head=init_uniform(seed, "fcn.head.b", (t_out,), feat),
        channels=tuple(channels), t_in=t_in, t_out=t_out,
    )


def fcn_forward_window(inputs: np.ndarray, params: FcnParams) -> ad.Tensor:
    """(C, t_in) ndarray -> (t_out, 1) Tensor; uses params.channels rows."""
    if inputs.shape[1] != params.t_in:
        raise ad.ShapeMismatchError(f"expected t_in={params.t_in}, got {inputs.shape[1]}")
    h = ad.Tensor(inputs[list(params.channels), :])
    for layer in params.convs:
        h = ad.relu(ad.conv1d(h, layer.w, layer.b, stride=1))
    flat = ad.reshape(h, (h.values.size, 1))
    return ad.add_bias(ad.matmul(params.w_head, flat), params.b_head, 0)


def fcn_forward(window: Window, params: FcnParams) -> np.ndarray:
    return fcn_forward_window(window.inputs, params).values[:, 0].copy()


# ---------------------------------------------------------------------------
# AR(p)/MA(q) by conditional least squares
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArimaModel:
    """y_t = intercept + sum phi_i y_{t-i} + eps_t - sum theta_j eps_{t-j}."""

    p: int
    q: int
    intercept: float
    ar_coefs: tuple
    ma_coefs: tuple
    resid_variance: float
    d: int = 0


def _cls_regress(y, resid, p, q, ridge=1e-8):
    """Regress y_t on its lags and (optionally) lagged residuals.

    Solved in centered form with a tiny ridge on the slope block, so
    unidentifiable lag coefficients (constant series) collapse to exactly 0
    and the intercept absorbs the level.
    """
    n = y.size
    start = max(p, q)
    rows = n - start
    cols = p + q
    x = np.empty((rows, cols))
    for i in range(1, p + 1):
        x[:, i - 1] = y[start - i:n - i]
    for j in range(1, q + 1):
        x[:, p + j - 1] = resid[start - j:n - j]
    target = y[start:]
    col_means = x.mean(axis=0)
    y_mean = target.mean()
    xc = x - col_means
    gram = xc.T @ xc + ridge * np.eye(cols)
    try:
        slopes = np.linalg.solve(gram, xc.T @ (target - y_mean))
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError(f"conditional least squares failed: {exc}") from exc
    if not np.all(np.isfinite(slopes)):
        raise SingularDesignError("conditional least squares produced non-finite coefficients")
    return np.concatenate([[y_mean - col_means @ slopes], slopes])


def _arima_residuals(y, intercept, phi, theta):
    p, q = len(phi), len(theta)
    eps = np.zeros(y.size)
    for t in range(p, y.size):
        pred = intercept
        for i in range(1, p + 1):
            pred += phi[i - 1] * y[t - i]
        for j in range(1, q + 1):
            if t - j >= 0:
                pred -= theta[j - 1] * eps[t - j]
        eps[t] = y[t] - pred
    return eps


def arima_fit(y_train: np.ndarray, p: int, q: int = 0) -> ArimaModel:
    """Conditional least squares; the MA part is estimated by iterating the
    lagged-residual regression (d is fixed to 0)."""
    y = np.asarray(y_train, dtype=np.float64)
    if p < 0 or q < 0 or p + q < 1:
        raise ValueError("need p >= 0, q >= 0 and p + q >= 1")
    if y.size < 10 * (p + q + 1):
        raise ValueError(f"series of length {y.size} too short for p={p}, q={q}; "
                         f"need at least {10 * (p + q + 1)}")
    resid = np.zeros(y.size)
    if q > 0:
        # bootstrap residuals from a pure AR fit before the joint regressions
        p_boot = max(p, 1)
        coef = _cls_regress(y, resid, p_boot, 0)
        resid = _arima_residuals(y, coef[0], coef[1:1 + p_boot], ())
    n_passes = 3 if q > 0 else 1
    for _ in range(n_passes):
        coef = _cls_regress(y, resid, p, q)
        intercept = float(coef[0])
        phi = tuple(float(c) for c in coef[1:1 + p])
        theta = tuple(-float(c) for c in coef[1 + p:])
        resid = _arima_residuals(y, intercept, phi, theta)
    start = max(p, q)
    return ArimaModel(p=p, q=q, intercept=intercept, ar_coefs=phi, ma_coefs=theta,
                      resid_variance=float(np.var(resid[start:])))


def arima_forecast(model: ArimaModel, history: np.ndarray, horizon: int) -> np.ndarray:
    """Iterated one-step forecasts with future shocks set to zero."""
    history = np.asarray(history, dtype=np.float64)
    if history.size < model.p:
        raise ValueError(f"history of length {history.size} < p={model.p}")
    eps = _arima_residuals(history, model.intercept, model.ar_coefs, model.ma_coefs) \
        if model.q > 0 else np.zeros(history.size)
    values = list(history)
    eps = list(eps)
    out = np.empty(horizon)
    for h in range(horizon):
        pred = model.intercept
        for i in range(1, model.p + 1):
            pred += model.ar_coefs[i - 1] * values[-i]
        for j in range(1, model.q + 1):
            pred -= model.ma_coefs[j - 1] * eps[-j]
        values.append(pred)
        eps.append(0.0)
        out[h] = pred
    return out


# ---------------------------------------------------------------------------
# lookahead baseline
# ---------------------------------------------------------------------------

def lookahead_predict(test_prices: np.ndarray, horizon: int) -> np.ndarray:
    """Perfect-foresight positions: sign(price[t+horizon] - price[t]).

    Steps whose horizon falls past the end of the series do not trade
    (position 0). As a prediction the model reports the current price for
    the step `horizon` ahead, so its error metrics equal those of a
    persistence forecast at lag `horizon`.
    """
    prices = np.asarray(test_prices, dtype=np.float64)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    positions = np.zeros(prices.size, dtype=np.int64)
    if prices.size > horizon:
        positions[:-horizon] = np.sign(prices[horizon:] - prices[:-horizon]).astype(np.int64)
    return positions


def lookahead_prediction_pairs(test_prices: np.ndarray, horizon: int):
    """(actual, predicted) pairs for the lookahead error metrics.

    The current price stands in as the prediction of the price `horizon`
    steps ahead, i.e. the metrics compare the last prediction point with
    the current value.
    """
    prices = np.asarray(test_prices, dtype=np.float64)
    if prices.size <= horizon:
        raise ValueError("series shorter than the horizon")
    return prices[horizon:].copy(), prices[:-horizon].copy()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


@dataclass
class Forecaster:
    """A model family instance exposing ``predict(window) -> t_out values``."""

    family: str
    params: object
    forward_batch: object        # (B, C, t_in) ndarray -> (t_out, B) Tensor
    build_spec: dict
    loss_curve: list = None

    def predict(self, window: Window) -> np.ndarray:
        out = self.forward_batch(window.inputs[None, :, :])
        return out.values[:, 0].copy()

    def parameters(self) -> dict:
        return named_parameters(self.params)


def _loop_forward(forward_window):
    def run(inputs_batch):
        outs = [forward_window(inputs_batch[b]) for b in range(inputs_batch.shape[0])]
        return ad.concat(outs, axis=1)
    return run


def build_forecaster(family: str, n_channels: int, t_in: int, t_out: int,
                     seed: int = 0, target_channel: int = 0, hyper: dict | None = None) -> Forecaster:
    """Instantiate an untrained neural forecaster with seeded parameters."""
    hyper = dict(hyper or {})
    spec = {"family": family, "n_channels": n_channels, "t_in": t_in, "t_out": t_out,
            "seed": seed, "target_channel": target_channel, "hyper": dict(hyper)}
    if family == "darnn":
        m = int(hyper.pop("m", 64))
        p = int(hyper.pop("p", m))
        params = init_darnn_params(seed, n_channels, t_in, t_out, m, p, target_channel)
        fwd = lambda batch: darnn_forward_batch(batch, params)
    elif family == "dsanet":
        params = init_dsanet_params(
            seed, n_channels, t_in, t_out,
            n_filters=int(hyper.pop("n_filters", 32)),
            local_kernel=int(hyper.pop("local_kernel", 3)),
            n_head=int(hyper.pop("n_head", 8)),
            ffn_dim=hyper.pop("ffn_dim", None),
            target_channel=target_channel)
        fwd = _loop_forward(lambda x: dsanet_forward_window(x, params))
    elif family == "fcn":
        channels = tuple(hyper.pop("channels", (target_channel,)))
        params = init_fcn_params(
            seed, t_in, t_out, channels=channels,
            filters=int(hyper.pop("filters", 32)),
            kernels=tuple(hyper.pop("kernels", (7, 5, 3))))
        fwd = _loop_forward(lambda x: fcn_forward_window(x, params))
    else:
        raise ValueError(f"unknown neural family {family!r}; expected one of {NEURAL_FAMILIES}")
    if hyper:
        raise ValueError(f"unused hyperparameters for {family}: {sorted(hyper)}")
    return Forecaster(family=family, params=params, forward_batch=fwd, build_spec=spec)


def train(family: str, train_windows, config: TrainConfig, target_channel: int = 0,
          hyper: dict | None = None) -> Forecaster:
    """Fit a neural family on supervised windows with Adam on MSE.

    Mini-batch order is drawn from a seeded stream independent of the
    parameter initialization, so runs are reproducible end to end.
    """
    windows = list(train_windows)
    if not windows:
        raise ValueError("train needs at least one window")
    t_in, t_out = windows[0].t_in, windows[0].t_out
    n_channels = windows[0].n_channels
    forecaster = build_forecaster(family, n_channels, t_in, t_out, seed=config.seed,
                                  target_channel=target_channel, hyper=hyper)
    params = list(forecaster.parameters().values())
    state = ad.init_adam(params, lr=config.lr)
    inputs = np.stack([w.inputs for w in windows])           # (N, C, t_in)
    targets = np.stack([w.targets for w in windows])         # (N, t_out)
    n = len(windows)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, zlib.crc32(b"shuffle")]))
    loss_curve = []
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            ad.zero_grads(params)
            pred = forecaster.forward_batch(inputs[idx])
            loss = ad.mse_loss(pred, targets[idx].T)
            value = float(loss.values)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"{family}: non-finite loss at epoch {len(loss_curve)}")
            loss.backward()
            ad.adam_step(params, [p.grad for p in params], state)
            epoch_loss += value * idx.size
        loss_curve.append(epoch_loss / n)
    forecaster.loss_curve = loss_curve
    return forecaster


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "trendcast-checkpoint-v1"


def save_checkpoint(forecaster: Forecaster, path) -> Path:
    """Write a self-describing JSON checkpoint (family, shapes, seed, values)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "build": forecaster.build_spec,
        "loss_curve": list(forecaster.loss_curve or []),
        "params": {
            name: {"shape": list(t.values.shape), "values": t.values.ravel().tolist()}
            for name, t in forecaster.parameters().items()
        },
    }
    path.write_text(json.dumps(payload))
    return path


def load_checkpoint(path) -> Forecaster:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    build = payload["build"]
    forecaster = build_forecaster(
        build["family"], build["n_channels"], build["t_in"], build["t_out"],
        seed=build["seed"], target_channel=build["target_channel"], hyper=build["hyper"])
    for name, tensor in forecaster.parameters().items():
        entry = payload["params"][name]
        values = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if values.shape != tensor.values.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        tensor.values[...] = values
    forecaster.loss_curve = payload.get("loss_curve") or None
    return forecaster
