"""Transformer-encoder binary classifier with hand-written backprop.

Each of the 13 standardized feature values becomes one token through a
per-feature affine lift plus fixed sinusoidal position codes. Pre-norm
residual blocks (self-attention, then ReLU feed-forward) are followed by
mean pooling over tokens and a 2-logit classification head. Everything
runs in float64; gradients come from exact reverse accumulation through
the same graph, optimized with Adam.

Parameters live in a flat ``dict[str, ndarray]``; see ``init_params`` for
the key schema. The fixed positional table is stored under ``"pos"`` and
is the only non-trainable entry.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

N_TOKENS = 13  # one token per tabular feature
N_CLASSES = 2
_LN_EPS = 1e-8
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


class NonFiniteLoss(RuntimeError):
    """Training diverged: loss or parameters left the finite range."""


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        problems = []
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            problems.append(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.learning_rate <= 0:
            problems.append("learning_rate must be > 0")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class TrainReport:
    losses: list[float]            # mean training loss per epoch
    val_accuracies: list[float]    # accuracy on the validation set per epoch
    params: dict                   # reference to the final parameters
    wall_time_s: float
    steps: int = 0                 # optimizer steps taken


def positional_encoding(n_positions: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table with base 10000: columns alternate
    sin/cos of position times a geometric frequency ladder."""
    pe = np.zeros((n_positions, d_model))
    pos = np.arange(n_positions, dtype=np.float64)
    for k in range(0, d_model, 2):
        freq = 10000.0 ** (-k / d_model)
        pe[:, k] = np.sin(pos * freq)
        if k + 1 < d_model:
            pe[:, k + 1] = np.cos(pos * freq)
    return pe


def trainable_keys(params: dict) -> list[str]:
    return [k for k in sorted(params) if k != "pos"]


def init_params(cfg: TransformerConfig, rng: np.random.Generator | None = None) -> dict:
    """Seeded initialization: matrices uniform in +-1/sqrt(fan_in),
    biases and shifts zero, layer-norm gains one."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    d, dff = cfg.d_model, cfg.d_ff

    def uniform(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape)

    params = {
        "embed.scale": uniform(1, (N_TOKENS, d)),
        "embed.shift": np.zeros((N_TOKENS, d)),
        "pos": positional_encoding(N_TOKENS, d),
        "head.weight": uniform(d, (d, N_CLASSES)),
        "head.bias": np.zeros(N_CLASSES),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        params[p + "ln1.gain"] = np.ones(d)
        params[p + "ln1.bias"] = np.zeros(d)
        params[p + "attn.wq"] = uniform(d, (d, d))
        params[p + "attn.wk"] = uniform(d, (d, d))
        params[p + "attn.wv"] = uniform(d, (d, d))
        params[p + "attn.wo"] = uniform(d, (d, d))
        params[p + "ln2.gain"] = np.ones(d)
        params[p + "ln2.bias"] = np.zeros(d)
        params[p + "ffn.w1"] = uniform(d, (d, dff))
        params[p + "ffn.b1"] = np.zeros(dff)
        params[p + "ffn.w2"] = uniform(dff, (dff, d))
        params[p + "ffn.b2"] = np.zeros(d)
    return params


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def embed(row: np.ndarray, params: dict) -> np.ndarray:
    """Token matrix for one row (13, d_model) or a batch (B, 13, d_model):
    token_i = value_i * scale_i + shift_i + pos_i."""
    x = np.asarray(row, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    tokens = (
        batch[:, :, None] * params["embed.scale"][None]
        + params["embed.shift"][None]
        + params["pos"][None]
    )
    return tokens[0] if single else tokens


def _layernorm_forward(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return gain * xhat + bias, (xhat, inv, gain)


def _layernorm_backward(dy, cache):
    xhat, inv, gain = cache
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbias = dy.sum(axis=tuple(range(dy.ndim - 1)))
    return dx, dgain, dbias


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _mha_forward(x, wq, wk, wv, wo, n_heads):
    q = _split_heads(x @ wq, n_heads)
    k = _split_heads(x @ wk, n_heads)
    v = _split_heads(x @ wv, n_heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    weights = softmax(scores, axis=-1)
    context = _merge_heads(weights @ v)
    out = context @ wo
    return out, (x, q, k, v, scale, weights, context)


def _flat_outer(a, b):
    # sum over batch and token axes of outer products: (.., D) x (.., E) -> (D, E)
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _mha_backward(dout, cache, wq, wk, wv, wo, n_heads):
    x, q, k, v, scale, weights, context = cache
    dwo = _flat_outer(context, dout)
    dcontext = _split_heads(dout @ wo.T, n_heads)

    dweights = dcontext @ v.transpose(0, 1, 3, 2)
    dv = weights.transpose(0, 1, 3, 2) @ dcontext
    dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))
    dscores *= scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    dq_full, dk_full, dv_full = (_merge_heads(g) for g in (dq, dk, dv))
    dwq = _flat_outer(x, dq_full)
    dwk = _flat_outer(x, dk_full)
    dwv = _flat_outer(x, dv_full)
    dx = dq_full @ wq.T + dk_full @ wk.T + dv_full @ wv.T
    return dx, dwq, dwk, dwv, dwo


def multi_head_attention(
    tokens: np.ndarray,
    params: dict,
    cfg: TransformerConfig,
    layer: int = 0,
    return_weights: bool = False,
):
    """Self-attention sublayer output for raw token inputs (no masking)."""
    x = np.asarray(tokens, dtype=np.float64)
    single = x.ndim == 2
    x3 = x[None] if single else x
    p = f"layers.{layer}.attn."
    out, cache = _mha_forward(
        x3, params[p + "wq"], params[p + "wk"], params[p + "wv"], params[p + "wo"], cfg.n_heads
    )
    if single:
        out = out[0]
    if return_weights:
        weights = cache[5]
        return out, (weights[0] if single else weights)
    return out


def encoder_forward(row, params: dict, cfg: TransformerConfig, return_cache: bool = False):
    """Logits for one row (2,) or a batch (B, 2); optionally the full
    activation cache consumed by the backward pass."""
    x_in = np.asarray(row, dtype=np.float64)
    single = x_in.ndim == 1
    rows = x_in[None, :] if single else x_in

    x = embed(rows, params)
    layer_caches = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        n1, ln1_cache = _layernorm_forward(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        attn_out, attn_cache = _mha_forward(
            n1, params[p + "attn.wq"], params[p + "attn.wk"],
            params[p + "attn.wv"], params[p + "attn.wo"], cfg.n_heads,
        )
        x1 = x + attn_out
        n2, ln2_cache = _layernorm_forward(x1, params[p + "ln2.gain"], params[p + "ln2.bias"])
        z1 = n2 @ params[p + "ffn.w1"] + params[p + "ffn.b1"]
        hidden = np.maximum(z1, 0.0)
        x = x1 + hidden @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        layer_caches.append((ln1_cache, attn_cache, ln2_cache, n2, z1, hidden))

    pooled = x.mean(axis=1)
    logits = pooled @ params["head.weight"] + params["head.bias"]
    if single:
        logits = logits[0]
    if return_cache:
        return logits, (rows, pooled, layer_caches)
    return logits


def attention_weights(rows, params: dict, cfg: TransformerConfig) -> list[np.ndarray]:
    """Per-layer attention maps (B, n_heads, 13, 13) for the given rows."""
    x = embed(np.atleast_2d(np.asarray(rows, dtype=np.float64)), params)
    maps = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        n1, _ = _layernorm_forward(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        attn_out, cache = _mha_forward(
            n1, params[p + "attn.wq"], params[p + "attn.wk"],
            params[p + "attn.wv"], params[p + "attn.wo"], cfg.n_heads,
        )
        maps.append(cache[5])
        x1 = x + attn_out
        n2, _ = _layernorm_forward(x1, params[p + "ln2.gain"], params[p + "ln2.bias"])
        hidden = np.maximum(n2 @ params[p + "ffn.w1"] + params[p + "ffn.b1"], 0.0)
        x = x1 + hidden @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
    return maps


def loss_and_gradients(rows, labels, params: dict, cfg: TransformerConfig):
    """Mean softmax cross-entropy over the batch plus exact gradients for
    every trainable tensor (reverse accumulation through the forward graph)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if rows.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    n = rows.shape[0]

    logits, (rows_cached, pooled, layer_caches) = encoder_forward(
        rows, params, cfg, return_cache=True
    )
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float((log_z - shifted[np.arange(n), labels]).mean())
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss became {loss}")

    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    grads = {
        "head.weight": pooled.T @ dlogits,
        "head.bias": dlogits.sum(axis=0),
    }
    dpooled = dlogits @ params["head.weight"].T
    dx = np.repeat(dpooled[:, None, :] / N_TOKENS, N_TOKENS, axis=1)

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        ln1_cache, attn_cache, ln2_cache, n2, z1, hidden = layer_caches[i]

        # feed-forward block: x2 = x1 + relu(n2 w1 + b1) w2 + b2
        dffn = dx
        grads[p + "ffn.w2"] = _flat_outer(hidden, dffn)
        grads[p + "ffn.b2"] = dffn.sum(axis=(0, 1))
        dhidden = dffn @ params[p + "ffn.w2"].T
        dz1 = dhidden * (z1 > 0.0)
        grads[p + "ffn.w1"] = _flat_outer(n2, dz1)
        grads[p + "ffn.b1"] = dz1.sum(axis=(0, 1))
        dn2 = dz1 @ params[p + "ffn.w1"].T
        dx1_ln, dg2, db2 = _layernorm_backward(dn2, ln2_cache)
        grads[p + "ln2.gain"] = dg2
        grads[p + "ln2.bias"] = db2
        dx1 = dx + dx1_ln

        # attention block: x1 = x + mha(ln1(x))
        dattn = dx1
        dn1, dwq, dwk, dwv, dwo = _mha_backward(
            dattn, attn_cache, params[p + "attn.wq"], params[p + "attn.wk"],
            params[p + "attn.wv"], params[p + "attn.wo"], cfg.n_heads,
        )
        grads[p + "attn.wq"] = dwq
        grads[p + "attn.wk"] = dwk
        grads[p + "attn.wv"] = dwv
        grads[p + "attn.wo"] = dwo
        dx_ln, dg1, db1 = _layernorm_backward(dn1, ln1_cache)
        grads[p + "ln1.gain"] = dg1
        grads[p + "ln1.bias"] = db1
        dx = dx1 + dx_ln

    grads["embed.scale"] = np.einsum("bt,btd->td", rows_cached, dx)
    grads["embed.shift"] = dx.sum(axis=0)
    return loss, grads


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(params: dict) -> AdamState:
    keys = trainable_keys(params)
    return AdamState(
        m={k: np.zeros_like(params[k]) for k in keys},
        v={k: np.zeros_like(params[k]) for k in keys},
    )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update (beta1=0.9, beta2=0.999, eps=1e-8).
    Returns fresh (params, state); inputs are left untouched."""
    t = state.t + 1
    new_params = dict(params)
    new_m, new_v = {}, {}
    bc1 = 1.0 - _ADAM_BETA1**t
    bc2 = 1.0 - _ADAM_BETA2**t
    for key, g in grads.items():
        m = _ADAM_BETA1 * state.m[key] + (1.0 - _ADAM_BETA1) * g
        v = _ADAM_BETA2 * state.v[key] + (1.0 - _ADAM_BETA2) * g * g
        new_params[key] = params[key] - lr * (m / bc1) / (np.sqrt(v / bc2) + _ADAM_EPS)
        new_m[key] = m
        new_v[key] = v
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def predict(params: dict, cfg: TransformerConfig, data):
    """Labels and class probabilities. Ties between exactly equal logits
    resolve to label 0 (argmax picks the first)."""
    rows = data.features if hasattr(data, "features") else np.atleast_2d(np.asarray(data))
    logits = encoder_forward(rows, params, cfg)
    probs = softmax(logits, axis=-1)
    labels = np.where(probs[:, 1] > probs[:, 0], 1, 0)
    return labels, probs


def _accuracy(params, cfg, dataset) -> float:
    labels, _ = predict(params, cfg, dataset)
    return float((labels == dataset.targets).mean())


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from the peak learning rate to ~0 across training.

    Keeps the final parameters settled instead of leaving them wherever
    the last constant-rate step happened to bounce.
    """
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def train(cfg: TransformerConfig, train_ds, val_ds):
    """Seeded minibatch Adam training with a cosine-annealed step size.

    Expects standardized features and both classes present in the training
    split. Shuffles every epoch with the config seed, keeps the trailing
    partial batch, and reports per-epoch mean loss plus validation
    accuracy. `cfg.learning_rate` is the annealing peak. Raises
    NonFiniteLoss when training diverges.
    """
    if len(np.unique(train_ds.targets)) < 2:
        raise ValueError("training split must contain both classes")
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, rng)
    state = adam_init(params)
    n = train_ds.n_rows
    total_steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    losses: list[float] = []
    val_acc: list[float] = []
    steps = 0

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            loss, grads = loss_and_gradients(
                train_ds.features[batch], train_ds.targets[batch], params, cfg
            )
            lr = cosine_lr(cfg.learning_rate, steps, total_steps)
            params, state = adam_step(params, grads, state, lr)
            epoch_loss += loss * len(batch)
            steps += 1
        for key in trainable_keys(params):
            if not np.isfinite(params[key]).all():
                raise NonFiniteLoss(f"parameter {key} became non-finite")
        losses.append(epoch_loss / n)
        val_acc.append(_accuracy(params, cfg, val_ds))

    report = TrainReport(
        losses=losses,
        val_accuracies=val_acc,
        params=params,
        wall_time_s=time.perf_counter() - start,
        steps=steps,
    )
    return params, report


# Flat binary layout, little-endian:
#   magic b"TSWM", uint32 version, uint32 tensor count, then per tensor
#   (sorted by key): uint16 name length, UTF-8 name, uint8 ndim,
#   ndim x uint32 shape, float64 row-major values.
_MAGIC = b"TSWM"
_VERSION = 1


def save_params(params: dict, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(params)))
        for key in sorted(params):
            arr = np.ascontiguousarray(params[key], dtype="<f8")
            name = key.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a tabswarm model file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported model format version {version}")
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            key = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n_values = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * n_values), dtype="<f8")
            params[key] = data.reshape(shape).astype(np.float64)
    return params
