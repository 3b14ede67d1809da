"""Desk-scale attention decode harness for end-to-end fidelity checks.

A :class:`ToyModel` is a stack of attention-only layers over a residual
stream. Keys and Values are exogenous synthetic streams (with planted
outlier structure); the residual stream only drives the queries, so
quantization error in layer ``l`` reaches later layers through their queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from kvq.kvcache import (
    KeyQuantizer,
    QuantConfig,
    QuantizedKVCache,
    ValueQuantizer,
    calibrate_key_quantizer,
    calibrate_value_quantizer,
)
from kvq.rope import RopeParams, rope_apply
from kvq.sensitivity import LayerSensitivity, assign_mixed_precision, layer_sensitivity
from kvq.tensor_io import CalibrationSet


# --- synthetic data -------------------------------------------------------------

KEY_SPIKE_RATE = 5e-4
KEY_OFFSET = 2.0
VALUE_SPIKE_RATE = 5e-3  # heavy outliers stay rarer than a 1% outlier budget
VALUE_TOKEN_SPREAD = 0.25


def planted_channels(hidden: int, count: int, seed: int) -> np.ndarray:
    """Deterministic, sorted set of ``count`` outlier channels."""
    if not 0 <= count < hidden:
        raise ValueError(f"outlier_channel_count must be in [0, {hidden})")
    rng = np.random.default_rng([seed, 0xC4A7])
    return np.sort(rng.choice(hidden, size=count, replace=False))


def gen_synthetic_kv(
    dims: tuple[int, int, int],
    outlier_channel_count: int,
    outlier_scale: float,
    seed: int,
) -> CalibrationSet:
    """``dims = (samples, tokens, hidden)``.

    Keys: unit Gaussians with the planted channels' std multiplied by
    ``outlier_scale`` and shifted to a consistent signed magnitude, plus
    rare spikes (heavy per-channel tails) that scale every channel alike, so
    std ratios between channels are unchanged.
    Values: Gaussians with a lognormal per-token scale and rare large spikes,
    both growing with ``outlier_scale`` (no fixed channel).
    ``outlier_scale=1`` gives plain Gaussian data.
    """
    n_samples, n_tokens, hidden = dims
    if outlier_scale < 1:
        raise ValueError("outlier_scale must be >= 1")
    chans = planted_channels(hidden, outlier_channel_count, seed)
    rng = np.random.default_rng([seed, 1])
    key_std = np.ones(hidden)
    key_std[chans] = outlier_scale
    # planted channels also sit at a consistent signed magnitude (zero when outlier_scale == 1)
    key_mean = np.zeros(hidden)
    key_mean[chans] = KEY_OFFSET * (outlier_scale - 1) * rng.choice([-1.0, 1.0], size=len(chans))
    tail = np.log(outlier_scale)
    keys, values = [], []
    for _ in range(n_samples):
        k = rng.standard_normal((n_tokens, hidden)) * key_std
        k = np.where(rng.random((n_tokens, hidden)) < KEY_SPIKE_RATE, k * np.sqrt(outlier_scale), k)
        keys.append((k + key_mean).astype(np.float32))
        token_scale = np.exp(VALUE_TOKEN_SPREAD * tail * rng.standard_normal((n_tokens, 1)))
        v = rng.standard_normal((n_tokens, hidden)) * token_scale
        spikes = rng.random((n_tokens, hidden)) < VALUE_SPIKE_RATE
        v = np.where(spikes, v * outlier_scale, v)
        values.append(v.astype(np.float32))
    return CalibrationSet(keys, values)


# --- model --------------------------------------------------------------------------


@dataclass
class ToyModel:
    n_layers: int
    n_heads: int
    head_dim: int
    wq: np.ndarray          # [L, D, D]
    wo: np.ndarray          # [L, D, D]
    query_gain: np.ndarray  # [L, D], keeps scores from saturating on outlier channels
    rope: RopeParams

    def __post_init__(self) -> None:
        if not (1 <= self.n_layers <= 4 and 1 <= self.n_heads <= 4 and 2 <= self.head_dim <= 16):
            raise ValueError("toy model is limited to 4 layers, 4 heads, head_dim 16")

    @property
    def hidden(self) -> int:
        return self.n_heads * self.head_dim

    @classmethod
    def create(cls, n_layers: int, n_heads: int, head_dim: int, seed: int,
               key_channel_scale: np.ndarray | None = None, theta_base: float = 10000.0) -> ToyModel:
        d_model = n_heads * head_dim
        rng = np.random.default_rng([seed, 2])
        wq = rng.standard_normal((n_layers, d_model, d_model)) / np.sqrt(d_model)
        wo = rng.standard_normal((n_layers, d_model, d_model)) / np.sqrt(d_model)
        if key_channel_scale is None:
            gain = np.ones((n_layers, d_model))
        else:
            # RoPE mixes channel c with its partner c +- d/2, so damp the whole pair;
            # every pair then contributes to the logits on the same scale
            sc = np.asarray(key_channel_scale, dtype=np.float64).reshape(n_layers, n_heads, 2, head_dim // 2)
            gain = np.broadcast_to(1.0 / sc.max(axis=2, keepdims=True), sc.shape).reshape(n_layers, d_model)
        return cls(n_layers, n_heads, head_dim, wq, wo, gain, RopeParams(head_dim, theta_base))

    def queries(self, layer: int, h: np.ndarray, positions) -> np.ndarray:
        """RoPE'd queries ``[..., H, d]`` from residual-stream rows ``h[..., D]``."""
        x = h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + 1e-6)
        q = (x @ self.wq[layer].T) * self.query_gain[layer]
        q = q.reshape(q.shape[:-1] + (self.n_heads, self.head_dim))
        return rope_apply(self.rope, q, np.asarray(positions)[..., None])

    def rotate_keys(self, keys: np.ndarray) -> np.ndarray:
        """``[T, D]`` pre-RoPE keys -> ``[T, H, d]`` rotated to their positions (float64)."""
        t = len(keys)
        k = np.asarray(keys, dtype=np.float64).reshape(t, self.n_heads, self.head_dim)
        return rope_apply(self.rope, k, np.arange(t)[:, None])


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# --- decode data --------------------------------------------------------------------


@dataclass
class DecodeData:
    calib: dict[int, CalibrationSet]     # per layer; keys pre-RoPE, [tokens, D] per sample
    calib_inputs: list[np.ndarray]       # per sample, residual stream rows [tokens, D]
    eval_keys: list[np.ndarray]          # per layer, [T_eval, D]
    eval_values: list[np.ndarray]
    eval_inputs: np.ndarray              # [steps, D]; step s queries at position T_eval - steps + s

    @property
    def steps(self) -> int:
        return len(self.eval_inputs)


@dataclass(frozen=True)
class SimConfig:
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 8
    n_calib: int = 16
    calib_tokens: int = 64
    eval_tokens: int = 128
    steps: int = 16
    outlier_channels: int = 2
    outlier_scale: float = 20.0
    # short toy contexts: base chosen so the slowest pair still turns appreciably over a few hundred tokens
    rope_base: float = 500.0
    # Value magnitude grows with depth by this factor per layer, so layers differ in sensitivity
    value_growth: float = 2.0


# wider heads give each 64-wide Value one outlier slot at f=1%; more calibration
# samples give each Key channel two outlier slots at f=0.1%
ORDERING_SIM = SimConfig(head_dim=16, n_calib=32)


def make_task(seed: int, sim: SimConfig = SimConfig()) -> tuple[ToyModel, DecodeData]:
    """Model plus calibration and evaluation streams sharing one planted structure per layer."""
    if sim.calib_tokens > sim.eval_tokens or sim.steps > sim.eval_tokens:
        raise ValueError("calib_tokens and steps must not exceed eval_tokens")
    d_model = sim.n_heads * sim.head_dim
    calib, eval_k, eval_v, key_scale = {}, [], [], []
    for layer in range(sim.n_layers):
        layer_seed = seed * 1009 + layer
        cs = gen_synthetic_kv((sim.n_calib + 1, sim.eval_tokens, d_model),
                              sim.outlier_channels, sim.outlier_scale, layer_seed)
        growth = np.float32(sim.value_growth ** layer)
        vals = [v * growth for v in cs.values]
        calib[layer] = CalibrationSet([k[: sim.calib_tokens] for k in cs.keys[:-1]],
                                      [v[: sim.calib_tokens] for v in vals[:-1]])
        eval_k.append(cs.keys[-1])
        eval_v.append(vals[-1])
        scale = np.ones(d_model)
        scale[planted_channels(d_model, sim.outlier_channels, layer_seed)] = sim.outlier_scale
        key_scale.append(scale)
    model = ToyModel.create(sim.n_layers, sim.n_heads, sim.head_dim, seed, np.stack(key_scale), sim.rope_base)
    rng = np.random.default_rng([seed, 3])
    calib_inputs = [rng.standard_normal((sim.calib_tokens, d_model)) for _ in range(sim.n_calib)]
    eval_inputs = rng.standard_normal((sim.steps, d_model))
    return model, DecodeData(calib, calib_inputs, eval_k, eval_v, eval_inputs)


# --- quantizer construction -----------------------------------------------------------


@dataclass
class LayerQuantizers:
    """What to do with one layer's Keys and Values. ``None`` means full precision."""

    keys: KeyQuantizer | ValueQuantizer | None
    values: KeyQuantizer | ValueQuantizer | None
    key_rope: str = "pre"


def _rotated_stack(model: ToyModel, mats: list[np.ndarray]) -> list[np.ndarray]:
    return [model.rotate_keys(k).reshape(len(k), -1).astype(np.float32) for k in mats]


def _fisher_weights(grads: list[np.ndarray]) -> list[np.ndarray] | None:
    # per-sample squared gradients, paired elementwise with that sample's activations
    return [np.square(np.asarray(g, dtype=np.float64)) for g in grads] if grads else None


def build_layer_quantizers(model: ToyModel, calib: CalibrationSet, cfg: QuantConfig) -> LayerQuantizers:
    if cfg.passthrough:
        return LayerQuantizers(None, None, cfg.key_rope)
    fk = _fisher_weights(calib.grads_keys)
    fv = _fisher_weights(calib.grads_values)
    keys = calib.keys if cfg.key_rope == "pre" else _rotated_stack(model, calib.keys)
    if cfg.key_axis == "channel":
        kq = calibrate_key_quantizer(keys, fk, cfg, model.rope if cfg.key_rope == "pre" else None)
    else:
        kq = calibrate_value_quantizer(keys, fk, cfg)
    if cfg.value_axis == "token":
        vq = calibrate_value_quantizer(calib.values, fv, cfg)
    else:
        vq = calibrate_key_quantizer(calib.values, fv, cfg)
    return LayerQuantizers(kq, vq, cfg.key_rope)


def _layer_cfg(cfg: QuantConfig, layer: int, layer_bits: dict[int, int] | None) -> QuantConfig:
    if layer_bits and layer in layer_bits:
        return replace(cfg, bits=layer_bits[layer])
    return cfg


# --- decode backends -----------------------------------------------------------------


class _DenseBackend:
    """Full-precision attention over (possibly fake-quantized) K/V streams."""

    def __init__(self, model: ToyModel, keys: np.ndarray, values: np.ndarray, quant: LayerQuantizers | None):
        t = len(keys)
        if quant is not None and quant.key_rope == "post":
            k_rot = model.rotate_keys(keys).reshape(t, -1)
            if quant.keys is not None:
                k_rot = quant.keys.fake_quantize(k_rot)
            self.k_rot = np.asarray(k_rot, dtype=np.float64).reshape(t, model.n_heads, model.head_dim)
        else:
            if quant is not None and quant.keys is not None:
                keys = quant.keys.fake_quantize(keys)
            self.k_rot = model.rotate_keys(keys)
        if quant is not None and quant.values is not None:
            values = quant.values.fake_quantize(values)
        self.v = np.asarray(values, dtype=np.float64).reshape(t, model.n_heads, model.head_dim)

    def scores(self, q_rot: np.ndarray, upto: int) -> np.ndarray:
        return np.einsum("thd,hd->ht", self.k_rot[:upto], q_rot)

    def attend(self, p: np.ndarray) -> np.ndarray:
        return np.einsum("ht,thd->hd", p, self.v[: p.shape[1]]).reshape(-1)


class _CacheBackend:
    """Packed quantized cache; tokens are appended as decode reaches them."""

    def __init__(self, model: ToyModel, keys: np.ndarray, values: np.ndarray, quant: LayerQuantizers, prefill: int):
        self.keys, self.values = keys, values
        self.cache = QuantizedKVCache(quant.keys, quant.values, model.n_heads)
        self.cache.extend(keys[:prefill], values[:prefill])

    def scores(self, q_rot: np.ndarray, upto: int) -> np.ndarray:
        while self.cache.token_count < upto:
            t = self.cache.token_count
            self.cache.append_key(self.keys[t])
            self.cache.append_value(self.values[t])
        s = self.cache.qk_scores(q_rot.reshape(-1))
        return s.reshape(len(q_rot), -1)

    def attend(self, p: np.ndarray) -> np.ndarray:
        return self.cache.av_matvec(p)


def _run_decode(model: ToyModel, data: DecodeData, backends: list) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns per-step concatenated attention outputs ``[steps, L*D]`` and per-layer scores."""
    t_eval = len(data.eval_keys[0])
    steps = data.steps
    outs = np.zeros((steps, model.n_layers * model.hidden))
    scores = [[] for _ in range(model.n_layers)]
    for s in range(steps):
        pos = t_eval - steps + s
        h = np.asarray(data.eval_inputs[s], dtype=np.float64)
        for layer, be in enumerate(backends):
            q = model.queries(layer, h, pos)
            sc = be.scores(q, pos + 1) / np.sqrt(model.head_dim)
            scores[layer].append(sc)
            o = be.attend(_softmax(sc))
            outs[s, layer * model.hidden : (layer + 1) * model.hidden] = o
            h = h + model.wo[layer] @ o
    return outs, [np.concatenate([x.reshape(-1) for x in sc]) for sc in scores]


@dataclass
class FidelityReport:
    per_step_rel_l2: list[float]
    max_abs: float
    per_layer_score_err: list[float]

    def __post_init__(self) -> None:
        if min(self.per_step_rel_l2 + self.per_layer_score_err + [self.max_abs]) < 0:
            raise ValueError("errors are non-negative")

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_step_rel_l2))

    def to_dict(self) -> dict:
        return {
            "per_step_rel_l2": self.per_step_rel_l2,
            "max_abs": self.max_abs,
            "per_layer_score_err": self.per_layer_score_err,
            "mean_rel_l2": self.mean,
        }


def _rel(a: np.ndarray, ref: np.ndarray) -> float:
    den = np.linalg.norm(ref)
    num = np.linalg.norm(a - ref)
    return float(num / den) if den > 0 else float(num)


def decode_compare(
    model: ToyModel,
    data: DecodeData,
    cfg: QuantConfig,
    steps: int | None = None,
    layer_bits: dict[int, int] | None = None,
    backend: str = "cache",
) -> FidelityReport:
    """Decode the same inputs against a full-precision and a quantized cache.

    ``backend="cache"`` runs the packed cache and its kernels (default layout
    only); ``"reference"`` fake-quantizes the streams and reuses the dense
    attention path, which is how the layout ablations run.
    """
    if backend not in ("cache", "reference"):
        raise ValueError(f"unknown backend {backend!r}")
    if steps is not None:
        if not 1 <= steps <= data.steps:
            raise ValueError(f"steps must be in [1, {data.steps}]")
        data = replace(data, eval_inputs=data.eval_inputs[:steps])
    t_eval = len(data.eval_keys[0])
    prefill = t_eval - data.steps

    fp = [_DenseBackend(model, data.eval_keys[l], data.eval_values[l], None) for l in range(model.n_layers)]
    quantized = []
    for l in range(model.n_layers):
        lcfg = _layer_cfg(cfg, l, layer_bits)
        quant = build_layer_quantizers(model, data.calib[l], lcfg)
        if lcfg.passthrough:
            quantized.append(fp[l])
        elif backend == "cache" and lcfg.is_default_layout:
            quantized.append(_CacheBackend(model, data.eval_keys[l], data.eval_values[l], quant, prefill))
        elif backend == "cache":
            raise ValueError("the packed cache only supports per-channel pre-RoPE Keys and per-token Values")
        else:
            quantized.append(_DenseBackend(model, data.eval_keys[l], data.eval_values[l], quant))

    out_fp, sc_fp = _run_decode(model, data, fp)
    out_q, sc_q = _run_decode(model, data, quantized)
    return FidelityReport(
        per_step_rel_l2=[_rel(a, b) for a, b in zip(out_q, out_fp)],
        max_abs=float(np.max(np.abs(out_q - out_fp))),
        per_layer_score_err=[_rel(a, b) for a, b in zip(sc_q, sc_fp)],
    )


# --- gradients for the Fisher pipeline ---------------------------------------------


def central_difference(fn: Callable[[np.ndarray], float], x, eps: float = 1e-3) -> np.ndarray:
    """Elementwise central-difference gradient of a scalar function."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + eps
        up = fn(x)
        x[i] = orig - eps
        down = fn(x)
        x[i] = orig
        g[i] = (up - down) / (2 * eps)
    return g


def calib_forward(model: ToyModel, data: DecodeData, sample: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Causal pass over one calibration sample; returns per-layer (RoPE'd queries, attention probs)."""
    x = np.asarray(data.calib_inputs[sample], dtype=np.float64)
    t = len(x)
    mask = np.tril(np.ones((t, t), dtype=bool))
    h = x.copy()
    per_layer = []
    for layer in range(model.n_layers):
        q = model.queries(layer, h, np.arange(t))                 # [T, H, d]
        k = model.rotate_keys(data.calib[layer].keys[sample])     # [T, H, d]
        v = np.asarray(data.calib[layer].values[sample], dtype=np.float64).reshape(t, model.n_heads, -1)
        s = np.einsum("ihd,jhd->hij", q, k) / np.sqrt(model.head_dim)
        p = _softmax(np.where(mask, s, -np.inf))
        o = np.einsum("hij,jhd->ihd", p, v).reshape(t, -1)
        h = h + o @ model.wo[layer].T
        per_layer.append((q, p))
    return per_layer


def calib_targets(model: ToyModel, data: DecodeData, target: str = "zero", seed: int = 0) -> list[list[np.ndarray]]:
    """Regression targets ``y[sample][layer]`` (``[T, D]``) for the toy loss.

    ``"zero"``: ``y = 0``, so the loss is the plain sum of squared outputs.
    ``"sampled"``: ``y ~ N(out, I)`` drawn once per sample; the expected
    squared gradient is then ``diag(J^T J)``, the Fisher of a unit-variance
    Gaussian output model.
    """
    if target not in ("zero", "sampled"):
        raise ValueError(f"unknown target {target!r}")
    rng = np.random.default_rng([seed, 4])
    out = []
    for sample in range(len(data.calib_inputs)):
        t = len(data.calib_inputs[sample])
        ys = []
        for layer, (_, p) in enumerate(calib_forward(model, data, sample)):
            if target == "zero":
                ys.append(np.zeros((t, model.hidden)))
            else:
                v = np.asarray(data.calib[layer].values[sample], dtype=np.float64).reshape(t, model.n_heads, -1)
                o = np.einsum("hij,jhd->ihd", p, v).reshape(t, -1)
                ys.append(o + rng.standard_normal(o.shape))
        out.append(ys)
    return out


def _first_scored(t: int, loss_from: float) -> int:
    if not 0 <= loss_from < 1:
        raise ValueError("loss_from must be in [0, 1)")
    return int(loss_from * t)


def toy_loss(
    model: ToyModel, data: DecodeData, sample: int, targets: list[np.ndarray] | None = None, loss_from: float = 0.5
) -> list[float]:
    """Per-layer toy loss: squared (output - target) summed over query positions ``>= loss_from * T``.

    Skipping the first positions keeps the handful of queries that see only a
    few keys (very sharp softmax) from dominating the gradients; decode
    queries always see a long context.
    """
    out = []
    for layer, (_, p) in enumerate(calib_forward(model, data, sample)):
        t = p.shape[-1]
        v = np.asarray(data.calib[layer].values[sample], dtype=np.float64).reshape(t, model.n_heads, -1)
        o = np.einsum("hij,jhd->ihd", p, v).reshape(t, -1)
        y = 0.0 if targets is None else targets[layer]
        out.append(float(np.sum(((o - y) ** 2)[_first_scored(t, loss_from) :])))
    return out


def finite_diff_grads(
    model: ToyModel, data: DecodeData, eps: float = 1e-3, target: str = "zero", seed: int = 0, loss_from: float = 0.5
) -> dict[int, tuple[list, list]]:
    """Central differences of each layer's :func:`toy_loss` w.r.t. its cached K and V elements.

    Queries come from the unperturbed pass (they depend only on earlier
    layers). A single K or V element touches one head and, for a Key, one
    score column, so each perturbed loss is evaluated exactly with a
    rank-one update of that head's softmax instead of a full re-run.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    n_h, d = model.n_heads, model.head_dim
    targets = calib_targets(model, data, target, seed)
    grads = {l: ([], []) for l in range(model.n_layers)}
    inv_freq = model.rope.inv_freq()
    for sample in range(len(data.calib_inputs)):
        for layer, (q, p) in enumerate(calib_forward(model, data, sample)):
            t = p.shape[-1]
            i0 = _first_scored(t, loss_from)
            p = p[:, i0:]                                                   # scored query rows only
            v = np.asarray(data.calib[layer].values[sample], dtype=np.float64).reshape(t, n_h, d)
            o = np.einsum("hij,jhd->hid", p, v)                            # [H, rows, d]
            y = targets[sample][layer][i0:].reshape(t - i0, n_h, d).transpose(1, 0, 2)
            r = o - y
            q = q[i0:]
            gk = np.zeros((t, n_h, d))
            gv = np.zeros((t, n_h, d))
            ang = np.arange(t)[:, None] * np.concatenate([inv_freq, inv_freq])[None, :]  # [t, c]
            cos, sin = np.cos(ang), np.sin(ang)
            for h in range(n_h):
                ph = p[h]                                                   # [i, t]
                # Values: column c of the output shifts by +-eps * p[:, t]
                for sign in (1, -1):
                    shifted = r[h][:, None, :] + sign * eps * ph[:, :, None]  # [i, t, c]
                    gv[:, h, :] += sign * np.sum(shifted**2, axis=0)
                # Keys: score (i, t) moves by +-eps * (R_t^T q_i)[c] / sqrt(d)
                qh = q[:, h, :]                                             # [i, c]
                rq = np.concatenate([-qh[:, d // 2 :], qh[:, : d // 2]], axis=-1)
                coef = (qh[:, None, :] * cos[None] - rq[:, None, :] * sin[None]) / np.sqrt(d)  # [i, t, c]
                for sign in (1, -1):
                    growth = np.expm1(sign * eps * coef) * ph[:, :, None]  # p_it (e^delta - 1)
                    new_o = (o[h][:, None, None, :] + growth[..., None] * v[None, :, h, None, :]) / (1.0 + growth)[..., None]
                    gk[:, h, :] += sign * np.sum((new_o - y[h][:, None, None, :]) ** 2, axis=(0, 3))
            grads[layer][0].append((gk / (2 * eps)).reshape(t, -1))
            grads[layer][1].append((gv / (2 * eps)).reshape(t, -1))
    return grads


def with_grads(
    model: ToyModel, data: DecodeData, eps: float = 1e-3, target: str = "sampled", seed: int = 0, loss_from: float = 0.5
) -> DecodeData:
    """Copy of ``data`` whose calibration sets carry finite-difference gradients."""
    g = finite_diff_grads(model, data, eps, target, seed, loss_from)
    calib = {l: CalibrationSet(cs.keys, cs.values, g[l][0], g[l][1]) for l, cs in data.calib.items()}
    return replace(data, calib=calib)


# --- sensitivity ---------------------------------------------------------------------------


def layer_sensitivities(model: ToyModel, data: DecodeData, low_cfg: QuantConfig) -> list[LayerSensitivity]:
    """Omega per layer at the lower precision, summed over K and V and all samples."""
    out = []
    for layer in range(model.n_layers):
        cs = data.calib[layer]
        if not cs.has_grads:
            raise ValueError("sensitivity needs calibration gradients (see with_grads)")
        quant = build_layer_quantizers(model, cs, low_cfg)
        omega = 0.0
        for acts, grads, qz in ((cs.keys, cs.grads_keys, quant.keys), (cs.values, cs.grads_values, quant.values)):
            for a, g in zip(acts, grads):
                omega += layer_sensitivity(a, qz.fake_quantize(a), np.square(g))
        out.append(LayerSensitivity(layer, omega))
    return out


# --- ablations ----------------------------------------------------------------------------

# name -> (better, worse): the first configuration is expected to give the lower error
ORDERINGS = (
    "key_channel_vs_token",
    "key_pre_vs_post_rope",
    "outliers_1pct_vs_0.1pct",
    "outliers_0.1pct_vs_none",
    "vector_vs_matrix_thresholds",
    "qnorm_vs_plain_2bit",
    "fisher_vs_unweighted",
)


def ordering_errors(model: ToyModel, data: DecodeData) -> dict[str, tuple[float, float]]:
    """End-to-end (or score) errors for each ablation pair on one task.

    The default setting is 4-bit, 1% outliers, Fisher-weighted codebooks;
    each pair changes one knob. Layout ablations run on the reference backend.
    """
    base_cfg = QuantConfig()
    base = decode_compare(model, data, base_cfg)
    ref = decode_compare(model, data, base_cfg, backend="reference")

    def err(backend: str = "cache", **kw) -> FidelityReport:
        return decode_compare(model, data, replace(base_cfg, **kw), backend=backend)

    f01 = err(outlier_fraction=0.001).mean
    return {
        "key_channel_vs_token": (ref.mean, err("reference", key_axis="token").mean),
        "key_pre_vs_post_rope": (float(np.mean(ref.per_layer_score_err)),
                                 float(np.mean(err("reference", key_rope="post").per_layer_score_err))),
        "outliers_1pct_vs_0.1pct": (base.mean, f01),
        "outliers_0.1pct_vs_none": (f01, err(outlier_fraction=0.0).mean),
        "vector_vs_matrix_thresholds": (base.mean, err(threshold_mode="matrix").mean),
        "qnorm_vs_plain_2bit": (err(bits=2, qnorm=True).mean, err(bits=2).mean),
        "fisher_vs_unweighted": (base.mean, err(fisher_weighted=False).mean),
    }


def mixed_precision_errors(model: ToyModel, data: DecodeData, demote: int = 1,
                           high_bits: int = 4, low_bits: int = 2) -> tuple[float, float]:
    """Error when demoting the least-sensitive layers vs demoting the inverse choice."""
    sens = layer_sensitivities(model, data, QuantConfig(bits=low_bits))
    chosen = assign_mixed_precision(sens, demote)
    inverse = assign_mixed_precision([LayerSensitivity(s.layer_id, -s.omega + max(x.omega for x in sens))
                                      for s in sens], demote)
    cfg = QuantConfig(bits=high_bits)
    return (decode_compare(model, data, cfg, layer_bits={l: low_bits for l in chosen}).mean,
            decode_compare(model, data, cfg, layer_bits={l: low_bits for l in inverse}).mean)
