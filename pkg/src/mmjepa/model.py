"""Multimodal encoder, predictor, and classifier on the tape engine.

Subjects become short token sequences: one token per image frame (small
conv net, global average pool, linear projection) and one token for the
expression vector (linear projection), each with a sinusoidal encoding of
its continuous timestamp and a learned modality embedding added. A pre-norm
transformer encodes the sequence; a lighter transformer ("predictor") fills
in masked positions from context during pretraining; a two-layer perceptron
over mean-pooled representations scores subjects for the supervised tasks.

Forward functions operate on batches with uniform token layout (B, L, d);
single-subject convenience wrappers back the per-subject contracts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

IMAGE = 0
EXPRESSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    predictor_layers: int = 1
    image_channels: tuple = (8, 16, 32)
    expression_dim: int = 128
    max_tokens: int = 8
    image_size: int = 32
    t_max: float = 2.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["image_channels"] = list(self.image_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        if "image_channels" in d:
            d["image_channels"] = tuple(d["image_channels"])
        return ModelConfig(**d)


def time_encoding(timestamps, d_model: int, t_max: float = 2.0, t_resolution: float = 1e-3) -> np.ndarray:
    """Sinusoidal encoding of continuous timestamps, computed at f64.

    Frequencies run geometrically from one quarter-cycle over [0, t_max]
    (which alone makes the encoding injective on that range) up to a quarter
    cycle per t_resolution step. Output shape: timestamps.shape + (d_model,).
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    k = d_model // 2
    w_min = np.pi / (2.0 * t_max)
    w_max = np.pi / (2.0 * t_resolution)
    omegas = w_min * (w_max / w_min) ** (np.arange(k) / max(k - 1, 1))
    phase = ts[..., None] * omegas
    enc = np.empty(ts.shape + (d_model,), dtype=np.float64)
    enc[..., 0 : 2 * k : 2] = np.sin(phase)
    enc[..., 1 : 2 * k : 2] = np.cos(phase)
    if d_model % 2 == 1:
        enc[..., -1] = 0.0
    return enc


# ---------------------------------------------------------------------------
# parameter bundle
# ---------------------------------------------------------------------------

def _xavier(rng, fan_in, fan_out, shape, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _transformer_param_specs(prefix: str, cfg: ModelConfig, n_layers: int):
    d, ff = cfg.d_model, cfg.d_ff
    for i in range(n_layers):
        base = f"{prefix}.layer{i}"
        yield f"{base}.ln1.gain", "ones", (d,)
        yield f"{base}.ln1.bias", "zeros", (d,)
        for nm in ("wq", "wk", "wv", "wo"):
            yield f"{base}.attn.{nm}", "linear", (d, d)
            yield f"{base}.attn.{nm}_b", "zeros", (d,)
        yield f"{base}.ln2.gain", "ones", (d,)
        yield f"{base}.ln2.bias", "zeros", (d,)
        yield f"{base}.ff.w1", "linear", (d, ff)
        yield f"{base}.ff.b1", "zeros", (ff,)
        yield f"{base}.ff.w2", "linear", (ff, d)
        yield f"{base}.ff.b2", "zeros", (d,)
    yield f"{prefix}.ln_final.gain", "ones", (d,)
    yield f"{prefix}.ln_final.bias", "zeros", (d,)


def _param_specs(cfg: ModelConfig):
    chans = cfg.image_channels
    c_in = 1
    for i, c_out in enumerate(chans):
        yield f"conv{i}.w", "conv", (c_out, c_in, 3, 3)
        yield f"conv{i}.b", "zeros", (c_out,)
        c_in = c_out
    d = cfg.d_model
    yield "img_proj.w", "linear", (chans[-1], d)
    yield "img_proj.b", "zeros", (d,)
    yield "expr_proj.w", "linear", (cfg.expression_dim, d)
    yield "expr_proj.b", "zeros", (d,)
    yield "modality_emb", "embed", (2, d)
    yield from _transformer_param_specs("encoder", cfg, cfg.n_layers)
    yield "mask_emb", "embed", (d,)
    yield from _transformer_param_specs("predictor", cfg, cfg.predictor_layers)
    yield "predictor_out.w", "linear", (d, d)
    yield "predictor_out.b", "zeros", (d,)
    yield "classifier.w1", "linear", (d, d)
    yield "classifier.b1", "zeros", (d,)
    yield "classifier.w2", "linear", (d, 1)
    yield "classifier.b2", "zeros", (1,)


def _init_array(kind, shape, rng, dtype):
    if kind == "zeros":
        return np.zeros(shape, dtype=dtype)
    if kind == "ones":
        return np.ones(shape, dtype=dtype)
    if kind == "linear":
        return _xavier(rng, shape[0], shape[1], shape, dtype)
    if kind == "conv":
        c_out, c_in, kh, kw = shape
        return _xavier(rng, c_in * kh * kw, c_out * kh * kw, shape, dtype)
    if kind == "embed":
        return rng.normal(0.0, 0.02, size=shape).astype(dtype)
    raise ValueError(kind)


class Model:
    """Parameter container with named groups (encoder / predictor / classifier)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        for name, kind, shape in _param_specs(config):
            self.params[name] = Parameter(_init_array(kind, shape, rng, self.dtype), name=name, dtype=self.dtype)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def _group(self, pred) -> list[Parameter]:
        return [p for name, p in self.params.items() if pred(name)]

    def encoder_parameters(self) -> list[Parameter]:
        return self._group(lambda n: n.split(".")[0].startswith(("conv", "img_proj", "expr_proj", "modality_emb", "encoder")))

    def predictor_parameters(self) -> list[Parameter]:
        return self._group(lambda n: n.startswith(("predictor", "mask_emb")))

    def classifier_parameters(self) -> list[Parameter]:
        return self._group(lambda n: n.startswith("classifier"))

    def encoder_param_names(self) -> list[str]:
        return [p.name for p in self.encoder_parameters()]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        for name, p in self.params.items():
            if name in arrays:
                src = np.asarray(arrays[name], dtype=self.dtype)
                if src.shape != p.data.shape:
                    raise ValueError(f"shape mismatch for {name}: checkpoint {src.shape} vs model {p.data.shape}")
                p.data[...] = src
            elif strict:
                raise KeyError(f"checkpoint missing parameter {name}")

    def target_copy(self) -> dict[str, np.ndarray]:
        """Fresh plain-array copy of the encoder bundle (for the EMA twin)."""
        return {name: self.params[name].data.copy() for name in self.encoder_param_names()}

    def reinit_group(self, names: list[str], seed: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        specs = {name: (kind, shape) for name, kind, shape in _param_specs(self.config)}
        for name in names:
            kind, shape = specs[name]
            p = self.params[name]
            p.data[...] = _init_array(kind, shape, rng, self.dtype)
            p.grad[...] = 0
            p.adam_m[...] = 0
            p.adam_v[...] = 0
            p.step_count = 0


def wrap_arrays(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Constant-tensor view of plain arrays (no gradients)."""
    return {name: Tensor(np.asarray(a)) for name, a in arrays.items()}


# ---------------------------------------------------------------------------
# forward pieces (all batched)
# ---------------------------------------------------------------------------

def conv_encode(weights: Mapping[str, Tensor], cfg: ModelConfig, frames: Tensor) -> Tensor:
    """(N, 1, H, W) -> (N, Cemb) via three stride-2 conv stages and GAP."""
    x = frames
    for i in range(len(cfg.image_channels)):
        x = T.conv2d(x, weights[f"conv{i}.w"], weights[f"conv{i}.b"], stride=2, padding=1)
        x = T.gelu(x)
    return T.mean(x, axis=(2, 3))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _attention(weights, base: str, cfg: ModelConfig, x: Tensor) -> Tensor:
    b_, l_, d = x.data.shape
    h = cfg.n_heads
    dh = d // h
    q = _linear(x, weights[f"{base}.attn.wq"], weights[f"{base}.attn.wq_b"])
    k = _linear(x, weights[f"{base}.attn.wk"], weights[f"{base}.attn.wk_b"])
    v = _linear(x, weights[f"{base}.attn.wv"], weights[f"{base}.attn.wv_b"])

    def split(t):
        return T.transpose(T.reshape(t, (b_, l_, h, dh)), (0, 2, 1, 3))  # (B, H, L, dh)

    q, k, v = split(q), split(k), split(v)
    scale = np.asarray(1.0 / np.sqrt(dh), dtype=x.dtype)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), Tensor(scale))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)  # (B, H, L, dh)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b_, l_, d))
    return _linear(merged, weights[f"{base}.attn.wo"], weights[f"{base}.attn.wo_b"])


def _transformer(weights, prefix: str, cfg: ModelConfig, n_layers: int, x: Tensor) -> Tensor:
    for i in range(n_layers):
        base = f"{prefix}.layer{i}"
        normed = T.layer_norm(x, weights[f"{base}.ln1.gain"], weights[f"{base}.ln1.bias"])
        x = T.add(x, _attention(weights, base, cfg, normed))
        normed = T.layer_norm(x, weights[f"{base}.ln2.gain"], weights[f"{base}.ln2.bias"])
        ff = _linear(T.gelu(_linear(normed, weights[f"{prefix}.layer{i}.ff.w1"], weights[f"{prefix}.layer{i}.ff.b1"])), weights[f"{prefix}.layer{i}.ff.w2"], weights[f"{prefix}.layer{i}.ff.b2"])
        x = T.add(x, ff)
    return T.layer_norm(x, weights[f"{prefix}.ln_final.gain"], weights[f"{prefix}.ln_final.bias"])


def tokenize_batch(
    weights: Mapping[str, Tensor],
    cfg: ModelConfig,
    frames: np.ndarray | None,  # (B, F, H, W), or None to drop imaging
    timestamps: np.ndarray | None,  # (B, F)
    expressions: np.ndarray | None,  # (B, m) or None
    dtype=np.float32,
) -> Tensor:
    """Project a uniform batch into token space: returns (B, L, d_model).

    Token order: frames in time order, then the expression token (timestamp
    0, the baseline scan it accompanies). All subjects in the batch must
    share the same layout (frame count, expression presence). Either
    modality may be omitted by passing None, but not both.
    """
    if frames is None and expressions is None:
        raise ValueError("tokenize_batch needs at least one modality")
    parts = []
    tok_ts = []
    modalities = []
    if frames is not None:
        b, f, hh, ww = frames.shape
        x = Tensor(np.ascontiguousarray(frames.reshape(b * f, 1, hh, ww), dtype=dtype))
        feats = conv_encode(weights, cfg, x)  # (B*F, C)
        img_tokens = _linear(feats, weights["img_proj.w"], weights["img_proj.b"])
        parts.append(T.reshape(img_tokens, (b, f, cfg.d_model)))
        tok_ts.append(np.asarray(timestamps, dtype=np.float64))
        modalities.append(np.zeros((b, f), dtype=np.int64))
    else:
        b = expressions.shape[0]
    if expressions is not None:
        e = Tensor(np.ascontiguousarray(expressions, dtype=dtype))
        expr_tok = T.reshape(_linear(e, weights["expr_proj.w"], weights["expr_proj.b"]), (b, 1, cfg.d_model))
        parts.append(expr_tok)
        tok_ts.append(np.zeros((b, 1), dtype=np.float64))
        modalities.append(np.full((b, 1), EXPRESSION, dtype=np.int64))

    tokens = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
    all_ts = np.concatenate(tok_ts, axis=1)
    all_mods = np.concatenate(modalities, axis=1)

    enc = Tensor(time_encoding(all_ts, cfg.d_model, cfg.t_max).astype(dtype))
    mod_emb = T.take_rows(weights["modality_emb"], all_mods)  # (B, L, d)
    return T.add(T.add(tokens, enc), mod_emb)


def encoder_forward(weights: Mapping[str, Tensor], cfg: ModelConfig, tokens: Tensor) -> Tensor:
    """(B, L, d) token batch -> (B, L, d) representations, order-preserving."""
    if tokens.data.shape[1] == 0:
        raise ValueError("encoder needs at least one token")
    return _transformer(weights, "encoder", cfg, cfg.n_layers, tokens)


def predictor_forward(weights: Mapping[str, Tensor], cfg: ModelConfig, context_reps: Tensor, queries: Tensor) -> Tensor:
    """Predict masked-position representations: returns (B, K, d)."""
    k = queries.data.shape[1]
    if k == 0:
        raise ValueError("predictor needs at least one masked position")
    joint = T.concat([context_reps, queries], axis=1)
    out = _transformer(weights, "predictor", cfg, cfg.predictor_layers, joint)
    tail = T.narrow(out, 1, out.data.shape[1] - k, k)
    return _linear(tail, weights["predictor_out.w"], weights["predictor_out.b"])


def mask_queries(
    weights: Mapping[str, Tensor],
    cfg: ModelConfig,
    timestamps: np.ndarray,  # (B, K)
    modalities: np.ndarray,  # (B, K)
    dtype=np.float32,
) -> Tensor:
    """Mask-position query tokens: shared mask embedding + time + modality."""
    b, k = timestamps.shape
    enc = Tensor(time_encoding(np.asarray(timestamps, np.float64), cfg.d_model, cfg.t_max).astype(dtype))
    mod = T.take_rows(weights["modality_emb"], np.asarray(modalities, dtype=np.int64))
    base = T.reshape(weights["mask_emb"], (1, 1, cfg.d_model))
    return T.add(T.add(base, enc), mod)


def classify_batch(weights: Mapping[str, Tensor], reps: Tensor) -> Tensor:
    """Mean-pool token representations, 2-layer perceptron -> logits (B,)."""
    pooled = T.mean(reps, axis=1)  # (B, d)
    h = T.relu(_linear(pooled, weights["classifier.w1"], weights["classifier.b1"]))
    logits = _linear(h, weights["classifier.w2"], weights["classifier.b2"])
    return T.reshape(logits, (logits.data.shape[0],))


# ---------------------------------------------------------------------------
# single-subject wrappers
# ---------------------------------------------------------------------------

def encode_image(model: Model, frame: np.ndarray) -> np.ndarray:
    """Feature vector of one image (inference only)."""
    cfg = model.config
    if frame.shape != (cfg.image_size, cfg.image_size):
        raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} frame, got {frame.shape}")
    with T.no_grad():
        x = Tensor(frame.reshape(1, 1, *frame.shape).astype(model.dtype))
        return conv_encode(model.params, cfg, x).data[0].copy()


def tokenize_subject(model: Model, subject) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """One subject -> ((1, L, d) tokens, (L,) timestamps, (L,) modalities)."""
    cfg = model.config
    frames = np.stack(subject.frames)[None]  # (1, F, H, W)
    ts = np.asarray(subject.timestamps, dtype=np.float64)[None]
    expr = None if subject.expression is None else np.asarray(subject.expression, dtype=np.float64)[None]
    tokens = tokenize_batch(model.params, cfg, frames, ts, expr, dtype=model.dtype)
    l = tokens.data.shape[1]
    all_ts = np.concatenate([ts[0], [0.0]]) if expr is not None else ts[0]
    mods = np.array([IMAGE] * len(subject.frames) + ([EXPRESSION] if expr is not None else []), dtype=np.int64)
    assert l == len(all_ts) == len(mods)
    return tokens, all_ts, mods


def forward_encoder_subject(model: Model, tokens: Tensor, mask_flags: np.ndarray | None = None) -> Tensor:
    """Run the context encoder for one subject, optionally dropping masked tokens."""
    if mask_flags is not None:
        keep = np.nonzero(~np.asarray(mask_flags, dtype=bool))[0]
        if keep.size == 0:
            raise ValueError("no unmasked tokens to encode")
        tokens = T.gather_rows(tokens, keep[None, :])
    return encoder_forward(model.params, model.config, tokens)


def classify_subject(model: Model, subject) -> float:
    """Sigmoid score for one subject (inference only)."""
    with T.no_grad():
        tokens, _, _ = tokenize_subject(model, subject)
        reps = encoder_forward(model.params, model.config, tokens)
        logit = classify_batch(model.params, reps)
        return float(T.sigmoid(logit).data[0])
