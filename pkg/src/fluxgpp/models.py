"""The two sequence regressors: a stacked LSTM and a decoder-only transformer.

Both map a (k x 28) daily-token window to one GPP value.  Forward passes
are expressed entirely in `gradkit` ops, so parameters train by reverse-mode
autodiff.  Batched entry points (`*_forward_batch`) carry a leading batch
axis; the single-window functions wrap them.

Conventions, fixed here and relied on by the checkpoint format:
  * LSTM gate order inside the fused projection is  i | f | g | o
    (input, forget, candidate, output), each of width `hidden_size`.
  * Transformer blocks are pre-norm residual blocks with a GELU
    feed-forward, learned positional encodings added to a linear token
    embedding, a final layer norm, and the prediction read from the last
    position.
  * Dropout is inverted dropout, active only in train mode; eval-mode
    forwards are deterministic functions of (window, params).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import gradkit as gk
from .gradkit import Tensor

N_FEATURES = 28

__all__ = [
    "N_FEATURES",
    "LstmConfig",
    "TransformerConfig",
    "init_lstm_params",
    "init_transformer_params",
    "lstm_cell_step",
    "lstm_forward",
    "lstm_forward_batch",
    "attention",
    "layer_norm",
    "gelu",
    "transformer_forward",
    "transformer_forward_batch",
    "transformer_positionwise",
    "transformer_states",
    "Model",
    "param_count",
]


@dataclass(frozen=True)
class LstmConfig:
    hidden_size: int
    num_layers: int = 1
    dropout: float = 0.3
    n_features: int = N_FEATURES

    def __post_init__(self):
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class TransformerConfig:
    model_dim: int
    ff_dim: int
    num_heads: int
    num_layers: int = 1
    dropout: float = 0.3
    max_positions: int = 120
    n_features: int = N_FEATURES

    def __post_init__(self):
        if min(self.model_dim, self.ff_dim, self.num_heads, self.num_layers) < 1:
            raise ValueError("transformer dimensions must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_lstm_params(cfg: LstmConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    h = cfg.hidden_size
    for layer in range(cfg.num_layers):
        fan_in = cfg.n_features if layer == 0 else h
        params[f"l{layer}.wx"] = Tensor(_uniform(rng, (fan_in, 4 * h), fan_in), requires_grad=True)
        params[f"l{layer}.wh"] = Tensor(_uniform(rng, (h, 4 * h), h), requires_grad=True)
        # positive forget-gate bias: retention starts near sigmoid(2)~0.88 so
        # gradients reach tokens tens of steps back from the first epoch
        b = np.zeros(4 * h)
        b[h : 2 * h] = 2.0
        params[f"l{layer}.b"] = Tensor(b, requires_grad=True)
    params["head.w"] = Tensor(_uniform(rng, (h, 1), h), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(1), requires_grad=True)
    return params


def init_transformer_params(cfg: TransformerConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    d, ff = cfg.model_dim, cfg.ff_dim
    params["embed.w"] = Tensor(_uniform(rng, (cfg.n_features, d), cfg.n_features), requires_grad=True)
    params["embed.b"] = Tensor(np.zeros(d), requires_grad=True)
    params["pos"] = Tensor(_uniform(rng, (cfg.max_positions, d), d), requires_grad=True)
    for layer in range(cfg.num_layers):
        p = f"l{layer}."
        params[p + "ln1.g"] = Tensor(np.ones(d), requires_grad=True)
        params[p + "ln1.b"] = Tensor(np.zeros(d), requires_grad=True)
        params[p + "attn.wqkv"] = Tensor(_uniform(rng, (d, 3 * d), d), requires_grad=True)
        params[p + "attn.bqkv"] = Tensor(np.zeros(3 * d), requires_grad=True)
        params[p + "attn.wo"] = Tensor(_uniform(rng, (d, d), d), requires_grad=True)
        params[p + "attn.bo"] = Tensor(np.zeros(d), requires_grad=True)
        params[p + "ln2.g"] = Tensor(np.ones(d), requires_grad=True)
        params[p + "ln2.b"] = Tensor(np.zeros(d), requires_grad=True)
        params[p + "ff.w1"] = Tensor(_uniform(rng, (d, ff), d), requires_grad=True)
        params[p + "ff.b1"] = Tensor(np.zeros(ff), requires_grad=True)
        params[p + "ff.w2"] = Tensor(_uniform(rng, (ff, d), ff), requires_grad=True)
        params[p + "ff.b2"] = Tensor(np.zeros(d), requires_grad=True)
    params["lnf.g"] = Tensor(np.ones(d), requires_grad=True)
    params["lnf.b"] = Tensor(np.zeros(d), requires_grad=True)
    params["head.w"] = Tensor(_uniform(rng, (d, 1), d), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(1), requires_grad=True)
    return params


def param_count(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


def _dropout(t: Tensor, rate: float, train_mode: bool, rng: np.random.Generator | None) -> Tensor:
    if not train_mode or rate <= 0.0:
        return t
    if rng is None:
        raise ValueError("train-mode dropout needs an RNG")
    mask = (rng.random(t.shape) >= rate) / (1.0 - rate)
    return t * Tensor(mask)


# ------------------------------------------------------------------ LSTM


def lstm_cell_step(x, h, c, params: dict[str, Tensor], layer: int = 0):
    """One LSTM cell update.  Accepts (F,)/(H,) vectors or (B, .) batches.

    Returns (h', c').  Gate order i|f|g|o; biases start at zero so an
    all-zero parameter set maps anything to (0, 0).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    h = h if isinstance(h, Tensor) else Tensor(h)
    c = c if isinstance(c, Tensor) else Tensor(c)
    squeeze = x.ndim == 1
    if squeeze:
        x, h, c = x.reshape(1, -1), h.reshape(1, -1), c.reshape(1, -1)
    hidden = h.shape[-1]
    z = x @ params[f"l{layer}.wx"] + h @ params[f"l{layer}.wh"] + params[f"l{layer}.b"]
    i = gk.sigmoid(z[:, :hidden])
    f = gk.sigmoid(z[:, hidden : 2 * hidden])
    g = gk.tanh(z[:, 2 * hidden : 3 * hidden])
    o = gk.sigmoid(z[:, 3 * hidden :])
    c2 = f * c + i * g
    h2 = o * gk.tanh(c2)
    if squeeze:
        return h2.reshape(-1), c2.reshape(-1)
    return h2, c2


def lstm_forward_batch(
    windows: np.ndarray,
    params: dict[str, Tensor],
    cfg: LstmConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(B, T, F) windows -> (B,) predictions."""
    windows = np.asarray(windows, dtype=np.float64)
    batch, steps, _ = windows.shape
    h_seq: list[Tensor] = [Tensor(windows[:, t, :]) for t in range(steps)]
    for layer in range(cfg.num_layers):
        h = Tensor(np.zeros((batch, cfg.hidden_size)))
        c = Tensor(np.zeros((batch, cfg.hidden_size)))
        out_seq: list[Tensor] = []
        for t in range(steps):
            h, c = lstm_cell_step(h_seq[t], h, c, params, layer=layer)
            out_seq.append(h)
        # inter-layer dropout only (none after the top layer)
        if layer < cfg.num_layers - 1 and train_mode and cfg.dropout > 0.0:
            if rng is None:
                raise ValueError("train-mode dropout needs an RNG")
            mask = (rng.random((batch, steps, cfg.hidden_size)) >= cfg.dropout) / (
                1.0 - cfg.dropout
            )
            out_seq = [out_seq[t] * Tensor(mask[:, t, :]) for t in range(steps)]
        h_seq = out_seq
    pred = h_seq[-1] @ params["head.w"] + params["head.b"]
    return pred.reshape(-1)


def lstm_forward(
    window: np.ndarray,
    params: dict[str, Tensor],
    cfg: LstmConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(T, F) window -> scalar prediction."""
    out = lstm_forward_batch(np.asarray(window)[None, :, :], params, cfg, train_mode, rng)
    return out.reshape(())


# ------------------------------------------------------------- transformer


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * gk.power(var + eps, -0.5) * gain + bias


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    # tanh approximation, composed from kernel primitives
    return 0.5 * x * (gk.tanh((x + 0.044715 * gk.power(x, 3.0)) * _GELU_C) + 1.0)


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """Scaled dot-product attention over (..., T, head_dim) tensors."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = (q @ k.transpose(axes)) * scale
    weights = gk.softmax(scores, causal=causal)
    return weights @ v


def attention_weights(q: Tensor, k: Tensor, causal: bool = False) -> Tensor:
    scale = 1.0 / np.sqrt(q.shape[-1])
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    return gk.softmax((q @ k.transpose(axes)) * scale, causal=causal)


def _split_heads(t: Tensor, num_heads: int) -> Tensor:
    b, s, d = t.shape
    return t.reshape(b, s, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(t: Tensor) -> Tensor:
    b, heads, s, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, s, heads * dh)


def transformer_states(
    windows: np.ndarray,
    params: dict[str, Tensor],
    cfg: TransformerConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    return_layers: bool = False,
):
    """(B, T, F) windows -> (B, T, D) final-norm states.

    With return_layers=True also returns the residual-stream state after
    each block (useful for causality checks).
    """
    windows = np.asarray(windows, dtype=np.float64)
    _, steps, _ = windows.shape
    if steps > cfg.max_positions:
        raise ValueError(f"sequence length {steps} exceeds max_positions {cfg.max_positions}")
    h = Tensor(windows) @ params["embed.w"] + params["embed.b"] + params["pos"][:steps]
    h = _dropout(h, cfg.dropout, train_mode, rng)
    layers: list[Tensor] = []
    for layer in range(cfg.num_layers):
        p = f"l{layer}."
        normed = layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"])
        qkv = normed @ params[p + "attn.wqkv"] + params[p + "attn.bqkv"]
        d = cfg.model_dim
        q = _split_heads(qkv[:, :, :d], cfg.num_heads)
        k = _split_heads(qkv[:, :, d : 2 * d], cfg.num_heads)
        v = _split_heads(qkv[:, :, 2 * d :], cfg.num_heads)
        ctx = _merge_heads(attention(q, k, v, causal=True))
        proj = ctx @ params[p + "attn.wo"] + params[p + "attn.bo"]
        h = h + _dropout(proj, cfg.dropout, train_mode, rng)
        normed2 = layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"])
        ff = gelu(normed2 @ params[p + "ff.w1"] + params[p + "ff.b1"]) @ params[p + "ff.w2"] + params[p + "ff.b2"]
        h = h + _dropout(ff, cfg.dropout, train_mode, rng)
        if return_layers:
            layers.append(h)
    final = layer_norm(h, params["lnf.g"], params["lnf.b"])
    if return_layers:
        return final, layers
    return final


def transformer_forward_batch(
    windows: np.ndarray,
    params: dict[str, Tensor],
    cfg: TransformerConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(B, T, F) windows -> (B,) predictions read at the last position."""
    states = transformer_states(windows, params, cfg, train_mode, rng)
    pred = states[:, -1, :] @ params["head.w"] + params["head.b"]
    return pred.reshape(-1)


def transformer_positionwise(
    window: np.ndarray,
    params: dict[str, Tensor],
    cfg: TransformerConfig,
) -> Tensor:
    """(T, F) window -> (T,) per-position predictions (eval mode).

    Position t sees only rows <= t, so entry t is the prediction the model
    would emit with the window truncated at t.
    """
    states = transformer_states(np.asarray(window)[None, :, :], params, cfg)
    pred = states[0] @ params["head.w"] + params["head.b"]
    return pred.reshape(-1)


def transformer_forward(
    window: np.ndarray,
    params: dict[str, Tensor],
    cfg: TransformerConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(T, F) window -> scalar prediction."""
    out = transformer_forward_batch(np.asarray(window)[None, :, :], params, cfg, train_mode, rng)
    return out.reshape(())


# ------------------------------------------------------------------ facade


MODEL_KINDS = ("lstm", "gpt2")


@dataclass
class Model:
    """A model kind, its config, and its parameters, behind one predict call."""

    kind: str
    config: LstmConfig | TransformerConfig
    params: dict[str, Tensor]

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")

    @classmethod
    def create(cls, kind: str, config, rng: np.random.Generator) -> "Model":
        if kind == "lstm":
            return cls(kind, config, init_lstm_params(config, rng))
        if kind == "gpt2":
            return cls(kind, config, init_transformer_params(config, rng))
        raise ValueError(f"unknown model kind {kind!r}")

    def forward_batch(
        self,
        windows: np.ndarray,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        if self.kind == "lstm":
            return lstm_forward_batch(windows, self.params, self.config, train_mode, rng)
        return transformer_forward_batch(windows, self.params, self.config, train_mode, rng)

    def predict(self, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode predictions as a plain array, chunked to bound memory."""
        windows = np.asarray(windows, dtype=np.float64)
        out = np.empty(windows.shape[0])
        with gk.no_grad():
            for lo in range(0, windows.shape[0], batch_size):
                hi = min(lo + batch_size, windows.shape[0])
                out[lo:hi] = self.forward_batch(windows[lo:hi]).data
        return out

    def iter_params(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())
