"""Transformer encoder/decoder with Bayesian positionwise feed-forward blocks.

The encoder ingests feature frames through a small convolutional frontend
(4x time reduction), adds sinusoidal position information, and stacks
self-attention + Bayesian feed-forward sublayers. The decoder runs causal
self-attention, cross-attention over the encoder memory, and the same
Bayesian feed-forward block. Every sublayer is wrapped in a residual
connection followed by layer normalization (post-norm).

All forward passes take a ``mode``: ``"sample"`` draws fresh activation
noise in every Bayesian block and records KL terms on the model's
accumulator; ``"mean"`` is the deterministic posterior-mean pass.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bayes_linear import GaussianVariationalLayer, KlAccumulator
from .errors import ConfigError, ContractError, ShapeError

MODES = ("sample", "mean")
PE_EXPONENTS = ("linear", "power2")


def _check_mode(mode, rng):
    if mode not in MODES:
        raise ContractError(f"unknown forward mode {mode!r}, expected one of {MODES}")
    if mode == "sample" and rng is None:
        raise ContractError("sample mode requires an rng")


@dataclass
class ModelConfig:
    """All model hyperparameters. Defaults are the full-scale configuration;
    ``desk_scale`` gives a configuration small enough to train in minutes."""

    vocab_size: int
    feature_dim: int = 80
    d_model: int = 512
    d_ff: int = 2148
    n_heads: int = 8
    n_encoder_layers: int = 12
    n_decoder_layers: int = 6
    max_positions: int = 512
    conv_channels: int = 32
    rho_init: float = -5.0
    sos_id: int = 1
    kl_mode: str = "standard"
    pe_exponent: str = "linear"

    def __post_init__(self):
        positive = {
            "vocab_size": self.vocab_size,
            "feature_dim": self.feature_dim,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "n_heads": self.n_heads,
            "n_encoder_layers": self.n_encoder_layers,
            "n_decoder_layers": self.n_decoder_layers,
            "max_positions": self.max_positions,
            "conv_channels": self.conv_channels,
        }
        for name, value in positive.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.pe_exponent not in PE_EXPONENTS:
            raise ConfigError(f"pe_exponent must be one of {PE_EXPONENTS}")

    @classmethod
    def desk_scale(cls, vocab_size, feature_dim=16, **overrides):
        defaults = dict(
            d_model=64,
            d_ff=128,
            n_heads=4,
            n_encoder_layers=2,
            n_decoder_layers=2,
            max_positions=256,
            conv_channels=8,
        )
        defaults.update(overrides)
        return cls(vocab_size=vocab_size, feature_dim=feature_dim, **defaults)


# ---------------------------------------------------------------------------
# positional encoding


def positional_encoding(pos, i, d_model, exponent="linear"):
    """Single sinusoidal table entry.

    The first half of the dimensions are sines and the second half cosines,
    both over the frequency ladder pos / 10000^(2*i'/d_model) where i'
    indexes within its half. ``exponent="power2"`` replaces 2*i' with 2^i'
    (an alternative reading kept behind this flag; it explodes for large i').
    """
    if not 0 <= i < d_model:
        raise ContractError(f"dimension index {i} out of range [0, {d_model})")
    half = (d_model + 1) // 2
    if i < half:
        idx, fn = i, math.sin
    else:
        idx, fn = i - half, math.cos
    if exponent == "linear":
        e = 2.0 * idx / d_model
    elif exponent == "power2":
        e = (2.0**idx) / d_model
    else:
        raise ContractError(f"pe exponent must be one of {PE_EXPONENTS}")
    return fn(pos / (10000.0**e))


def build_positional_table(max_len, d_model, exponent="linear"):
    """Precomputed [max_len, d_model] table of positional encodings."""
    half = (d_model + 1) // 2
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx_sin = np.arange(half, dtype=np.float64)
    idx_cos = np.arange(d_model - half, dtype=np.float64)
    if exponent == "linear":
        e_sin, e_cos = 2.0 * idx_sin / d_model, 2.0 * idx_cos / d_model
    elif exponent == "power2":
        e_sin, e_cos = (2.0**idx_sin) / d_model, (2.0**idx_cos) / d_model
    else:
        raise ContractError(f"pe exponent must be one of {PE_EXPONENTS}")
    table = np.empty((max_len, d_model), dtype=np.float64)
    table[:, :half] = np.sin(pos / (10000.0**e_sin))
    table[:, half:] = np.cos(pos / (10000.0**e_cos))
    return table


# ---------------------------------------------------------------------------
# attention


def scaled_dot_attention(q, k, v, mask=None):
    """softmax(Q K^T / sqrt(d_k) + mask bias) V.

    ``mask`` is a boolean [m, n] array; True marks positions that may be
    attended, False positions receive a -1e9 bias before the softmax.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("attention expects 2-d Q, K, V")
    if q.data.shape[1] != k.data.shape[1]:
        raise ShapeError(
            f"attention: Q {q.data.shape} and K {k.data.shape} widths disagree"
        )
    if k.data.shape[0] != v.data.shape[0]:
        raise ShapeError(
            f"attention: K {k.data.shape} and V {v.data.shape} row counts disagree"
        )
    d_k = q.data.shape[1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.data.shape[0], k.data.shape[0]):
            raise ShapeError(
                f"attention mask {mask.shape} does not match scores "
                f"({q.data.shape[0]}, {k.data.shape[0]})"
            )
        scores = ad.add(scores, ad.constant(np.where(mask, 0.0, -1e9)))
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v)


class MultiHeadAttention:
    """Per-head linear projections feeding scaled dot-product attention,
    concatenated and projected back to d_model."""

    def __init__(self, d_model, n_heads, rng):
        if d_model % n_heads != 0:
            raise ConfigError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        bound = 1.0 / math.sqrt(d_model)
        self.heads = []
        for _ in range(n_heads):
            self.heads.append(
                tuple(
                    Tensor(rng.uniform(-bound, bound, (d_model, self.d_head)), op="param")
                    for _ in range(3)
                )
            )
        self.w_o = Tensor(rng.uniform(-bound, bound, (d_model, d_model)), op="param")

    def forward(self, q_in, k_in, v_in, mask=None):
        outs = []
        for w_q, w_k, w_v in self.heads:
            outs.append(
                scaled_dot_attention(
                    ad.matmul(q_in, w_q),
                    ad.matmul(k_in, w_k),
                    ad.matmul(v_in, w_v),
                    mask=mask,
                )
            )
        return ad.matmul(ad.concat_cols(outs), self.w_o)

    def named_parameters(self):
        out = []
        for h, (w_q, w_k, w_v) in enumerate(self.heads):
            out += [(f"head{h}.w_q", w_q), (f"head{h}.w_k", w_k), (f"head{h}.w_v", w_v)]
        out.append(("w_o", self.w_o))
        return out


# ---------------------------------------------------------------------------
# Bayesian positionwise feed-forward block


class BayesianFeedForward:
    """Positionwise two-layer block: a Bayesian linear layer (d_model->d_ff)
    with activation-space sampling, relu, then a deterministic linear layer
    back to d_model. No dropout anywhere in the block."""

    def __init__(self, d_model, d_ff, rng, accumulator, rho_init=-5.0, kl_mode="standard"):
        self.bayes = GaussianVariationalLayer(
            d_model, d_ff, rng, rho_init=rho_init, accumulator=accumulator, kl_mode=kl_mode
        )
        bound = 1.0 / math.sqrt(d_ff)
        self.out_w = Tensor(rng.uniform(-bound, bound, (d_ff, d_model)), op="param")
        self.out_b = Tensor(np.zeros(d_model), op="param")

    def forward(self, x, rng=None, mode="sample"):
        _check_mode(mode, rng)
        if mode == "sample":
            h = self.bayes.forward_lrt(x, rng)
        else:
            h = self.bayes.forward_deterministic(x)
        return ad.add_bias(ad.matmul(ad.relu(h), self.out_w), self.out_b)

    def named_parameters(self):
        out = [("bayes." + n, p) for n, p in self.bayes.named_parameters()]
        out += [("out.w", self.out_w), ("out.b", self.out_b)]
        return out


# ---------------------------------------------------------------------------
# convolutional frontend


class ConvFrontend:
    """Two strided 3x3 conv blocks with relu, then a linear map to d_model.

    Each block halves the time axis (floor division), for a total 4x
    reduction; the frequency axis is preserved and folded into channels
    before the projection.
    """

    def __init__(self, feature_dim, d_model, channels, rng):
        self.feature_dim = feature_dim
        self.channels = channels
        k_bound1 = 1.0 / math.sqrt(9.0)
        k_bound2 = 1.0 / math.sqrt(9.0 * channels)
        self.conv1_w = Tensor(rng.uniform(-k_bound1, k_bound1, (channels, 1, 3, 3)), op="param")
        self.conv1_b = Tensor(np.zeros(channels), op="param")
        self.conv2_w = Tensor(
            rng.uniform(-k_bound2, k_bound2, (channels, channels, 3, 3)), op="param"
        )
        self.conv2_b = Tensor(np.zeros(channels), op="param")
        p_bound = 1.0 / math.sqrt(channels * feature_dim)
        self.proj_w = Tensor(
            rng.uniform(-p_bound, p_bound, (channels * feature_dim, d_model)), op="param"
        )
        self.proj_b = Tensor(np.zeros(d_model), op="param")

    def forward(self, feats):
        if feats.data.ndim != 2 or feats.data.shape[1] != self.feature_dim:
            raise ShapeError(
                f"frontend: expected [T, {self.feature_dim}] features, got {feats.data.shape}"
            )
        t_len = feats.data.shape[0]
        if t_len < 4:
            raise ContractError(f"frontend: need at least 4 frames, got {t_len}")
        x = ad.reshape(feats, (1, t_len, self.feature_dim))
        h = ad.relu(ad.conv3x3(x, self.conv1_w, self.conv1_b))
        h = ad.relu(ad.conv3x3(h, self.conv2_w, self.conv2_b))
        t_out = t_len // 4
        h = ad.reshape(ad.transpose(h, (1, 0, 2)), (t_out, self.channels * self.feature_dim))
        return ad.add_bias(ad.matmul(h, self.proj_w), self.proj_b)

    def named_parameters(self):
        return [
            ("conv1.w", self.conv1_w),
            ("conv1.b", self.conv1_b),
            ("conv2.w", self.conv2_w),
            ("conv2.b", self.conv2_b),
            ("proj.w", self.proj_w),
            ("proj.b", self.proj_b),
        ]


# ---------------------------------------------------------------------------
# encoder / decoder layers


class _NormParams:
    def __init__(self, d_model):
        self.gain = Tensor(np.ones(d_model), op="param")
        self.bias = Tensor(np.zeros(d_model), op="param")

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)

    def named_parameters(self):
        return [("gain", self.gain), ("bias", self.bias)]


class EncoderLayer:
    def __init__(self, config, rng, accumulator):
        self.self_attn = MultiHeadAttention(config.d_model, config.n_heads, rng)
        self.ffn = BayesianFeedForward(
            config.d_model,
            config.d_ff,
            rng,
            accumulator,
            rho_init=config.rho_init,
            kl_mode=config.kl_mode,
        )
        self.norm1 = _NormParams(config.d_model)
        self.norm2 = _NormParams(config.d_model)

    def forward(self, x, rng=None, mode="sample"):
        x = self.norm1(ad.add(x, self.self_attn.forward(x, x, x)))
        return self.norm2(ad.add(x, self.ffn.forward(x, rng, mode)))

    def named_parameters(self):
        out = [("self_attn." + n, p) for n, p in self.self_attn.named_parameters()]
        out += [("ffn." + n, p) for n, p in self.ffn.named_parameters()]
        out += [("norm1." + n, p) for n, p in self.norm1.named_parameters()]
        out += [("norm2." + n, p) for n, p in self.norm2.named_parameters()]
        return out


class DecoderLayer:
    def __init__(self, config, rng, accumulator):
        self.self_attn = MultiHeadAttention(config.d_model, config.n_heads, rng)
        self.cross_attn = MultiHeadAttention(config.d_model, config.n_heads, rng)
        self.ffn = BayesianFeedForward(
            config.d_model,
            config.d_ff,
            rng,
            accumulator,
            rho_init=config.rho_init,
            kl_mode=config.kl_mode,
        )
        self.norm1 = _NormParams(config.d_model)
        self.norm2 = _NormParams(config.d_model)
        self.norm3 = _NormParams(config.d_model)

    def forward(self, x, memory, rng=None, mode="sample"):
        length = x.data.shape[0]
        causal = np.tril(np.ones((length, length), dtype=bool))
        x = self.norm1(ad.add(x, self.self_attn.forward(x, x, x, mask=causal)))
        x = self.norm2(ad.add(x, self.cross_attn.forward(x, memory, memory)))
        return self.norm3(ad.add(x, self.ffn.forward(x, rng, mode)))

    def named_parameters(self):
        out = [("self_attn." + n, p) for n, p in self.self_attn.named_parameters()]
        out += [("cross_attn." + n, p) for n, p in self.cross_attn.named_parameters()]
        out += [("ffn." + n, p) for n, p in self.ffn.named_parameters()]
        for i, norm in ((1, self.norm1), (2, self.norm2), (3, self.norm3)):
            out += [(f"norm{i}." + n, p) for n, p in norm.named_parameters()]
        return out


# ---------------------------------------------------------------------------
# full model


class VariationalTransformer:
    """Encoder/decoder transducer over feature frames and token sequences.

    ``encode`` maps [T, F] features to a [T//4, d_model] memory;
    ``decode_forward`` maps a token prefix (starting with the
    start-of-sequence id) plus the memory to next-token logits; the CTC head
    projects the memory to per-frame log-probabilities with the blank as the
    last class.
    """

    def __init__(self, config, rng):
        self.config = config
        self.kl_accumulator = KlAccumulator()
        d = config.d_model
        self.frontend = ConvFrontend(config.feature_dim, d, config.conv_channels, rng)
        self.pe = build_positional_table(config.max_positions, d, config.pe_exponent)
        self.embedding = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(d), (config.vocab_size, d)), op="param"
        )
        self.encoder_layers = [
            EncoderLayer(config, rng, self.kl_accumulator)
            for _ in range(config.n_encoder_layers)
        ]
        self.decoder_layers = [
            DecoderLayer(config, rng, self.kl_accumulator)
            for _ in range(config.n_decoder_layers)
        ]
        bound = 1.0 / math.sqrt(d)
        self.out_w = Tensor(rng.uniform(-bound, bound, (d, config.vocab_size)), op="param")
        self.out_b = Tensor(np.zeros(config.vocab_size), op="param")
        self.ctc_w = Tensor(rng.uniform(-bound, bound, (d, config.vocab_size)), op="param")
        self.ctc_b = Tensor(np.zeros(config.vocab_size), op="param")

    def encode(self, features, rng=None, mode="sample"):
        _check_mode(mode, rng)
        x = self.frontend.forward(features)
        t_out = x.data.shape[0]
        if t_out > self.config.max_positions:
            raise ContractError(
                f"sequence of {t_out} frames exceeds max_positions="
                f"{self.config.max_positions}"
            )
        x = ad.add(x, ad.constant(self.pe[:t_out]))
        for layer in self.encoder_layers:
            x = layer.forward(x, rng, mode)
        return x

    def decode_forward(self, memory, prefix, rng=None, mode="sample"):
        _check_mode(mode, rng)
        if len(prefix) == 0:
            raise ContractError("decoder prefix is empty")
        if prefix[0] != self.config.sos_id:
            raise ContractError(
                f"decoder prefix must begin with the start-of-sequence id "
                f"{self.config.sos_id}, got {prefix[0]}"
            )
        length = len(prefix)
        if length > self.config.max_positions:
            raise ContractError(
                f"prefix of {length} tokens exceeds max_positions="
                f"{self.config.max_positions}"
            )
        ids = np.asarray(prefix, dtype=np.int64)
        x = ad.scale(ad.embed(self.embedding, ids), math.sqrt(self.config.d_model))
        x = ad.add(x, ad.constant(self.pe[:length]))
        for layer in self.decoder_layers:
            x = layer.forward(x, memory, rng, mode)
        return ad.add_bias(ad.matmul(x, self.out_w), self.out_b)

    def ctc_log_probs(self, memory):
        """Per-frame vocabulary log-distributions from the encoder memory."""
        logits = ad.add_bias(ad.matmul(memory, self.ctc_w), self.ctc_b)
        return ad.log_softmax(logits, axis=-1)

    def bayesian_layers(self):
        for layer in self.encoder_layers + self.decoder_layers:
            yield layer.ffn.bayes

    def named_parameters(self):
        out = [("frontend." + n, p) for n, p in self.frontend.named_parameters()]
        out.append(("embedding", self.embedding))
        for i, layer in enumerate(self.encoder_layers):
            out += [(f"encoder.{i}." + n, p) for n, p in layer.named_parameters()]
        for i, layer in enumerate(self.decoder_layers):
            out += [(f"decoder.{i}." + n, p) for n, p in layer.named_parameters()]
        out += [
            ("out.w", self.out_w),
            ("out.b", self.out_b),
            ("ctc.w", self.ctc_w),
            ("ctc.b", self.ctc_b),
        ]
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]
