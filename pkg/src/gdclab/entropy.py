"""Quantization, discretized-Gaussian rate estimates, and the glue between
learned entropy parameters and the range coder.

Rates are measured against the discretized Gaussian

    p(v) = Phi((v - mu + 1/2) / sigma) - Phi((v - mu - 1/2) / sigma)

with p floored at 2^-16 so no element can cost more than 16 bits, and
scales floored at SCALE_MIN.  The same mean/scale arrays drive the actual
coder: they are turned into strictly increasing 2^16-grid CDF tables over
an integer support, with one trailing escape bin.  Values outside the
support are sent as the escape symbol followed by four raw bytes (zigzag),
so the coder is total even when the model support is misjudged.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

from . import tensor as T
from .errors import ContractError, NumericError, ShapeError
from .rangecoder import CDF_TOTAL, RangeDecoder, RangeEncoder

SCALE_MIN = 0.11
PROB_FLOOR = 2.0 ** -16
_INV_SQRT2 = 1.0 / np.sqrt(2.0)

_BYTE_CDF = np.arange(257, dtype=np.int64) * (CDF_TOTAL // 256)


def round_away(x):
    """Round half away from zero (2.5 -> 3, -2.5 -> -3), elementwise."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize(t, mode, rng=None):
    """Quantize a tensor for training ('noise') or coding ('round').

    Noise mode adds U[-0.5, 0.5) drawn from ``rng`` and passes gradients
    through unchanged; round mode rounds half away from zero (gradients
    also pass straight through, though training only uses noise mode).
    """
    if mode == "noise":
        if rng is None:
            raise ContractError("noise quantization needs an rng")
        n = rng.uniform(-0.5, 0.5, size=t.shape).astype(t.data.dtype)
        out = t.data + n
    elif mode == "round":
        out = round_away(t.data)
    else:
        raise ContractError(f"unknown quantization mode {mode!r}")

    def bwd(g):
        t._accum(g)

    return T._node(out, (t,), bwd, f"quantize-{mode}")


def gaussian_bits(values, mean, scale):
    """Per-element rate estimate in bits as a graph tensor.

    All three arguments are tensors of one shape; ``scale`` must respect
    SCALE_MIN.  Differentiable w.r.t. every argument; clamped elements
    (those at the 16-bit ceiling) pass no gradient.
    """
    if values.shape != mean.shape or values.shape != scale.shape:
        raise ShapeError(f"gaussian_bits: shapes differ {values.shape} {mean.shape} {scale.shape}")
    if not np.all(np.isfinite(mean.data)) or not np.all(np.isfinite(scale.data)):
        raise NumericError("gaussian_bits: non-finite entropy parameters")
    if np.any(scale.data < SCALE_MIN * (1.0 - 1e-6)):
        raise ContractError(f"gaussian_bits: scale below SCALE_MIN={SCALE_MIN}")
    centered = T.sub(values, mean)
    hi = T.div(T.add_scalar(centered, 0.5), scale)
    lo = T.div(T.add_scalar(centered, -0.5), scale)
    p = T.sub(T.normal_cdf(hi), T.normal_cdf(lo))
    return T.neg(T.log2(T.clamp_min(p, PROB_FLOOR)))


def scale_from_raw(raw):
    """Map an unconstrained tensor to a valid scale: SCALE_MIN + softplus."""
    return T.add_scalar(T.softplus(raw), SCALE_MIN)


def _interval_probs(mean, scale, lo, hi):
    """Probabilities of integer bins lo..hi (inclusive) for each element.

    mean/scale are flat float arrays of length n; returns (n, hi-lo+1).
    """
    edges = np.arange(lo, hi + 2, dtype=np.float64) - 0.5
    z = (edges[None, :] - mean[:, None]) / scale[:, None]
    cdf = 0.5 * (1.0 + _erf(z * _INV_SQRT2))
    return np.diff(cdf, axis=1)


def build_cdfs(mean, scale, lo, hi):
    """Quantized coder tables for integer support [lo, hi] plus escape.

    Returns an int64 array of shape (n, hi-lo+3): n cumulative tables whose
    bins are all >= 1 and sum exactly to 2^16.  The final bin is the escape
    symbol.  Tables are a deterministic function of (mean, scale, lo, hi),
    which is what makes encoder and decoder agree bit for bit.
    """
    if hi < lo:
        raise ContractError(f"empty support [{lo}, {hi}]")
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    scale = np.asarray(scale, dtype=np.float64).reshape(-1)
    probs = _interval_probs(mean, scale, lo, hi)
    nbins = probs.shape[1] + 1  # + escape
    if nbins > CDF_TOTAL:
        raise ContractError(f"support of {nbins} bins cannot fit a 16-bit cdf")
    budget = CDF_TOTAL - nbins  # every bin gets a guaranteed single count
    p = np.concatenate([probs, np.zeros((probs.shape[0], 1))], axis=1)
    p = np.clip(p, 0.0, None)
    norm = p.sum(axis=1, keepdims=True)
    norm[norm == 0.0] = 1.0
    ideal = p / norm * budget
    base = np.floor(ideal).astype(np.int64)
    short = budget - base.sum(axis=1)
    # largest-remainder rounding, ties broken by bin index (deterministic)
    rem = ideal - base
    order = np.argsort(-rem, axis=1, kind="stable")
    ranks = np.argsort(order, axis=1, kind="stable")
    base += ranks < short[:, None]
    freqs = base + 1
    cdfs = np.zeros((freqs.shape[0], nbins + 1), dtype=np.int64)
    np.cumsum(freqs, axis=1, out=cdfs[:, 1:])
    return cdfs


def _zigzag(v):
    v = int(v)
    return (v << 1) ^ (v >> 63) if v < 0 else (v << 1)


def _unzigzag(u):
    return (u >> 1) ^ -(u & 1)


def _encode_value(enc, value, lo, hi, cdf):
    """One element: in-support symbol, or escape + 4 raw zigzag bytes."""
    if lo <= value <= hi:
        enc.encode(int(value - lo), cdf)
    else:
        enc.encode(len(cdf) - 2, cdf)  # escape bin
        u = _zigzag(value)
        if u >= 1 << 32:
            raise ContractError(f"value {value} too large for escape coding")
        for shift in (24, 16, 8, 0):
            enc.encode((u >> shift) & 0xFF, _BYTE_CDF)


def _decode_value(dec, lo, hi, cdf):
    sym = dec.decode(cdf)
    if sym < len(cdf) - 2:
        return lo + sym
    u = 0
    for _ in range(4):
        u = (u << 8) | dec.decode(_BYTE_CDF)
    return _unzigzag(u)


def encode_gaussian(values, mean, scale, support=None):
    """Range-code integer ``values`` under per-element Gaussians.

    Arrays are flattened in C order.  Returns (payload_bytes, (lo, hi)).
    ``support`` defaults to the observed value range and must be supplied
    to the decoder (the container stores it next to the payload).
    """
    values = np.asarray(values)
    flat = values.reshape(-1).astype(np.int64)
    if support is None:
        lo = int(flat.min()) if flat.size else 0
        hi = int(flat.max()) if flat.size else 0
    else:
        lo, hi = int(support[0]), int(support[1])
    cdfs = build_cdfs(mean, scale, lo, hi)
    if cdfs.shape[0] != flat.size:
        raise ShapeError(f"{flat.size} values but {cdfs.shape[0]} parameter sets")
    enc = RangeEncoder()
    for i, v in enumerate(flat):
        _encode_value(enc, v, lo, hi, cdfs[i])
    return enc.finish(), (lo, hi)


def decode_gaussian(payload, mean, scale, support, count):
    """Inverse of encode_gaussian; returns a flat int64 array."""
    lo, hi = int(support[0]), int(support[1])
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    if mean.size != count:
        raise ShapeError(f"count {count} != {mean.size} parameter sets")
    cdfs = build_cdfs(mean, scale, lo, hi)
    dec = RangeDecoder(payload)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        out[i] = _decode_value(dec, lo, hi, cdfs[i])
    return out


def context_params(ctx_net, z_hat_data, dtype):
    """Run the causal context net over a (1, C, H, W) integer-valued array
    and return float mean / scale arrays of the same shape."""
    zt = T.Tensor(np.ascontiguousarray(z_hat_data, dtype=dtype))
    out = ctx_net(zt)
    c = z_hat_data.shape[1]
    mean = out.data[:, :c]
    scale_raw = out.data[:, c:]
    scale = np.logaddexp(0.0, scale_raw).astype(scale_raw.dtype) + scale_raw.dtype.type(SCALE_MIN)
    return mean, scale


def encode_context(z_hat, ctx_net, support=None):
    """Encode an integer hyper-latent autoregressively.

    The context net sees the full tensor in one pass (its masks make each
    output position a function of strictly earlier positions only), so the
    encoder is one forward pass plus a raster scan in the decoder's order:
    positions in raster order, channels within a position.  Returns
    (payload, (lo, hi)).
    """
    z = np.asarray(z_hat)
    dtype = np.float32 if z.dtype != np.float64 else np.float64
    with T.no_grad():
        mean, scale = context_params(ctx_net, z, dtype)
    # reorder (c, h, w) -> (h, w, c) so the stream matches sequential decoding
    flat = z[0].transpose(1, 2, 0).reshape(-1).astype(np.int64)
    mean_f = mean[0].transpose(1, 2, 0).reshape(-1)
    scale_f = scale[0].transpose(1, 2, 0).reshape(-1)
    if support is None:
        lo = int(flat.min()) if flat.size else 0
        hi = int(flat.max()) if flat.size else 0
    else:
        lo, hi = int(support[0]), int(support[1])
    cdfs = build_cdfs(mean_f, scale_f, lo, hi)
    enc = RangeEncoder()
    for i, v in enumerate(flat):
        _encode_value(enc, v, lo, hi, cdfs[i])
    return enc.finish(), (lo, hi)


def decode_context(payload, ctx_net, shape, support, dtype=np.float32):
    """Decode the hyper-latent by alternating context-net evaluations with
    symbol decoding in raster order (all channels of a position at once).

    The partially decoded tensor holds zeros at future positions; the mask
    structure guarantees those zeros cannot influence the parameters of the
    positions being decoded, so encoder and decoder compute bit-identical
    CDFs.
    """
    n, c, h, w = shape
    if n != 1:
        raise ContractError("context decoding runs on single-frame tensors")
    lo, hi = int(support[0]), int(support[1])
    z = np.zeros(shape, dtype=np.float64)
    dec = RangeDecoder(payload)
    for i in range(h):
        for j in range(w):
            with T.no_grad():
                mean, scale = context_params(ctx_net, z, dtype)
            m = mean[0, :, i, j].astype(np.float64)
            s = scale[0, :, i, j].astype(np.float64)
            cdfs = build_cdfs(m, s, lo, hi)
            for ch in range(c):
                z[0, ch, i, j] = _decode_value(dec, lo, hi, cdfs[ch])
    return z


def context_bits(z_hat_t, ctx_net):
    """Differentiable rate of a (possibly noise-quantized) hyper-latent
    under the context model; returns the per-element bits tensor."""
    out = ctx_net(z_hat_t)
    c = z_hat_t.shape[1]
    mean = T.slice_channels(out, 0, c)
    scale = scale_from_raw(T.slice_channels(out, c, 2 * c))
    return gaussian_bits(z_hat_t, mean, scale)


class FactorizedModel:
    """Per-channel Gaussian entropy model (no conditioning); the simplest
    member of the model family, useful as a baseline and in tests."""

    def __init__(self, params, prefix, channels):
        self.prefix = prefix
        self.channels = channels
        if f"{prefix}.mean" not in params:
            params.add(f"{prefix}.mean", np.zeros((1, channels, 1, 1)))
            params.add(f"{prefix}.scale_raw", np.zeros((1, channels, 1, 1)))
        self.params = params

    def bits(self, values_t):
        if values_t.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {values_t.shape[1]}")
        mean = T.broadcast_channels(self.params[f"{self.prefix}.mean"], values_t.shape)
        raw = T.broadcast_channels(self.params[f"{self.prefix}.scale_raw"], values_t.shape)
        return gaussian_bits(values_t, mean, scale_from_raw(raw))

    def coder_params(self, shape):
        mean = np.broadcast_to(self.params[f"{self.prefix}.mean"].data, shape)
        raw = np.broadcast_to(self.params[f"{self.prefix}.scale_raw"].data, shape)
        scale = np.logaddexp(0.0, raw) + SCALE_MIN
        return mean, scale
