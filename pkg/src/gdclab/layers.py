"""Neural building blocks: convolutions, GDN, PReLU, masked convolutions,
and declarative network specs with parameter stores.

Convolutions use "same"-style zero padding of (k-1)//2 so a stride-s layer
maps height H to ceil(H/s), and the transposed layer maps H to H*s; an
encoder followed by its mirrored decoder therefore restores the input size
whenever H and W are divisible by the total stride.  Weights are laid out
[out_ch, in_ch, k, k] for conv2d and [in_ch, out_ch, k, k] for tconv2d, so
the same array describes a map and its adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

GDN_BETA_MIN = 1e-6


# ---------------------------------------------------------------------------
# raw conv arithmetic (shared by forward and backward passes)
# ---------------------------------------------------------------------------

def _conv_fwd(x, w, stride, pad):
    n, c, h, ww = x.shape
    oc, ic, k, _ = w.shape
    if ic != c:
        raise ShapeError(f"conv: input has {c} channels, weight expects {ic}")
    oh = (h - 1) // stride + 1
    ow = (ww - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, oc, oh, ow), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            xs = xp[:, :, ki:ki + (oh - 1) * stride + 1:stride,
                    kj:kj + (ow - 1) * stride + 1:stride]
            # [oc,c] x [n,c,oh,ow] -> [oc,n,oh,ow]
            out += np.tensordot(w[:, :, ki, kj], xs, axes=([1], [1])).transpose(1, 0, 2, 3)
    return out


def _conv_bwd_x(g, w, stride, pad, x_shape):
    n, c, h, ww = x_shape
    oc, ic, k, _ = w.shape
    _, _, oh, ow = g.shape
    dxp = np.zeros((n, c, h + 2 * pad, ww + 2 * pad), dtype=g.dtype)
    for ki in range(k):
        for kj in range(k):
            # [n,oc,oh,ow] x [oc,c] -> [n,oh,ow,c]
            t = np.tensordot(g, w[:, :, ki, kj], axes=([1], [0])).transpose(0, 3, 1, 2)
            dxp[:, :, ki:ki + (oh - 1) * stride + 1:stride,
                kj:kj + (ow - 1) * stride + 1:stride] += t
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + ww]
    return dxp


def _conv_bwd_w(x, g, stride, pad, w_shape):
    oc, c, k, _ = w_shape
    _, _, oh, ow = g.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dw = np.zeros(w_shape, dtype=g.dtype)
    for ki in range(k):
        for kj in range(k):
            xs = xp[:, :, ki:ki + (oh - 1) * stride + 1:stride,
                    kj:kj + (ow - 1) * stride + 1:stride]
            dw[:, :, ki, kj] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
    return dw


# ---------------------------------------------------------------------------
# autodiff layer ops
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1):
    """2-D convolution, weight [out_ch, in_ch, k, k], bias (1, out_ch, 1, 1)."""
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: bad weight shape {weight.shape}")
    k = weight.shape[2]
    pad = (k - 1) // 2
    out = _conv_fwd(x.data, weight.data, stride, pad)
    if bias is not None:
        if bias.shape != (1, weight.shape[0], 1, 1):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != (1,{weight.shape[0]},1,1)")
        out += bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        if x.requires_grad:
            x._accum(_conv_bwd_x(g, weight.data, stride, pad, x.shape))
        if weight.requires_grad:
            weight._accum(_conv_bwd_w(x.data, g, stride, pad, weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)).reshape(bias.shape))

    return T._node(out, parents, bwd, "conv2d")


def tconv2d(x, weight, bias=None, stride=1):
    """Transposed convolution (adjoint of conv2d), weight [in_ch, out_ch, k, k].

    Output spatial size is exactly input * stride.
    """
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"tconv2d: bad weight shape {weight.shape}")
    ic, oc, k, _ = weight.shape
    if x.shape[1] != ic:
        raise ShapeError(f"tconv2d: input has {x.shape[1]} channels, weight expects {ic}")
    pad = (k - 1) // 2
    n, _, h, w_ = x.shape
    out_shape = (n, oc, h * stride, w_ * stride)
    out = _conv_bwd_x(x.data, weight.data, stride, pad, out_shape)
    if bias is not None:
        if bias.shape != (1, oc, 1, 1):
            raise ShapeError(f"tconv2d: bias shape {bias.shape} != (1,{oc},1,1)")
        out += bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        if x.requires_grad:
            x._accum(_conv_fwd(g, weight.data, stride, pad))
        if weight.requires_grad:
            weight._accum(_conv_bwd_w(g, x.data, stride, pad, weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)).reshape(bias.shape))

    return T._node(out, parents, bwd, "tconv2d")


def prelu(x, slope):
    """Channelwise parametric ReLU; slope has shape (1, C, 1, 1)."""
    if slope.shape != (1, x.shape[1], 1, 1):
        raise ShapeError(f"prelu: slope shape {slope.shape} != (1,{x.shape[1]},1,1)")
    pos = x.data >= 0
    out = np.where(pos, x.data, slope.data * x.data)

    def bwd(g):
        if x.requires_grad:
            x._accum(np.where(pos, g, slope.data * g))
        if slope.requires_grad:
            contrib = np.where(pos, 0.0, x.data * g)
            slope._accum(contrib.sum(axis=(0, 2, 3)).reshape(slope.shape))

    return T._node(out, (x, slope), bwd, "prelu")


def gdn(x, beta_raw, gamma_raw, inverse=False):
    """Generalized divisive normalization.

        y_i = x_i * (beta_i + sum_j gamma_ij * x_j^2) ** (-1/2)

    The inverse form uses exponent +1/2.  Positivity is built in by
    reparameterization: beta = beta_raw^2 + 1e-6, gamma = gamma_raw^2,
    with beta_raw shaped (1, C, 1, 1) and gamma_raw shaped (C, C, 1, 1).
    """
    c = x.shape[1]
    if beta_raw.shape != (1, c, 1, 1):
        raise ShapeError(f"gdn: beta shape {beta_raw.shape} != (1,{c},1,1)")
    if gamma_raw.shape != (c, c, 1, 1):
        raise ShapeError(f"gdn: gamma shape {gamma_raw.shape} != ({c},{c},1,1)")
    beta = T.add_scalar(T.mul(beta_raw, beta_raw), GDN_BETA_MIN)
    gamma = T.mul(gamma_raw, gamma_raw)
    norm = conv2d(T.mul(x, x), gamma, bias=beta, stride=1)
    return T.mul(x, T.power(norm, 0.5 if inverse else -0.5))


def raster_mask(k, kind):
    """0/1 mask over a k x k kernel for raster-order causal convolutions.

    Kind 'A' zeroes the centre tap and everything after it in raster order;
    kind 'B' keeps the centre.  Masks apply to every (out, in) channel pair.
    """
    if kind not in ("A", "B"):
        raise ContractError(f"mask kind must be 'A' or 'B', got {kind!r}")
    m = np.zeros((k, k), dtype=np.float64)
    mid = k // 2
    m[:mid, :] = 1.0
    m[mid, :mid] = 1.0
    if kind == "B":
        m[mid, mid] = 1.0
    return m


def masked_conv2d(x, weight, bias=None, kind="A"):
    """Stride-1 convolution whose kernel is multiplied by a raster mask,
    so output at a position never sees that position's input (mask A) or
    sees at most the already-produced positions plus itself (mask B)."""
    k = weight.shape[2]
    mask = raster_mask(k, kind).astype(weight.data.dtype)
    mask_t = Tensor(np.broadcast_to(mask, weight.shape).copy(), requires_grad=False, op="mask")
    return conv2d(x, T.mul(weight, mask_t), bias=bias, stride=1)


# ---------------------------------------------------------------------------
# network specs and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """One layer: a (transposed) convolution plus its activation."""
    in_ch: int
    out_ch: int
    kernel: int = 5
    stride: int = 1
    transposed: bool = False
    activation: str = "none"  # none | gdn | igdn | prelu
    mask: str = ""            # "" | "A" | "B" (mask implies stride 1)

    def validate(self):
        if min(self.in_ch, self.out_ch, self.kernel, self.stride) < 1:
            raise ContractError(f"non-positive field in {self}")
        if self.kernel % 2 == 0:
            raise ContractError(f"kernel must be odd for symmetric padding: {self}")
        if self.activation not in ("none", "gdn", "igdn", "prelu"):
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.mask and (self.transposed or self.stride != 1):
            raise ContractError("masked layers must be plain stride-1 convolutions")


@dataclass(frozen=True)
class NetworkSpec:
    """An ordered conv stack with a role tag for bookkeeping."""
    layers: tuple
    role: str = ""

    def validate(self):
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_ch != b.in_ch:
                raise ContractError(f"channel mismatch {a.out_ch} -> {b.in_ch} in role {self.role!r}")
        for lay in self.layers:
            lay.validate()

    @property
    def stride_product(self):
        p = 1
        for lay in self.layers:
            if not lay.transposed:
                p *= lay.stride
        return p

    def param_count(self):
        total = 0
        for lay in self.layers:
            total += lay.in_ch * lay.out_ch * lay.kernel * lay.kernel + lay.out_ch
            if lay.activation == "prelu":
                total += lay.out_ch
            elif lay.activation in ("gdn", "igdn"):
                total += lay.out_ch + lay.out_ch * lay.out_ch
        return total


class ParamStore:
    """Ordered name -> Tensor map holding every learnable array of a model."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype).type
        self._params = {}

    def add(self, name, array):
        if name in self._params:
            raise ContractError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def total_params(self, prefix=None):
        return sum(t.size for n, t in self._params.items()
                   if prefix is None or n.startswith(prefix))

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def arrays(self):
        """name -> raw array view, for checkpointing."""
        return {n: t.data for n, t in self._params.items()}

    def load_arrays(self, arrays):
        for n, t in self._params.items():
            if n not in arrays:
                raise ContractError(f"missing parameter {n!r}")
            a = np.asarray(arrays[n])
            if a.shape != t.shape:
                raise ShapeError(f"parameter {n!r}: shape {a.shape} != {t.shape}")
            t.data = a.astype(t.data.dtype, copy=True)
        extra = set(arrays) - set(self._params)
        if extra:
            raise ContractError(f"unexpected parameters {sorted(extra)!r}")


def _init_weight(rng, shape, fan_in):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


class Network:
    """A conv stack bound to its parameters; call it on a rank-4 tensor."""

    def __init__(self, spec, params, prefix):
        self.spec = spec
        self.params = params
        self.prefix = prefix

    def _p(self, i, leaf):
        return self.params[f"{self.prefix}.{i}.{leaf}"]

    def __call__(self, x):
        for i, lay in enumerate(self.spec.layers):
            w = self._p(i, "w")
            b = self._p(i, "b")
            if lay.mask:
                x = masked_conv2d(x, w, bias=b, kind=lay.mask)
            elif lay.transposed:
                x = tconv2d(x, w, bias=b, stride=lay.stride)
            else:
                x = conv2d(x, w, bias=b, stride=lay.stride)
            if lay.activation == "prelu":
                x = prelu(x, self._p(i, "slope"))
            elif lay.activation in ("gdn", "igdn"):
                x = gdn(x, self._p(i, "beta"), self._p(i, "gamma"),
                        inverse=(lay.activation == "igdn"))
        return x


def make_network(spec, params, prefix, rng=None, init="random"):
    """Create parameters for ``spec`` under ``prefix`` and return the bound
    Network.

    init 'random' draws fan-in scaled normals.  init 'identity-difference'
    arranges the stack to compute first_half - second_half of its input
    channels exactly (used to start a generalized difference transform as a
    plain difference); 'identity-sum' computes first_half + second_half
    (used to start the synthesis as plain addition).  Identity inits require
    PReLU activations throughout and hidden widths of at least the carried
    channel count.
    """
    spec.validate()
    if init == "random" and rng is None:
        raise ContractError("random init needs an rng")
    for i, lay in enumerate(spec.layers):
        wshape = ((lay.in_ch, lay.out_ch, lay.kernel, lay.kernel) if lay.transposed
                  else (lay.out_ch, lay.in_ch, lay.kernel, lay.kernel))
        fan_in = lay.in_ch * lay.kernel * lay.kernel
        if init == "random":
            w = _init_weight(rng, wshape, fan_in)
            b = np.zeros((1, lay.out_ch, 1, 1))
            slope_val = 0.25
        elif init in ("identity-difference", "identity-sum"):
            if lay.activation != "prelu":
                raise ContractError("identity inits require prelu activations")
            w = np.zeros(wshape)
            b = np.zeros((1, lay.out_ch, 1, 1))
            mid = lay.kernel // 2
            if i == 0:
                carried = min(3, lay.in_ch // 2 if init == "identity-difference" else lay.in_ch - 3)
                carried = min(carried, lay.out_ch)
                second = 1.0 if init == "identity-sum" else -1.0
                base = 3 if init == "identity-sum" else lay.in_ch // 2
                for ch in range(carried):
                    w[ch, ch, mid, mid] = 1.0
                    w[ch, base + ch, mid, mid] = second
            else:
                for ch in range(min(lay.in_ch, lay.out_ch, 3)):
                    w[ch, ch, mid, mid] = 1.0
            slope_val = 1.0
        else:
            raise ContractError(f"unknown init {init!r}")
        params.add(f"{prefix}.{i}.w", w)
        params.add(f"{prefix}.{i}.b", b)
        if lay.activation == "prelu":
            params.add(f"{prefix}.{i}.slope", np.full((1, lay.out_ch, 1, 1), slope_val))
        elif lay.activation in ("gdn", "igdn"):
            beta = np.full((1, lay.out_ch, 1, 1), np.sqrt(1.0 - GDN_BETA_MIN))
            gamma = np.zeros((lay.out_ch, lay.out_ch, 1, 1))
            np.fill_diagonal(gamma[:, :, 0, 0], np.sqrt(0.1))
            params.add(f"{prefix}.{i}.beta", beta)
            params.add(f"{prefix}.{i}.gamma", gamma)
    return Network(spec, params, prefix)


# ---------------------------------------------------------------------------
# spec builders for the coder networks
# ---------------------------------------------------------------------------

def encoder_spec(in_ch, hidden, latent, kernel=5, strides=(2, 2, 2, 2)):
    """Analysis transform: stride-2 convs with GDN between, none after last."""
    chans = [in_ch] + [hidden] * (len(strides) - 1) + [latent]
    layers = []
    for i, s in enumerate(strides):
        act = "gdn" if i < len(strides) - 1 else "none"
        layers.append(ConvSpec(chans[i], chans[i + 1], kernel, s, False, act))
    return NetworkSpec(tuple(layers), role="encoder")


def decoder_spec(latent, hidden, out_ch, kernel=5, strides=(2, 2, 2, 2)):
    """Synthesis transform mirroring encoder_spec, with inverse GDN."""
    chans = [latent] + [hidden] * (len(strides) - 1) + [out_ch]
    layers = []
    for i, s in enumerate(reversed(strides)):
        act = "igdn" if i < len(strides) - 1 else "none"
        layers.append(ConvSpec(chans[i], chans[i + 1], kernel, s, True, act))
    return NetworkSpec(tuple(layers), role="decoder")


def hyper_encoder_spec(latent, hidden, hyper_latent):
    return NetworkSpec((
        ConvSpec(latent, hidden, 3, 1, False, "prelu"),
        ConvSpec(hidden, hidden, 5, 2, False, "prelu"),
        ConvSpec(hidden, hyper_latent, 5, 2, False, "none"),
    ), role="hyper-encoder")


def hyper_decoder_spec(hyper_latent, hidden, latent):
    """Mirrors hyper_encoder_spec; emits 2*latent channels (mean, raw scale)."""
    return NetworkSpec((
        ConvSpec(hyper_latent, hidden, 5, 2, True, "prelu"),
        ConvSpec(hidden, hidden, 5, 2, True, "prelu"),
        ConvSpec(hidden, 2 * latent, 3, 1, False, "none"),
    ), role="hyper-decoder")


def context_spec(hyper_latent, hidden=16):
    """Causal context model over the hyper latent: mask-A then mask-B conv
    with ``hidden`` channels, then a 1x1 head emitting mean and raw scale."""
    return NetworkSpec((
        ConvSpec(hyper_latent, hidden, 5, 1, False, "prelu", mask="A"),
        ConvSpec(hidden, hidden, 5, 1, False, "prelu", mask="B"),
        ConvSpec(hidden, 2 * hyper_latent, 1, 1, False, "none"),
    ), role="context")


def gd_spec(out_ch, in_ch=6, hidden=16, kernel=5):
    """Shallow generalized-difference transform (x, prediction) -> features."""
    return NetworkSpec((
        ConvSpec(in_ch, hidden, kernel, 1, False, "prelu"),
        ConvSpec(hidden, hidden, kernel, 1, False, "prelu"),
        ConvSpec(hidden, out_ch, kernel, 1, False, "prelu"),
    ), role="gd")


def gs_spec(in_ch, out_ch=3, hidden=16, kernel=5):
    """Shallow generalized-sum transform (prediction, decoded) -> frame."""
    return NetworkSpec((
        ConvSpec(in_ch, hidden, kernel, 1, False, "prelu"),
        ConvSpec(hidden, hidden, kernel, 1, False, "prelu"),
        ConvSpec(hidden, out_ch, kernel, 1, False, "prelu"),
    ), role="gs")


def pred_branch_spec(in_ch, width, kernel=5, strides=(2, 2, 2, 2)):
    """Prediction-side encoder used by the conditional-latent coder; all
    layers run at the output width."""
    chans = [in_ch] + [width] * len(strides)
    layers = []
    for i, s in enumerate(strides):
        act = "prelu" if i < len(strides) - 1 else "none"
        layers.append(ConvSpec(chans[i], chans[i + 1], kernel, s, False, act))
    return NetworkSpec(tuple(layers), role="pred-branch")
