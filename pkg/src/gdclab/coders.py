"""The coder family: plain difference coding, conditional-latent coding,
and generalized difference coding with shallow feature transforms.

All four systems share one backbone: an analysis/synthesis conv pair with a
hyperprior whose hyper-latent is coded by a causal context model, and whose
main latent is coded with mean/scale Gaussians predicted from the
hyper-latent.  They differ only in what enters the analysis transform and
how the synthesis output is turned into a frame:

  diff      codes r = x - pred and reconstructs pred + r_hat
  codecnet  codes a latent of (x, pred); an untransmitted encoding of pred
            joins the decoder input; reconstruction is direct
  gdc       codes learned features g = GD(x, pred) and reconstructs with a
            learned synthesis GS(pred, g_hat); identical backbone to diff
  xgdc      widens GD to extra feature channels, feeds the analysis with
            (g, r) jointly, and exposes both a residual-style and a
            synthesis-style reconstruction decoded from one latent

The decode path takes only the prediction frame and the bitstream; it never
sees the original.  Encoder-side reconstructions are computed from the same
rounded latents the decoder will recover, so both ends agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import entropy as E
from . import evaluation as V
from . import tensor as T
from .errors import ContractError, ShapeError
from .fileio import BitstreamContainer, Payload
from .layers import (Network, ParamStore, context_spec, decoder_spec,
                     encoder_spec, gd_spec, gs_spec, hyper_decoder_spec,
                     hyper_encoder_spec, make_network, pred_branch_spec)

KINDS = ("diff", "codecnet", "gdc", "xgdc")


@dataclass(frozen=True)
class CoderConfig:
    kind: str
    channels: int = 3
    core_width: int = 64     # conv width of the analysis/synthesis stacks
    latent: int = 96         # transmitted latent channels
    hyper_latent: int = 32   # hyper-latent channels
    pred_width: int = 64     # prediction-branch width (codecnet)
    features: int = 0        # GD output channels; 0 picks the kind default
    ctx_width: int = 16
    kernel: int = 5
    enc_strides: tuple = (2, 2, 2, 2)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.features == 0:
            default = self.channels if self.kind == "gdc" else 16
            object.__setattr__(self, "features", default)
        for name in ("channels", "core_width", "latent", "hyper_latent",
                     "pred_width", "features", "ctx_width", "kernel"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.kernel % 2 == 0:
            raise ContractError("kernel must be odd")

    @property
    def stride_product(self):
        p = 1
        for s in self.enc_strides:
            p *= s
        return p

    @classmethod
    def desk(cls, kind, **over):
        """Small dims for fast experiments and training at 32x32."""
        base = dict(core_width=32, latent=32, hyper_latent=16, pred_width=32,
                    ctx_width=8)
        base.update(over)
        return cls(kind, **base)

    @classmethod
    def tiny(cls, kind, **over):
        """Minimal dims for gradient checking whole coder graphs."""
        base = dict(core_width=8, latent=8, hyper_latent=4, pred_width=8,
                    ctx_width=4, features=0 if kind != "xgdc" else 4,
                    enc_strides=(2, 2))
        base.update(over)
        return cls(kind, **base)


def coder_specs(cfg):
    """prefix -> NetworkSpec for every subnet the kind needs."""
    C, k = cfg.channels, cfg.kernel
    enc_in = {"diff": C, "codecnet": 2 * C, "gdc": cfg.features,
              "xgdc": cfg.features + C}[cfg.kind]
    dec_out = {"diff": C, "codecnet": C, "gdc": cfg.features,
               "xgdc": cfg.features + C}[cfg.kind]
    dec_in = cfg.latent + (cfg.pred_width if cfg.kind == "codecnet" else 0)
    specs = {
        "enc": encoder_spec(enc_in, cfg.core_width, cfg.latent, k, cfg.enc_strides),
        "dec": decoder_spec(dec_in, cfg.core_width, dec_out, k, cfg.enc_strides),
        "hyp_enc": hyper_encoder_spec(cfg.latent, cfg.core_width, cfg.hyper_latent),
        "hyp_dec": hyper_decoder_spec(cfg.hyper_latent, cfg.core_width, cfg.latent),
        "ctx": context_spec(cfg.hyper_latent, cfg.ctx_width),
    }
    if cfg.kind in ("gdc", "xgdc"):
        specs["gd"] = gd_spec(cfg.features, in_ch=2 * C, kernel=k)
        specs["gs"] = gs_spec(C + dec_out, out_ch=C, kernel=k)
    if cfg.kind == "codecnet":
        specs["pred"] = pred_branch_spec(C, cfg.pred_width, k, cfg.enc_strides)
    return specs


_HYPER_STRIDES = (1, 2, 2)


def _down(h, strides):
    for s in strides:
        h = (h - 1) // s + 1
    return h


def pad_to_multiple(arr, m):
    """Pad H and W up to multiples of m (reflective, replicate fallback for
    frames smaller than the required margin).  Returns the padded array."""
    n, c, h, w = arr.shape
    ph = (-h) % m
    pw = (-w) % m
    if ph == 0 and pw == 0:
        return arr
    mode = "reflect" if (ph < h and pw < w) else "edge"
    return np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)


@dataclass
class CoderOutput:
    """Everything a forward pass produces.  Rates are scalar graph tensors
    measured in bits; reconstructions are graph tensors; latents is a dict
    of detached arrays for inspection."""
    kind: str
    x_hat_d: object = None
    x_hat_g: object = None
    rate_y: object = None
    rate_z: object = None
    latents: dict = field(default_factory=dict)
    mode: str = ""
    x_hat_merged: object = None
    qt_result: object = None

    def total_rate(self):
        return T.add(self.rate_y, self.rate_z)

    def single(self):
        """The unique reconstruction for kinds that define exactly one."""
        if self.x_hat_d is not None and self.x_hat_g is not None:
            raise ContractError(f"{self.kind} defines two reconstructions; pick one")
        return self.x_hat_d if self.x_hat_d is not None else self.x_hat_g


class Coder:
    """A coder kind bound to its parameters."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params
        self.specs = coder_specs(cfg)
        for prefix, spec in self.specs.items():
            for i, lay in enumerate(spec.layers):
                name = f"{prefix}.{i}.w"
                if name not in params:
                    raise ContractError(f"parameters missing {name!r} for kind {cfg.kind!r}")
        self.nets = {p: Network(s, params, p) for p, s in self.specs.items()}

    # -- construction -------------------------------------------------------

    @classmethod
    def new(cls, cfg, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        params = ParamStore(dtype)
        for prefix, spec in coder_specs(cfg).items():
            make_network(spec, params, prefix, rng=rng)
        return cls(cfg, params)

    @classmethod
    def from_arrays(cls, cfg, arrays, dtype=np.float32):
        coder = cls.new(cfg, seed=0, dtype=dtype)
        coder.params.load_arrays(arrays)
        return coder

    # -- forward ------------------------------------------------------------

    def _check_pair(self, x, xt):
        if x.shape != xt.shape:
            raise ShapeError(f"frame/prediction shape mismatch {x.shape} vs {xt.shape}")
        n, c, h, w = x.shape
        if c != self.cfg.channels:
            raise ShapeError(f"expected {self.cfg.channels} channels, got {c}")
        sp = self.cfg.stride_product
        if h % sp or w % sp:
            raise ContractError(f"frame size {h}x{w} not divisible by total stride {sp}")

    def _core_input(self, x, xt):
        kind = self.cfg.kind
        if kind == "diff":
            return T.sub(x, xt)
        if kind == "codecnet":
            return T.concat_channels([x, xt])
        g = self.nets["gd"](T.concat_channels([x, xt]))
        if kind == "gdc":
            return g
        return T.concat_channels([g, T.sub(x, xt)])

    def _entropy_params(self, z_hat, y_shape):
        h = self.nets["hyp_dec"](z_hat)
        _, _, yh, yw = y_shape
        if h.shape[2] < yh or h.shape[3] < yw:
            raise ShapeError(f"hyper decoder produced {h.shape}, smaller than latent {y_shape}")
        if h.shape[2] != yh or h.shape[3] != yw:
            h = T.crop_spatial(h, 0, yh, 0, yw)
        ychan = self.cfg.latent
        mean = T.slice_channels(h, 0, ychan)
        scale = E.scale_from_raw(T.slice_channels(h, ychan, 2 * ychan))
        return mean, scale

    def _reconstruct(self, y_hat, xt):
        kind = self.cfg.kind
        if kind == "diff":
            r_hat = self.nets["dec"](y_hat)
            return T.add(xt, r_hat), None
        if kind == "codecnet":
            yp = self.nets["pred"](xt)
            return None, self.nets["dec"](T.concat_channels([y_hat, yp]))
        if kind == "gdc":
            g_hat = self.nets["dec"](y_hat)
            return None, self.nets["gs"](T.concat_channels([xt, g_hat]))
        d = self.nets["dec"](y_hat)
        r_hat = T.slice_channels(d, 0, self.cfg.channels)
        x_hat_d = T.add(xt, r_hat)
        x_hat_g = self.nets["gs"](T.concat_channels([xt, d]))
        return x_hat_d, x_hat_g

    def forward(self, x, xt, mode="noise", rng=None):
        """Run the full train-time graph.  ``mode`` is 'noise' (additive
        U[-1/2,1/2), needs ``rng``) or 'round'.  The hyper-latent is
        quantized before the main latent, which fixes the rng draw order."""
        self._check_pair(x, xt)
        y = self.nets["enc"](self._core_input(x, xt))
        z = self.nets["hyp_enc"](y)
        z_hat = E.quantize(z, mode, rng)
        y_hat = E.quantize(y, mode, rng)
        mean, scale = self._entropy_params(z_hat, y.shape)
        rate_y = T.sum_all(E.gaussian_bits(y_hat, mean, scale))
        rate_z = T.sum_all(E.context_bits(z_hat, self.nets["ctx"]))
        x_hat_d, x_hat_g = self._reconstruct(y_hat, xt)
        return CoderOutput(
            kind=self.cfg.kind, x_hat_d=x_hat_d, x_hat_g=x_hat_g,
            rate_y=rate_y, rate_z=rate_z, mode=mode,
            latents={"y": y.data, "y_hat": y_hat.data, "z": z.data,
                     "z_hat": z_hat.data, "mean": mean.data, "scale": scale.data})

    # -- real coding --------------------------------------------------------

    def encode(self, x, xt, qt_lambda=None, min_block=4, max_block=256):
        """Code a frame against its prediction; returns (container, output).

        Frames of any size are padded to the stride multiple and the true
        size is recorded in the container.  For the two-reconstruction kind,
        passing ``qt_lambda`` also runs the quad-tree mode search and embeds
        its side information.
        """
        if qt_lambda is not None and self.cfg.kind != "xgdc":
            raise ContractError("quad-tree hybrid coding needs the two-reconstruction kind")
        xd_arr = np.asarray(x.data if isinstance(x, T.Tensor) else x)
        xt_arr = np.asarray(xt.data if isinstance(xt, T.Tensor) else xt)
        if xd_arr.shape != xt_arr.shape:
            raise ShapeError(f"frame/prediction shape mismatch {xd_arr.shape} vs {xt_arr.shape}")
        true_h, true_w = xd_arr.shape[2], xd_arr.shape[3]
        sp = self.cfg.stride_product
        with T.no_grad():
            xp = T.Tensor(pad_to_multiple(xd_arr, sp))
            xtp = T.Tensor(pad_to_multiple(xt_arr, sp))
            y = self.nets["enc"](self._core_input(xp, xtp))
            z = self.nets["hyp_enc"](y)
            z_hat = E.quantize(z, "round")
            y_hat = E.quantize(y, "round")
            mean, scale = self._entropy_params(z_hat, y.shape)
            bits_y = E.gaussian_bits(y_hat, mean, scale)
            bits_z = E.context_bits(z_hat, self.nets["ctx"])

            stream_z, sup_z = E.encode_context(z_hat.data, self.nets["ctx"])
            stream_y, sup_y = E.encode_gaussian(y_hat.data, mean.data, scale.data)
            pz = Payload(stream=stream_z, lo=sup_z[0], hi=sup_z[1],
                         symbol_count=z_hat.size, est_bits=float(bits_z.data.sum()))
            py = Payload(stream=stream_y, lo=sup_y[0], hi=sup_y[1],
                         symbol_count=y_hat.size, est_bits=float(bits_y.data.sum()))

            x_hat_d, x_hat_g = self._reconstruct(y_hat, xtp)
            out = CoderOutput(
                kind=self.cfg.kind, mode="round",
                x_hat_d=self._crop(x_hat_d, true_h, true_w),
                x_hat_g=self._crop(x_hat_g, true_h, true_w),
                rate_y=T.sum_all(bits_y), rate_z=T.sum_all(bits_z),
                latents={"y_hat": y_hat.data, "z_hat": z_hat.data,
                         "mean": mean.data, "scale": scale.data})

            qt_bits = None
            if qt_lambda is not None:
                res = V.quadtree_search(xp.data, x_hat_d.data, x_hat_g.data,
                                        qt_lambda, min_block=min_block,
                                        max_block=max_block)
                qt_bits = V.serialize_quadtree(res.roots, min_block)
                out.qt_result = res
                out.x_hat_merged = self._crop(T.Tensor(res.merged), true_h, true_w)

            container = BitstreamContainer(
                kind=self.cfg.kind, width=true_w, height=true_h,
                payload_z=pz, payload_y=py, qt_bits=qt_bits,
                qt_min_block=min_block if qt_bits is not None else 0,
                qt_max_block=max_block if qt_bits is not None else 0)
        return container, out

    @staticmethod
    def _crop(t, h, w):
        if t is None:
            return None
        if t.shape[2] == h and t.shape[3] == w:
            return t
        return T.crop_spatial(t, 0, h, 0, w)

    def decode(self, xt, container):
        """Reconstruct from prediction + bitstream alone."""
        if container.kind != self.cfg.kind:
            raise ContractError(f"container is {container.kind!r}, coder is {self.cfg.kind!r}")
        xt_arr = np.asarray(xt.data if isinstance(xt, T.Tensor) else xt)
        if xt_arr.shape[2] != container.height or xt_arr.shape[3] != container.width:
            raise ShapeError(f"prediction is {xt_arr.shape[2]}x{xt_arr.shape[3]}, "
                             f"container says {container.height}x{container.width}")
        sp = self.cfg.stride_product
        dtype = self.params.dtype
        with T.no_grad():
            xtp = T.Tensor(pad_to_multiple(xt_arr, sp))
            ph, pw = xtp.shape[2], xtp.shape[3]
            yh, yw = ph // sp, pw // sp
            zh, zw = _down(yh, _HYPER_STRIDES), _down(yw, _HYPER_STRIDES)
            z_shape = (1, self.cfg.hyper_latent, zh, zw)
            z_arr = E.decode_context(container.payload_z.stream, self.nets["ctx"],
                                     z_shape, (container.payload_z.lo, container.payload_z.hi),
                                     dtype=dtype)
            z_hat = T.Tensor(z_arr.astype(dtype))
            y_shape = (1, self.cfg.latent, yh, yw)
            mean, scale = self._entropy_params(z_hat, y_shape)
            y_flat = E.decode_gaussian(container.payload_y.stream, mean.data, scale.data,
                                       (container.payload_y.lo, container.payload_y.hi),
                                       int(np.prod(y_shape)))
            y_hat = T.Tensor(y_flat.reshape(y_shape).astype(dtype))
            x_hat_d, x_hat_g = self._reconstruct(y_hat, xtp)
            out = CoderOutput(
                kind=self.cfg.kind, mode="round",
                x_hat_d=self._crop(x_hat_d, container.height, container.width),
                x_hat_g=self._crop(x_hat_g, container.height, container.width),
                latents={"y_hat": y_hat.data, "z_hat": z_hat.data})
            if container.qt_bits is not None:
                roots, used = V.parse_quadtree(container.qt_bits, ph, pw,
                                               container.qt_min_block,
                                               container.qt_max_block)
                if used != len(container.qt_bits):
                    raise ContractError(f"quad-tree side info has {len(container.qt_bits)} bits, "
                                        f"tree used {used}")
                merged = V.merge_reconstructions(x_hat_d.data, x_hat_g.data, roots)
                out.x_hat_merged = self._crop(T.Tensor(merged), container.height, container.width)
        return out


def gdc_from_diff(diff_coder):
    """Build the generalized coder whose feature transforms start as exact
    difference/sum, sharing every backbone weight with ``diff_coder``.
    By construction its outputs and rates match the difference coder's
    bit for bit until training moves the weights."""
    if diff_coder.cfg.kind != "diff":
        raise ContractError("source coder must be the difference kind")
    cfg = CoderConfig(
        "gdc", channels=diff_coder.cfg.channels,
        core_width=diff_coder.cfg.core_width, latent=diff_coder.cfg.latent,
        hyper_latent=diff_coder.cfg.hyper_latent,
        pred_width=diff_coder.cfg.pred_width,
        features=diff_coder.cfg.channels, ctx_width=diff_coder.cfg.ctx_width,
        kernel=diff_coder.cfg.kernel, enc_strides=diff_coder.cfg.enc_strides)
    params = ParamStore(diff_coder.params.dtype)
    specs = coder_specs(cfg)
    make_network(specs["gd"], params, "gd", init="identity-difference")
    for name, t in diff_coder.params.items():
        params.add(name, t.data.copy())
    make_network(specs["gs"], params, "gs", init="identity-sum")
    return Coder(cfg, params)
