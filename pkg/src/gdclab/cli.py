"""Command-line front end.

Subcommands:
  infolab   exact information-theory verification sweep, CSV report
  train     fit a coder on synthetic or directory-sourced pairs
  encode    frame + prediction -> bitstream container
  decode    prediction + container -> reconstruction (never sees the frame)
  eval      per-frame rate/quality CSV over a corpus
  bdrate    Bjontegaard rate delta between two curve CSVs
  quadtree  standalone mode search between two candidate reconstructions
  selftest  condensed invariant suites, exit 0 when healthy
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import coders as CD
from . import evaluation as EV
from . import fileio as F
from . import infolab as IL
from . import training as TR
from . import tensor as T
from .errors import (ContractError, FormatError, IdentityError, NumericError,
                     ShapeError, StreamError, TrainingError)

_CLI_ERRORS = (ContractError, FormatError, IdentityError, NumericError,
               ShapeError, StreamError, TrainingError, OSError)


def _coder_config(ecfg):
    return CD.CoderConfig(
        kind=ecfg.coder, channels=ecfg.channels, core_width=ecfg.core_width,
        latent=ecfg.latent, hyper_latent=ecfg.hyper_latent,
        pred_width=ecfg.pred_width, features=ecfg.features,
        ctx_width=ecfg.ctx_width, kernel=ecfg.kernel,
        enc_strides=ecfg.stride_tuple())


def _apply_desk(ecfg):
    ecfg.core_width, ecfg.latent = 32, 32
    ecfg.hyper_latent, ecfg.pred_width, ecfg.ctx_width = 16, 32, 8
    return ecfg


def _load_model(path, config=None):
    """Checkpoint plus its sidecar config -> ready Coder."""
    cfg_path = config if config else str(path) + ".cfg"
    if not Path(cfg_path).exists():
        raise ContractError(f"no config found at {cfg_path}; pass --config")
    ecfg = F.ExperimentConfig.from_file(cfg_path)
    coder = CD.Coder.new(_coder_config(ecfg), seed=0)
    coder.params.load_arrays(F.load_checkpoint(path))
    return coder, ecfg


def _load_images(directory):
    paths = sorted(p for p in Path(directory).iterdir()
                   if p.suffix in (".ppm", ".png"))
    if not paths:
        raise ContractError(f"no .ppm/.png images in {directory}")
    return [F.load_image(p).data for p in paths], paths


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# -- infolab ----------------------------------------------------------------

def cmd_infolab(args):
    rng = np.random.default_rng(args.seed)
    header = ["case", "generator", "map", "nx", "nxt", "H_x", "H_xt", "H_R",
              "H_x_given_xt", "I_xt_R", "residual_abs", "H_y", "H_x_given_y",
              "I_x_xt_given_y", "injective", "ok"]
    rows = []
    for case in range(args.cases):
        gen = ("random", "additive", "perfect")[case % 3]
        if gen == "random":
            j = IL.random_joint(rng, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        elif gen == "additive":
            j = IL.additive_noise_joint(rng, int(rng.integers(3, 7)), int(rng.integers(1, 3)))
        else:
            j = IL.perfect_prediction_joint(rng, int(rng.integers(2, 7)))
        rep = IL.verify_main_identity(j)
        rows.append([case, gen, "", len(j.alphabet_x), len(j.alphabet_xt),
                     IL.entropy(j.marginal_x()), IL.entropy(j.marginal_xt()),
                     rep["H_R"], rep["H_x_given_xt"], rep["I_xt_R"],
                     rep["residual_abs"], "", "", "", "", True])
        for m in range(args.maps):
            inj = m % 3 == 0
            f = IL.random_map(rng, j.alphabet_xt, injective=inj,
                              codomain_size=max(1, len(j.alphabet_xt) // 2))
            brep = IL.bottleneck_report(j, f)
            rows.append([case, gen, m, len(j.alphabet_x), len(j.alphabet_xt),
                         IL.entropy(j.marginal_x()), brep["H_xt"], brep["H_R"],
                         brep["H_x_given_xt"], brep["I_xt_R"], "",
                         brep["H_y"], brep["H_x_given_y"], brep["I_x_xt_given_y"],
                         f.is_injective(), all(brep["checks"].values())])
    _write_csv(args.out, header, rows)
    print(f"infolab: {args.cases} joints x {args.maps} maps verified, "
          f"report at {args.out}")
    return 0


# -- train ------------------------------------------------------------------

def _build_pairs(args, ecfg):
    rng = np.random.default_rng(ecfg.seed)
    if args.data:
        images, _ = _load_images(args.data)
        step, achieved = TR.calibrate_quant_step(
            images, TR.GenConfig(patch=ecfg.patch, max_shift=2), seed=ecfg.seed)
        print(f"degradation step {step:.2f} -> {achieved:.2f} dB")
        pairs = []
        for i in range(ecfg.pairs):
            img = images[i % len(images)]
            if i % 2 == 0:
                gen = TR.GenConfig(patch=ecfg.patch, max_shift=1, quant_step=step)
            else:
                gen = TR.GenConfig(patch=ecfg.patch, max_shift=2, blur=0.5,
                                   quant_step=step, noise=0.03)
            pairs.append(TR.make_pair(img, gen, rng))
        return pairs
    return TR.make_corpus(rng, ecfg.pairs, patch=ecfg.patch)


def cmd_train(args):
    ecfg = F.ExperimentConfig.from_file(args.config) if args.config \
        else F.ExperimentConfig()
    for name in ("coder", "lmbda", "steps", "seed", "patch", "pairs"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(ecfg, name, val)
    if args.preset == "desk":
        _apply_desk(ecfg)
    ecfg.validate()
    if args.init_from:
        if ecfg.coder != "gdc":
            raise ContractError("--init-from applies to the gdc kind only")
        diff_coder, diff_cfg = _load_model(args.init_from)
        if diff_cfg.coder != "diff":
            raise ContractError("--init-from checkpoint must be a diff model")
        coder = CD.gdc_from_diff(diff_coder)
        for name in ("channels", "core_width", "latent", "hyper_latent",
                     "pred_width", "ctx_width", "kernel", "strides"):
            setattr(ecfg, name, getattr(diff_cfg, name))
        ecfg.features = coder.cfg.features
    else:
        coder = CD.Coder.new(_coder_config(ecfg), seed=ecfg.seed)

    pairs = _build_pairs(args, ecfg)
    tc = TR.TrainConfig(lmbda=ecfg.lmbda, lr=ecfg.lr, steps=ecfg.steps,
                        seed=ecfg.seed, patch=ecfg.patch,
                        any_lambda=ecfg.lmbda not in TR.LAMBDA_MENU)
    log_rows = []
    state = None
    done = 0
    epoch = 0
    while done < ecfg.steps:
        chunk = pairs[:ecfg.steps - done] if ecfg.steps - done < len(pairs) else pairs
        stats, state = TR.train_epoch(
            coder, chunk,
            TR.TrainConfig(lmbda=tc.lmbda, lr=tc.lr, steps=tc.steps,
                           seed=tc.seed + epoch, patch=tc.patch,
                           any_lambda=tc.any_lambda),
            state)
        done += stats.steps
        epoch += 1
        log_rows.append([epoch, done, stats.mean_loss, stats.mean_bpp,
                         stats.mean_psnr, stats.mode_d_fraction])
        print(f"epoch {epoch}: steps {done} loss {stats.mean_loss:.3f} "
              f"bpp {stats.mean_bpp:.4f} psnr {stats.mean_psnr:.2f}")
    F.save_checkpoint(args.out, coder.params.arrays())
    ecfg.save(str(args.out) + ".cfg")
    if args.log:
        _write_csv(args.log, ["epoch", "steps", "loss", "bpp", "psnr", "mode_d"],
                   log_rows)
    print(f"saved {coder.params.total_params()} parameters to {args.out}")
    return 0


# -- encode / decode --------------------------------------------------------

def _default_recon(out, container=None):
    if out.x_hat_merged is not None:
        return out.x_hat_merged, "merged"
    if out.kind == "diff" or (out.kind == "xgdc" and out.x_hat_g is None):
        return out.x_hat_d, "d"
    if out.kind == "xgdc":
        return out.x_hat_d, "d"
    return out.x_hat_g, "g"


def cmd_encode(args):
    coder, _ = _load_model(args.model, args.config)
    x = F.load_image(args.frame)
    xt = F.load_image(args.pred)
    container, out = coder.encode(
        x.data, xt.data, qt_lambda=args.qt_lambda,
        min_block=args.min_block, max_block=args.max_block)
    F.save_container(args.out, container)
    bpp = EV.bits_per_pixel(container.total_bits(), container.height, container.width)
    recon, tag = _default_recon(out)
    print(f"{container.kind}: {container.total_bits() // 8} bytes, "
          f"{bpp:.4f} bpp, psnr_{tag} {EV.psnr(recon.data, x.data):.2f} dB")
    if args.recon:
        F.write_image(args.recon, recon)
    return 0


def cmd_decode(args):
    coder, _ = _load_model(args.model, args.config)
    xt = F.load_image(args.pred)
    container = F.load_container(args.stream)
    out = coder.decode(xt.data, container)
    if args.mode == "auto":
        recon, tag = _default_recon(out)
    else:
        recon = {"d": out.x_hat_d, "g": out.x_hat_g,
                 "merged": out.x_hat_merged}[args.mode]
        tag = args.mode
        if recon is None:
            raise ContractError(f"container holds no {args.mode!r} reconstruction")
    F.write_image(args.out, recon)
    print(f"decoded {container.kind} ({tag}) -> {args.out}")
    return 0


# -- eval / bdrate / quadtree ----------------------------------------------

def cmd_eval(args):
    coder, ecfg = _load_model(args.model, args.config)
    lam = args.lmbda if args.lmbda is not None else ecfg.lmbda
    rng = np.random.default_rng(args.seed)
    if args.data:
        images, _ = _load_images(args.data)
        pairs = []
        for i in range(args.frames):
            gen = TR.GenConfig(patch=ecfg.patch, max_shift=1, quant_step=16.0,
                               noise=0.0 if i % 2 == 0 else 0.03)
            pairs.append(TR.make_pair(images[i % len(images)], gen, rng))
    else:
        pairs = TR.make_corpus(rng, args.frames, patch=ecfg.patch)
    header = ["frame", "coder", "lambda", "bpp", "psnr", "psnr_d", "psnr_g",
              "mode_d_area"]
    rows = []
    for i, (x, xt) in enumerate(pairs):
        qt = lam if coder.cfg.kind == "xgdc" else None
        container, out = coder.encode(x, xt, qt_lambda=qt)
        bpp = EV.bits_per_pixel(container.total_bits(), container.height,
                                container.width)
        recon, _ = _default_recon(out)
        rows.append([
            i, coder.cfg.kind, lam, f"{bpp:.6f}",
            f"{EV.psnr(recon.data, x):.4f}",
            f"{EV.psnr(out.x_hat_d.data, x):.4f}" if out.x_hat_d is not None else "",
            f"{EV.psnr(out.x_hat_g.data, x):.4f}" if out.x_hat_g is not None else "",
            f"{out.qt_result.mode_d_fraction:.4f}" if out.qt_result else ""])
    _write_csv(args.out, header, rows)
    mean_bpp = np.mean([float(r[3]) for r in rows])
    mean_psnr = np.mean([float(r[4]) for r in rows])
    print(f"eval: {len(rows)} frames, mean {mean_bpp:.4f} bpp / {mean_psnr:.2f} dB, "
          f"rows at {args.out}")
    return 0


def _read_curve(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows or "bpp" not in rows[0] or "psnr" not in rows[0]:
        raise FormatError(f"{path}: need CSV with bpp and psnr columns")
    pts = sorted((float(r["bpp"]), float(r["psnr"])) for r in rows)
    return [EV.RDPoint(b, p) for b, p in pts]


def cmd_bdrate(args):
    val = EV.bd_rate(_read_curve(args.reference), _read_curve(args.test))
    print(f"{val:.1f}%")
    return 0


def cmd_quadtree(args):
    x = F.load_image(args.frame).data
    d = F.load_image(args.cand_d).data
    g = F.load_image(args.cand_g).data
    if x.shape != d.shape or x.shape != g.shape:
        raise ShapeError("frame and candidates must share dimensions")
    xp = CD.pad_to_multiple(x, args.min_block)
    dp = CD.pad_to_multiple(d, args.min_block)
    gp = CD.pad_to_multiple(g, args.min_block)
    res = EV.quadtree_search(xp, dp, gp, args.lmbda,
                             min_block=args.min_block, max_block=args.max_block)
    print(f"cost {res.cost:.1f}, {res.side_bits} side bits, "
          f"mode-d fraction {res.mode_d_fraction:.3f}")
    if args.out:
        rows = []

        def leaves(node):
            if node.is_leaf:
                rows.append([node.y, node.x, node.size, node.mode])
            else:
                for c in node.children:
                    leaves(c)
        for r in res.roots:
            leaves(r)
        _write_csv(args.out, ["y", "x", "size", "mode"], rows)
    if args.merged:
        h, w = x.shape[2], x.shape[3]
        F.write_image(args.merged, T.Tensor(res.merged[:, :, :h, :w]))
    return 0


# -- selftest ---------------------------------------------------------------

def cmd_selftest(args):
    from . import entropy as EN
    from . import layers as LY
    from . import rangecoder as RC

    rng = np.random.default_rng(0)

    for case in range(10):
        j = IL.random_joint(rng, 5, 5)
        IL.verify_main_identity(j)
        IL.bottleneck_report(j, IL.random_map(rng, j.alphabet_xt, codomain_size=2))
    print("ok infolab")

    syms = rng.integers(0, 4, size=2000)
    pmf = np.array([0.7, 0.1, 0.1, 0.1])
    cdf = np.concatenate([[0], np.cumsum((pmf * (1 << 16)).astype(np.int64))])
    cdf[-1] = 1 << 16
    payload = RC.encode_range(syms, cdf)
    assert np.array_equal(RC.decode_range(payload, cdf, len(syms)), syms)
    print("ok rangecoder")

    vals = rng.integers(-20, 20, size=(1, 2, 6, 6)).astype(np.float64)
    mean = rng.normal(size=vals.shape)
    scale = 0.11 + np.abs(rng.normal(size=vals.shape)) + 0.1
    stream, support = EN.encode_gaussian(vals, mean, scale)
    back = EN.decode_gaussian(stream, mean, scale, support, vals.size)
    assert np.array_equal(back, vals.ravel().astype(np.int64))
    print("ok entropy")

    with T.using_dtype(np.float64):
        x = T.Tensor(rng.normal(size=(1, 3, 6, 6)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
        err = T.grad_check(lambda a, b: T.sum_all(T.mul(LY.conv2d(a, b), LY.conv2d(a, b))),
                           [x, w])
        assert err < 1e-6, err
    print("ok gradients")

    for kind in CD.KINDS:
        coder = CD.Coder.new(CD.CoderConfig.desk(kind), seed=4)
        x = rng.uniform(0.2, 0.8, size=(1, 3, 32, 32)).astype(np.float32)
        xt = np.clip(x + rng.normal(scale=0.03, size=x.shape), 0, 1).astype(np.float32)
        container, enc = coder.encode(x, xt)
        dec = coder.decode(xt, F.BitstreamContainer.from_bytes(container.to_bytes()))
        for a, b in ((enc.x_hat_d, dec.x_hat_d), (enc.x_hat_g, dec.x_hat_g)):
            assert (a is None) == (b is None)
            if a is not None:
                assert np.array_equal(a.data, b.data), kind
    diff = CD.Coder.new(CD.CoderConfig.desk("diff"), seed=6)
    gdc = CD.gdc_from_diff(diff)
    x = rng.uniform(0.2, 0.8, size=(1, 3, 32, 32)).astype(np.float32)
    xt = np.clip(x + rng.normal(scale=0.05, size=x.shape), 0, 1).astype(np.float32)
    cd, od = diff.encode(x, xt)
    cg, og = gdc.encode(x, xt)
    assert cd.payload_y.stream == cg.payload_y.stream
    assert np.array_equal(od.x_hat_d.data, og.x_hat_g.data)
    print("ok coders")

    for _ in range(10):
        x = rng.uniform(size=(1, 1, 8, 8))
        d = x + rng.normal(scale=0.05, size=x.shape)
        g = x + rng.normal(scale=0.05, size=x.shape)
        lam = float(rng.uniform(0, 500))
        res = EV.quadtree_search(x, d, g, lam, min_block=4, max_block=8)
        for mode, cand in (("d", d), ("g", g)):
            delta = (x - cand) * 255.0
            root = float(np.sum(delta * delta)) + lam * 2
            assert res.cost <= root + 1e-9
    print("ok quadtree")

    pts = [EV.RDPoint(b, p) for b, p in [(0.1, 30), (0.2, 33), (0.4, 36), (0.8, 39)]]
    assert abs(EV.bd_rate(pts, pts)) < 1e-12
    half = [EV.RDPoint(p.bpp / 2, p.psnr) for p in pts]
    assert abs(EV.bd_rate(pts, half) + 50.0) < 1e-9
    print("ok bdrate")
    print("selftest passed")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="gdclab",
        description="Conditional-coding laboratory: exact information-theory "
                    "checks, four trainable coders with real bitstreams, and "
                    "rate-distortion evaluation tools.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("infolab", help="verify the residual/bottleneck identities")
    s.add_argument("--cases", type=int, default=100)
    s.add_argument("--maps", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="infolab_report.csv")
    s.set_defaults(func=cmd_infolab)

    s = sub.add_parser("train", help="train a coder")
    s.add_argument("--coder", choices=CD.KINDS)
    s.add_argument("--config", help="experiment config file")
    s.add_argument("--lambda", dest="lmbda", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--patch", type=int)
    s.add_argument("--pairs", type=int)
    s.add_argument("--data", help="directory of .ppm/.png images; synthetic corpus if omitted")
    s.add_argument("--preset", choices=("default", "desk"), default="default")
    s.add_argument("--init-from", help="diff checkpoint for staged gdc initialization")
    s.add_argument("--out", required=True, help="checkpoint output path")
    s.add_argument("--log", help="CSV training log path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("encode", help="encode a frame against a prediction")
    s.add_argument("--model", required=True)
    s.add_argument("--config")
    s.add_argument("--frame", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--qt-lambda", type=float, default=None,
                   help="enable quad-tree mode search (xgdc only)")
    s.add_argument("--min-block", type=int, default=4)
    s.add_argument("--max-block", type=int, default=256)
    s.add_argument("--recon", help="also write the encoder-side reconstruction")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="decode a container against a prediction")
    s.add_argument("--model", required=True)
    s.add_argument("--config")
    s.add_argument("--pred", required=True)
    s.add_argument("--stream", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("auto", "d", "g", "merged"), default="auto")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("eval", help="rate/quality table over a corpus")
    s.add_argument("--model", required=True)
    s.add_argument("--config")
    s.add_argument("--lambda", dest="lmbda", type=float, default=None)
    s.add_argument("--data")
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="eval.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bdrate", help="rate delta between two curve CSVs")
    s.add_argument("reference")
    s.add_argument("test")
    s.set_defaults(func=cmd_bdrate)

    s = sub.add_parser("quadtree", help="mode search between two reconstructions")
    s.add_argument("--frame", required=True)
    s.add_argument("--cand-d", required=True)
    s.add_argument("--cand-g", required=True)
    s.add_argument("--lambda", dest="lmbda", type=float, required=True)
    s.add_argument("--min-block", type=int, default=4)
    s.add_argument("--max-block", type=int, default=256)
    s.add_argument("--out", help="CSV of chosen leaves")
    s.add_argument("--merged", help="write the merged reconstruction image")
    s.set_defaults(func=cmd_quadtree)

    s = sub.add_parser("selftest", help="run the condensed invariant suites")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _CLI_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
