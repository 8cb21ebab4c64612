"""Evaluation utilities: distortion metrics, rate-distortion curves,
Bjontegaard rate deltas, and the quad-tree reconstruction-mode search.

The quad-tree machinery serves coders that decode two candidate
reconstructions from one latent.  A per-frame tree picks, block by block,
which candidate to keep; the tree itself is cheap side information.  Side
information accounting: every visited node larger than the minimum block
spends one split flag, and every leaf spends one mode bit.  A tree built
under this rule is exactly decodable from its bit sequence, and the
dynamic program below is optimal for the induced cost
``J = SSE + lambda * side_bits`` with SSE measured on the 0..255 scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError

PSNR_CAP = 99.0


def psnr(a, b, cap=PSNR_CAP):
    """Peak signal-to-noise ratio in dB between arrays on the [0, 1] scale.
    Identical inputs (and anything above ``cap``) report ``cap``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, -10.0 * math.log10(mse))


def bits_per_pixel(total_bits, height, width):
    if height <= 0 or width <= 0:
        raise ContractError("frame dimensions must be positive")
    return total_bits / float(height * width)


def frame_select(costs, rates=None):
    """Index of the cheapest candidate.  Ties break toward the lower rate,
    then toward the earlier index."""
    if len(costs) == 0:
        raise ContractError("no candidates")
    if rates is None:
        rates = [0.0] * len(costs)
    if len(rates) != len(costs):
        raise ShapeError("costs and rates must align")
    best = 0
    for i in range(1, len(costs)):
        if costs[i] < costs[best] or (costs[i] == costs[best] and rates[i] < rates[best]):
            best = i
    return best


def frame_hybrid_select(candidates, x, lam):
    """Pick the reconstruction with the lowest rate-distortion cost for a
    whole frame.  ``candidates`` is a list of (reconstruction, rate_bpp)
    pairs; the cost is squared error on the 0..255 scale plus lam times the
    rate.  Returns (index, cost)."""
    x = np.asarray(x, dtype=np.float64)
    costs, rates = [], []
    for recon, rate in candidates:
        recon = np.asarray(recon, dtype=np.float64)
        if recon.shape != x.shape:
            raise ShapeError(f"candidate shape {recon.shape} vs frame {x.shape}")
        mse = float(np.mean(((recon - x) * 255.0) ** 2))
        costs.append(mse + lam * rate)
        rates.append(rate)
    idx = frame_select(costs, rates)
    return idx, costs[idx]


# -- rate-distortion curves -------------------------------------------------

@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float
    label: str = ""


def check_curve(points, min_points=4):
    """A usable curve has at least ``min_points`` samples with strictly
    increasing rate and strictly increasing quality."""
    if len(points) < min_points:
        raise ContractError(f"need at least {min_points} points, got {len(points)}")
    for prev, cur in zip(points, points[1:]):
        if not (cur.bpp > prev.bpp):
            raise ContractError(f"bpp not strictly increasing at {cur.bpp}")
        if not (cur.psnr > prev.psnr):
            raise ContractError(f"psnr not strictly increasing at {cur.psnr}")
    for p in points:
        if p.bpp <= 0:
            raise ContractError("bpp must be positive")


def bd_rate(reference, test):
    """Average rate difference of ``test`` against ``reference`` in percent,
    from cubic fits of log10(rate) over quality integrated across the
    overlapping quality range.  Negative means the test curve spends fewer
    bits at equal quality."""
    check_curve(reference)
    check_curve(test)
    qr = np.array([p.psnr for p in reference], dtype=np.float64)
    rr = np.log10([p.bpp for p in reference])
    qt = np.array([p.psnr for p in test], dtype=np.float64)
    rt = np.log10([p.bpp for p in test])
    lo = max(qr.min(), qt.min())
    hi = min(qr.max(), qt.max())
    if not (hi > lo):
        raise ContractError(f"quality ranges do not overlap ([{qr.min()}, {qr.max()}] "
                            f"vs [{qt.min()}, {qt.max()}])")
    fit_ref = np.polyfit(qr, rr, 3)
    fit_test = np.polyfit(qt, rt, 3)
    int_ref = np.polyval(np.polyint(fit_ref), [lo, hi])
    int_test = np.polyval(np.polyint(fit_test), [lo, hi])
    avg_diff = ((int_test[1] - int_test[0]) - (int_ref[1] - int_ref[0])) / (hi - lo)
    return 100.0 * (10.0 ** avg_diff - 1.0)


# -- quad-tree mode search --------------------------------------------------

@dataclass
class QTNode:
    y: int
    x: int
    size: int
    mode: str = ""           # "d" or "g" on leaves, "" on split nodes
    children: tuple = ()     # (tl, tr, bl, br) when split
    cost: float = 0.0

    @property
    def is_leaf(self):
        return not self.children


@dataclass
class QTResult:
    roots: tuple
    merged: np.ndarray
    cost: float
    side_bits: int
    mode_d_area: int
    area: int

    @property
    def mode_d_fraction(self):
        return self.mode_d_area / self.area


def _is_pow2(v):
    return v >= 1 and (v & (v - 1)) == 0


def _check_blocks(min_block, max_block):
    if not (_is_pow2(min_block) and _is_pow2(max_block)):
        raise ContractError(f"block sizes must be powers of two, "
                            f"got {min_block}, {max_block}")
    if not (4 <= min_block <= max_block <= 256):
        raise ContractError(f"block range must satisfy 4 <= min <= max <= 256, "
                            f"got [{min_block}, {max_block}]")


def root_block(height, width, max_block):
    """Root tile size: the largest power of two dividing both dimensions,
    clipped to ``max_block``."""
    g = math.gcd(height, width)
    return min(max_block, g & (-g))


def _integral(err):
    out = np.zeros((err.shape[0] + 1, err.shape[1] + 1), dtype=np.float64)
    np.cumsum(err, axis=0, out=out[1:, 1:])
    np.cumsum(out[1:, 1:], axis=1, out=out[1:, 1:])
    return out


def _block_sums(integ, s):
    return (integ[s::s, s::s] - integ[:-s:s, s::s]
            - integ[s::s, :-s:s] + integ[:-s:s, :-s:s])


def _sse_map(x, ref):
    d = (np.asarray(x, dtype=np.float64) - np.asarray(ref, dtype=np.float64)) * 255.0
    return np.sum(d * d, axis=(0, 1))


def quadtree_search(x, cand_d, cand_g, lam, min_block=4, max_block=256):
    """Optimal quad-tree over two candidate reconstructions of ``x``.

    All frames are (1, C, H, W) with H and W divisible by the root tile.
    Ties prefer not splitting, and equal-SSE leaves prefer mode "d".
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"expected a single (1, C, H, W) frame, got {x.shape}")
    if x.shape != np.asarray(cand_d).shape or x.shape != np.asarray(cand_g).shape:
        raise ShapeError("frame and candidates must share a shape")
    _check_blocks(min_block, max_block)
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    h, w = x.shape[2], x.shape[3]
    b = root_block(h, w, max_block)
    if b < min_block:
        raise ContractError(f"{h}x{w} frame cannot be tiled at block size >= {min_block}")

    int_d = _integral(_sse_map(x, cand_d))
    int_g = _integral(_sse_map(x, cand_g))

    sizes = []
    s = min_block
    while s <= b:
        sizes.append(s)
        s *= 2

    levels = {}
    for s in sizes:
        sse_d = _block_sums(int_d, s)
        sse_g = _block_sums(int_g, s)
        mode_g = sse_g < sse_d
        leaf_sse = np.where(mode_g, sse_g, sse_d)
        if s == min_block:
            cost = leaf_sse + lam
            split = np.zeros_like(mode_g)
        else:
            child = levels[s // 2]["cost"]
            split_sum = (child[0::2, 0::2] + child[0::2, 1::2]
                         + child[1::2, 0::2] + child[1::2, 1::2])
            leaf_total = lam + leaf_sse + lam
            split_total = lam + split_sum
            split = split_total < leaf_total
            cost = np.where(split, split_total, leaf_total)
        levels[s] = {"cost": cost, "mode_g": mode_g, "split": split}

    def build(yi, xi, s):
        lvl = levels[s]
        if not lvl["split"][yi, xi]:
            mode = "g" if lvl["mode_g"][yi, xi] else "d"
            return QTNode(y=yi * s, x=xi * s, size=s, mode=mode,
                          cost=float(lvl["cost"][yi, xi]))
        half = s // 2
        kids = tuple(build(2 * yi + dy, 2 * xi + dx, half)
                     for dy in (0, 1) for dx in (0, 1))
        return QTNode(y=yi * s, x=xi * s, size=s, children=kids,
                      cost=float(lvl["cost"][yi, xi]))

    roots = tuple(build(yi, xi, b)
                  for yi in range(h // b) for xi in range(w // b))
    merged = merge_reconstructions(cand_d, cand_g, roots)
    side = sum(count_side_bits(r, min_block) for r in roots)
    d_area = sum(_mode_area(r, "d") for r in roots)
    return QTResult(roots=roots, merged=merged,
                    cost=float(sum(r.cost for r in roots)),
                    side_bits=side, mode_d_area=d_area, area=h * w)


def count_side_bits(node, min_block):
    bits = 1 if node.size > min_block else 0
    if node.is_leaf:
        return bits + 1
    return bits + sum(count_side_bits(c, min_block) for c in node.children)


def _mode_area(node, mode):
    if node.is_leaf:
        return node.size * node.size if node.mode == mode else 0
    return sum(_mode_area(c, mode) for c in node.children)


def merge_reconstructions(cand_d, cand_g, roots):
    cand_d = np.asarray(cand_d)
    cand_g = np.asarray(cand_g)
    out = np.empty_like(cand_d)

    def fill(node):
        if node.is_leaf:
            src = cand_d if node.mode == "d" else cand_g
            out[:, :, node.y:node.y + node.size, node.x:node.x + node.size] = \
                src[:, :, node.y:node.y + node.size, node.x:node.x + node.size]
        else:
            for c in node.children:
                fill(c)

    for r in roots:
        fill(r)
    return out


def serialize_quadtree(roots, min_block):
    """Pre-order bit sequence: a split flag on every node above the minimum
    size, then a mode bit (0 = d, 1 = g) on leaves, children in raster
    order.  Roots follow in raster order."""
    bits = []

    def walk(node):
        if node.size > min_block:
            bits.append(0 if node.is_leaf else 1)
        if node.is_leaf:
            bits.append(0 if node.mode == "d" else 1)
        else:
            for c in node.children:
                walk(c)

    for r in roots:
        walk(r)
    return bits


def parse_quadtree(bits, height, width, min_block, max_block=256):
    """Inverse of serialize_quadtree for a height x width canvas.
    Returns (roots, bits_consumed)."""
    _check_blocks(min_block, max_block)
    b = root_block(height, width, max_block)
    if b < min_block:
        raise ContractError(f"{height}x{width} canvas cannot be tiled at "
                            f"block size >= {min_block}")
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(bits):
            raise ContractError("quad-tree bit sequence ended early")
        v = bits[pos]
        pos += 1
        if v not in (0, 1):
            raise ContractError(f"quad-tree bits must be 0/1, got {v!r}")
        return v

    def read(y, x, s):
        split = take() if s > min_block else 0
        if split:
            half = s // 2
            kids = tuple(read(y + dy * half, x + dx * half, half)
                         for dy in (0, 1) for dx in (0, 1))
            return QTNode(y=y, x=x, size=s, children=kids)
        return QTNode(y=y, x=x, size=s, mode="g" if take() else "d")

    roots = tuple(read(yi * b, xi * b, b)
                  for yi in range(height // b) for xi in range(width // b))
    return roots, pos
