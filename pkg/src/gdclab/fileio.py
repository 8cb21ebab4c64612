"""Binary formats (checkpoints, bitstream containers), image I/O and the
plain-text experiment config.

Everything is little-endian and self-delimiting: total lengths are
derivable from headers alone, and parsers reject bad magics, truncation
and trailing garbage rather than guessing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .errors import ContractError, FormatError, ShapeError, StreamError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"GDCK"
CONTAINER_MAGIC = b"GDCB"
FORMAT_VERSION = 1

CODER_KINDS = ("diff", "codecnet", "gdc", "xgdc")

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise StreamError(f"truncated: wanted {n} bytes at offset {self.pos}, "
                              f"have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def done(self):
        if self.pos != len(self.data):
            raise StreamError(f"{len(self.data) - self.pos} trailing bytes after payload")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(arrays):
    """Serialize an ordered name -> array mapping. Arrays must be rank-4
    float32/float64; values are stored raw little-endian."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<II", FORMAT_VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise ContractError(f"checkpoint entry {name!r}: unsupported dtype {arr.dtype}")
        if arr.ndim != 4:
            raise ShapeError(f"checkpoint entry {name!r}: rank {arr.ndim} != 4")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim)
        out += struct.pack("<4I", *arr.shape)
        out += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    return bytes(out)


def parse_checkpoint(data):
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, count = r.unpack("II")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode("utf-8")
        tag, rank = r.unpack("BB")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype tag {tag}")
        if rank != 4:
            raise FormatError(f"entry {name!r}: rank {rank} != 4")
        dims = r.unpack("4I")
        dtype = _TAG_DTYPES[tag]
        n_bytes = int(np.prod(dims)) * dtype.itemsize
        raw = r.take(n_bytes)
        arrays[name] = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
    r.done()
    return arrays


def save_checkpoint(path, arrays):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(arrays))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())


# ---------------------------------------------------------------------------
# bitstream container
# ---------------------------------------------------------------------------

def pack_bits(bits):
    """Pack an iterable of 0/1 into bytes, MSB first."""
    bits = list(bits)
    out = bytearray((len(bits) + 7) // 8)
    for i, b in enumerate(bits):
        if b:
            out[i >> 3] |= 0x80 >> (i & 7)
    return bytes(out)


def unpack_bits(data, count):
    if len(data) != (count + 7) // 8:
        raise StreamError(f"bit block: {len(data)} bytes cannot hold {count} bits exactly")
    return [(data[i >> 3] >> (7 - (i & 7))) & 1 for i in range(count)]


@dataclass
class Payload:
    """One coded tensor: support bounds plus the range-coder byte stream."""
    stream: bytes
    lo: int
    hi: int
    symbol_count: int = 0
    est_bits: float = 0.0

    def to_bytes(self):
        if not -32768 <= self.lo <= 32767 or not -32768 <= self.hi <= 32767:
            raise ContractError(f"support [{self.lo}, {self.hi}] exceeds i16")
        return struct.pack("<hh", self.lo, self.hi) + self.stream

    @classmethod
    def from_bytes(cls, data):
        if len(data) < 4:
            raise StreamError("payload shorter than its support header")
        lo, hi = struct.unpack("<hh", data[:4])
        return cls(stream=data[4:], lo=lo, hi=hi)


@dataclass
class BitstreamContainer:
    """The single-file coded representation of one frame."""
    kind: str
    width: int
    height: int
    payload_z: Payload
    payload_y: Payload
    lambda_idx: int = 255
    qt_bits: list = field(default=None)
    qt_min_block: int = 0
    qt_max_block: int = 0

    def total_bits(self):
        return 8 * len(self.to_bytes())

    def to_bytes(self):
        if self.kind not in CODER_KINDS:
            raise ContractError(f"unknown coder kind {self.kind!r}")
        if not (0 < self.width <= 0xFFFF and 0 < self.height <= 0xFFFF):
            raise ContractError(f"frame size {self.width}x{self.height} out of range")
        flags = 1 if self.qt_bits is not None else 0
        zb = self.payload_z.to_bytes()
        yb = self.payload_y.to_bytes()
        out = bytearray()
        out += CONTAINER_MAGIC
        out += struct.pack("<I", FORMAT_VERSION)
        out += struct.pack("<BBHHB", CODER_KINDS.index(self.kind), self.lambda_idx,
                           self.width, self.height, flags)
        out += struct.pack("<I", len(zb)) + zb
        out += struct.pack("<I", len(yb)) + yb
        if self.qt_bits is not None:
            if len(self.qt_bits) > 0xFFFF:
                raise ContractError(f"{len(self.qt_bits)} side-info bits exceed u16")
            if not (0 < self.qt_min_block <= self.qt_max_block <= 0xFFFF):
                raise ContractError(f"bad quad-tree block bounds "
                                    f"[{self.qt_min_block}, {self.qt_max_block}]")
            out += struct.pack("<HH", self.qt_min_block, self.qt_max_block)
            out += struct.pack("<H", len(self.qt_bits)) + pack_bits(self.qt_bits)
        return bytes(out)

    @classmethod
    def from_bytes(cls, data):
        r = _Reader(data)
        if r.take(4) != CONTAINER_MAGIC:
            raise FormatError("not a bitstream container (bad magic)")
        (version,) = r.unpack("I")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported container version {version}")
        kind_idx, lambda_idx, width, height, flags = r.unpack("BBHHB")
        if kind_idx >= len(CODER_KINDS):
            raise FormatError(f"unknown coder kind tag {kind_idx}")
        if flags & ~1:
            raise FormatError(f"unknown flag bits 0x{flags:02x}")
        (zlen,) = r.unpack("I")
        pz = Payload.from_bytes(r.take(zlen))
        (ylen,) = r.unpack("I")
        py = Payload.from_bytes(r.take(ylen))
        qt = None
        qt_min = qt_max = 0
        if flags & 1:
            qt_min, qt_max = r.unpack("HH")
            (nbits,) = r.unpack("H")
            qt = unpack_bits(r.take((nbits + 7) // 8), nbits)
        r.done()
        return cls(kind=CODER_KINDS[kind_idx], width=width, height=height,
                   payload_z=pz, payload_y=py, lambda_idx=lambda_idx, qt_bits=qt,
                   qt_min_block=qt_min, qt_max_block=qt_max)


def save_container(path, container):
    with open(path, "wb") as f:
        f.write(container.to_bytes())


def load_container(path):
    with open(path, "rb") as f:
        return BitstreamContainer.from_bytes(f.read())


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def _read_ppm_token(data, pos):
    while True:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of pixmap header")
    return data[start:pos], pos


def parse_ppm(data):
    """Binary portable pixmap (P6, maxval 255) -> uint8 array (h, w, 3)."""
    if data[:2] != b"P6":
        raise FormatError("not a binary portable pixmap (want P6)")
    pos = 2
    vals = []
    for _ in range(3):
        tok, pos = _read_ppm_token(data, pos)
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 255:
        raise FormatError(f"only 8-bit pixmaps supported, maxval={maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise StreamError(f"pixmap data truncated: want {need} bytes, have {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


def ppm_bytes(pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"pixmap wants (h, w, 3) uint8, got {pixels.shape}")
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def pixels_to_tensor(pixels):
    """uint8 (h, w, 3) -> float tensor (1, 3, h, w) in [0, 1]."""
    arr = np.asarray(pixels, dtype=np.float32) / np.float32(255.0)
    return Tensor(arr.transpose(2, 0, 1)[None])


def tensor_to_pixels(t):
    """Float tensor (1, 3, h, w) -> uint8 (h, w, 3), clipped and rounded
    half away from zero."""
    data = np.asarray(t.data if isinstance(t, Tensor) else t)
    if data.ndim != 4 or data.shape[0] != 1 or data.shape[1] != 3:
        raise ShapeError(f"expected (1, 3, h, w), got {data.shape}")
    scaled = np.clip(data[0].transpose(1, 2, 0), 0.0, 1.0) * 255.0
    return np.copysign(np.floor(np.abs(scaled) + 0.5), scaled).astype(np.uint8)


def load_image(path):
    """Read a .ppm (always available) or .png (needs pillow) as a tensor."""
    path = str(path)
    if path.endswith(".ppm"):
        with open(path, "rb") as f:
            return pixels_to_tensor(parse_ppm(f.read()))
    if path.endswith(".png"):
        try:
            from PIL import Image
        except ImportError as e:
            raise FormatError("png support needs the pillow package") from e
        with Image.open(path) as im:
            return pixels_to_tensor(np.asarray(im.convert("RGB")))
    raise FormatError(f"unsupported image format: {path}")


def write_image(path, t):
    path = str(path)
    pixels = tensor_to_pixels(t)
    if path.endswith(".ppm"):
        with open(path, "wb") as f:
            f.write(ppm_bytes(pixels))
        return
    if path.endswith(".png"):
        try:
            from PIL import Image
        except ImportError as e:
            raise FormatError("png support needs the pillow package") from e
        Image.fromarray(pixels).save(path)
        return
    raise FormatError(f"unsupported image format: {path}")


# ---------------------------------------------------------------------------
# experiment config
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Flat key = value configuration for CLI runs."""
    coder: str = "diff"
    channels: int = 3
    core_width: int = 64
    latent: int = 96
    hyper_latent: int = 32
    pred_width: int = 64
    features: int = 0          # 0 = per-kind default (3 for gdc, 16 for xgdc)
    ctx_width: int = 16
    kernel: int = 5
    strides: str = "2,2,2,2"
    lmbda: float = 1024.0
    steps: int = 2000
    lr: float = 1e-4
    seed: int = 0
    patch: int = 32
    pairs: int = 200

    @classmethod
    def from_text(cls, text):
        known = {f.name: f.type for f in dc_fields(cls)}
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise FormatError(f"config line {lineno}: expected key = value, got {line!r}")
            key, _, value = body.partition("=")
            key = key.strip().replace("-", "_")
            value = value.strip()
            if key not in known:
                raise FormatError(f"config line {lineno}: unknown key {key!r}")
            current = getattr(cfg, key)
            try:
                if isinstance(current, bool):
                    parsed = value.lower() in ("1", "true", "yes")
                elif isinstance(current, int):
                    parsed = int(value)
                elif isinstance(current, float):
                    parsed = float(value)
                else:
                    parsed = value
            except ValueError as e:
                raise FormatError(f"config line {lineno}: bad value for {key!r}: {value!r}") from e
            setattr(cfg, key, parsed)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_text(f.read())

    def to_text(self):
        self.validate()
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in dc_fields(self)]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    def validate(self):
        if self.coder not in CODER_KINDS:
            raise ContractError(f"coder must be one of {CODER_KINDS}, got {self.coder!r}")
        if self.lmbda <= 0:
            raise ContractError("lmbda must be positive")
        if self.steps < 0 or self.seed < 0:
            raise ContractError("steps and seed must be non-negative")
        for name in ("channels", "core_width", "latent", "hyper_latent",
                     "pred_width", "ctx_width", "kernel", "patch", "pairs"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.kernel % 2 == 0:
            raise ContractError("kernel must be odd")
        try:
            strides = self.stride_tuple()
        except ValueError as e:
            raise ContractError(f"bad strides {self.strides!r}") from e
        if any(s < 1 for s in strides):
            raise ContractError("strides must be >= 1")

    def stride_tuple(self):
        return tuple(int(s) for s in self.strides.split(","))
