"""Minimal 8-bit PNG and binary PPM/PGM reading and writing."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

PNG_SIG = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}


class ImageDecodeError(ValueError):
    pass


# -- PNG ----------------------------------------------------------------------

def _chunks(buf: bytes):
    pos = len(PNG_SIG)
    while pos < len(buf):
        if pos + 8 > len(buf):
            raise ImageDecodeError("truncated chunk header")
        length, kind = struct.unpack(">I4s", buf[pos:pos + 8])
        data = buf[pos + 8:pos + 8 + length]
        crc_bytes = buf[pos + 8 + length:pos + 12 + length]
        if len(data) != length or len(crc_bytes) != 4:
            raise ImageDecodeError(f"truncated {kind!r} chunk")
        if zlib.crc32(kind + data) & 0xFFFFFFFF != struct.unpack(">I", crc_bytes)[0]:
            raise ImageDecodeError(f"crc mismatch in {kind!r} chunk")
        yield kind, data
        pos += 12 + length


def _paeth(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    p = a + b - c
    pa, pb, pc = np.abs(p - a), np.abs(p - b), np.abs(p - c)
    return np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))


def _unfilter(raw: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    if len(raw) < h * (stride + 1):
        raise ImageDecodeError("image data shorter than declared size")
    rows = np.frombuffer(raw, dtype=np.uint8, count=h * (stride + 1)).reshape(h, stride + 1)
    out = np.zeros((h, stride), dtype=np.int32)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(h):
        ftype = rows[y, 0]
        line = rows[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            # these depend on already-decoded bytes to the left
            cur = np.zeros(stride, dtype=np.int32)
            for x in range(stride):
                left = cur[x - bpp] if x >= bpp else 0
                if ftype == 1:
                    pred = left
                elif ftype == 3:
                    pred = (left + prev[x]) >> 1
                else:
                    upleft = prev[x - bpp] if x >= bpp else 0
                    pred = int(_paeth(np.int32(left), prev[x], np.int32(upleft)))
                cur[x] = (line[x] + pred) & 0xFF
        else:
            raise ImageDecodeError(f"unknown filter type {ftype} on row {y}")
        out[y] = cur
        prev = cur
    return out.astype(np.uint8)


def decode_png(buf: bytes) -> np.ndarray:
    """Decode to uint8 ``[H, W, C]``; palette images are expanded to RGB(A)."""
    if not buf.startswith(PNG_SIG):
        raise ImageDecodeError("not a PNG file")
    header = None
    palette = trns = None
    idat = []
    for kind, data in _chunks(buf):
        if kind == b"IHDR":
            header = struct.unpack(">IIBBBBB", data)
        elif kind == b"PLTE":
            palette = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3)
        elif kind == b"tRNS":
            trns = np.frombuffer(data, dtype=np.uint8)
        elif kind == b"IDAT":
            idat.append(data)
        elif kind == b"IEND":
            break
    if header is None:
        raise ImageDecodeError("missing IHDR")
    w, h, depth, ctype, _, _, interlace = header
    if depth != 8:
        raise ImageDecodeError(f"only 8-bit PNG is supported, got bit depth {depth}")
    if ctype not in _CHANNELS:
        raise ImageDecodeError(f"unknown colour type {ctype}")
    if interlace:
        raise ImageDecodeError("interlaced PNG is not supported")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageDecodeError(f"corrupt image data: {exc}") from None
    ch = _CHANNELS[ctype]
    pix = _unfilter(raw, h, w * ch, ch).reshape(h, w, ch)
    if ctype == 3:
        if palette is None:
            raise ImageDecodeError("palette image without PLTE")
        idx = pix[..., 0]
        if idx.max(initial=0) >= len(palette):
            raise ImageDecodeError("palette index out of range")
        rgb = palette[idx]
        if trns is not None:
            alpha = np.full(len(palette), 255, dtype=np.uint8)
            alpha[:len(trns)] = trns[:len(palette)]
            return np.concatenate([rgb, alpha[idx][..., None]], axis=-1)
        return rgb
    return pix


def _chunk(kind: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF)


def encode_png(pix: np.ndarray) -> bytes:
    """Encode uint8 ``[H, W]`` or ``[H, W, 1|2|3|4]`` with filter type 0 on every row."""
    pix = np.asarray(pix)
    if pix.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {pix.dtype}")
    if pix.ndim == 2:
        pix = pix[..., None]
    h, w, ch = pix.shape
    ctype = {1: 0, 2: 4, 3: 2, 4: 6}.get(ch)
    if ctype is None:
        raise ValueError(f"cannot encode {ch} channels")
    rows = np.concatenate([np.zeros((h, 1), np.uint8), pix.reshape(h, w * ch)], axis=1)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, ctype, 0, 0, 0)
    return (PNG_SIG + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(rows.tobytes(), 9))
            + _chunk(b"IEND", b""))


# -- PPM / PGM ------------------------------------------------------------------

def decode_pnm(buf: bytes) -> np.ndarray:
    """Binary P5 (grey) or P6 (RGB), maxval up to 255."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageDecodeError("not a binary PGM/PPM file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageDecodeError("malformed PNM header")
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace before the raster
    w, h, maxval = fields
    if not 0 < maxval < 256:
        raise ImageDecodeError(f"unsupported maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    data = buf[pos:pos + w * h * ch]
    if len(data) != w * h * ch:
        raise ImageDecodeError("truncated PNM raster")
    pix = np.frombuffer(data, dtype=np.uint8).reshape(h, w, ch)
    if maxval != 255:
        pix = np.round(pix.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return pix


def encode_pnm(pix: np.ndarray) -> bytes:
    pix = np.asarray(pix)
    if pix.ndim == 2:
        pix = pix[..., None]
    h, w, ch = pix.shape
    if ch not in (1, 3) or pix.dtype != np.uint8:
        raise ValueError("PNM output needs uint8 grey or RGB pixels")
    magic = b"P6" if ch == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode() + pix.tobytes()


# -- float images ---------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """Read PNG/PPM/PGM as float64 RGB ``[H, W, 3]`` in [0, 1] (alpha dropped, grey expanded)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ImageDecodeError(f"cannot read {path}: {exc}") from None
    if buf.startswith(PNG_SIG):
        pix = decode_png(buf)
    elif buf[:2] in (b"P5", b"P6"):
        pix = decode_pnm(buf)
    else:
        raise ImageDecodeError(f"{path}: unrecognised image format")
    if pix.shape[-1] in (2, 4):
        pix = pix[..., :-1]
    if pix.shape[-1] == 1:
        pix = np.repeat(pix, 3, axis=-1)
    return pix.astype(np.float64) / 255.0


def write_image(path, img: np.ndarray) -> None:
    """Write a float image in [0, 1] (values are clipped); format follows the extension."""
    pix = to_uint8(np.asarray(img))
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        data = encode_png(pix)
    elif suffix in (".ppm", ".pgm", ".pnm"):
        data = encode_pnm(pix)
    else:
        raise ValueError(f"unsupported output extension {suffix!r}")
    Path(path).write_bytes(data)
