"""PFM images and CSV tables.

In memory a :class:`PfmImage` is a top-down ``(H, W, C)`` float32 array;
files store rows bottom-up as the format requires. Writing is always
little-endian (negative scale); reading honours either byte order.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np


class PfmError(ValueError):
    pass


class PfmHeaderError(PfmError):
    pass


class PfmTruncatedError(PfmError):
    pass


@dataclass
class PfmImage:
    data: np.ndarray  # (H, W, C) float32, C in {1, 3}, top row first
    scale: float = -1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"PFM data must be (H, W, 1|3), got {data.shape}")
        if self.scale == 0 or not math.isfinite(self.scale):
            raise ValueError("PFM scale must be finite and non-zero")
        self.data = data

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


def write_pfm(path, img: PfmImage | np.ndarray) -> None:
    if not isinstance(img, PfmImage):
        img = PfmImage(img)
    magic = b"PF" if img.channels == 3 else b"Pf"
    scale = -abs(img.scale)
    header = magic + b"\n" + f"{img.width} {img.height}\n".encode() + f"{scale:g}\n".encode()
    payload = np.ascontiguousarray(img.data[::-1], dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf) and buf[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def parse_pfm(buf: bytes) -> PfmImage:
    magic, pos = _read_token(buf, 0)
    if magic not in (b"PF", b"Pf"):
        raise PfmHeaderError(f"malformed header: bad magic {magic[:8]!r}")
    tokens = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        tokens.append(tok)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PfmHeaderError("malformed header: missing newline after scale")
    pos += 1  # the single whitespace byte that ends the header
    try:
        width, height = int(tokens[0]), int(tokens[1])
        scale = float(tokens[2])
    except ValueError:
        raise PfmHeaderError(f"malformed header: {b' '.join(tokens)!r}") from None
    if width <= 0 or height <= 0 or scale == 0 or not math.isfinite(scale):
        raise PfmHeaderError(f"malformed header: width={width} height={height} scale={scale}")
    channels = 3 if magic == b"PF" else 1
    need = width * height * channels * 4
    payload = buf[pos:]
    if len(payload) < need:
        raise PfmTruncatedError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload[:need], dtype=dtype).reshape(height, width, channels)
    return PfmImage(data[::-1].astype(np.float32), scale)


def read_pfm(path) -> PfmImage:
    with open(path, "rb") as fh:
        return parse_pfm(fh.read())


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest string that round-trips; at most 17 significant digits
    return str(v)


def write_csv(path, headers, rows) -> None:
    rows = [list(r) for r in rows]
    if any(len(r) != len(headers) for r in rows):
        raise ValueError("every row must have one value per header")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(headers)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
