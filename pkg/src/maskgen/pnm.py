"""Binary PGM (P5) / PPM (P6) readers and writers.

Masks are stored as P5 with 0 = background and 255 = foreground; any nonzero
value is read back as foreground. Images are P6 RGB. A single comment line may
be embedded after the magic (used to stamp artifacts with a run-manifest hash).
"""

from __future__ import annotations

import numpy as np

from .validation import ValidationError, as_binary_mask


def _read_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise ValidationError(f"expected {magic.decode()} file, got magic {data[:2]!r}")
    pos = len(magic)
    fields = []
    comments = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ValidationError("truncated PNM header")
        if data[pos : pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comments.append(data[pos + 1 : end].strip().decode("ascii", "replace"))
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = fields
    if maxval <= 0 or maxval > 255:
        raise ValidationError(f"unsupported PNM maxval {maxval}")
    return width, height, maxval, pos, comments


def read_pgm(path) -> np.ndarray:
    """Read a P5 file as a (H, W) uint8 array of raw gray values."""
    data = open(path, "rb").read()
    width, height, _, pos, _ = _read_header(data, b"P5")
    raster = np.frombuffer(data, np.uint8, count=height * width, offset=pos)
    return raster.reshape(height, width).copy()


def read_mask(path) -> np.ndarray:
    """Read a P5 mask; any nonzero pixel counts as foreground."""
    return (read_pgm(path) > 0).astype(np.uint8)


def write_pgm(path, gray: np.ndarray, comment: str | None = None) -> None:
    gray = np.asarray(gray, np.uint8)
    if gray.ndim != 2:
        raise ValidationError(f"PGM raster must be 2D, got shape {gray.shape}")
    header = f"P5\n{'# ' + comment + chr(10) if comment else ''}{gray.shape[1]} {gray.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(gray.tobytes())


def write_mask(path, mask, comment: str | None = None) -> None:
    mask = as_binary_mask(mask)
    write_pgm(path, mask * np.uint8(255), comment=comment)


def read_ppm(path) -> np.ndarray:
    """Read a P6 file as a (H, W, 3) uint8 array."""
    data = open(path, "rb").read()
    width, height, _, pos, _ = _read_header(data, b"P6")
    raster = np.frombuffer(data, np.uint8, count=height * width * 3, offset=pos)
    return raster.reshape(height, width, 3).copy()


def write_ppm(path, image: np.ndarray, comment: str | None = None) -> None:
    image = np.asarray(image, np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"PPM raster must be (H, W, 3), got shape {image.shape}")
    header = f"P6\n{'# ' + comment + chr(10) if comment else ''}{image.shape[1]} {image.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(image.tobytes())


def read_image(path) -> np.ndarray:
    """Read P5 or P6 as (H, W, 3) RGB, replicating gray to three channels."""
    data = open(path, "rb").read()
    if data.startswith(b"P6"):
        return read_ppm(path)
    gray = read_pgm(path)
    return np.repeat(gray[:, :, None], 3, axis=2)
