"""Binary PGM/PPM reading and writing, plus optional PNG through Pillow."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import ImageFormatError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _parse_netpbm(buf: bytes, path):
    """Return (magic, width, height, maxval, payload offset)."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated netpbm header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed netpbm header") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: non-positive image size {width}x{height}")
    if not 0 < maxval < 256:
        raise ImageFormatError(f"{path}: only 8-bit netpbm is supported (maxval {maxval})")
    return magic, width, height, maxval, pos


def read_netpbm(path) -> np.ndarray:
    """Read a P5 (gray, HxW) or P6 (RGB, HxWx3) file as uint8."""
    buf = Path(path).read_bytes()
    if buf[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: not a binary PGM/PPM file")
    magic, width, height, maxval, pos = _parse_netpbm(buf, path)
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raster = buf[pos : pos + need]
    if len(raster) != need:
        raise ImageFormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    img = np.frombuffer(raster, dtype=np.uint8)
    img = img.reshape(height, width) if channels == 1 else img.reshape(height, width, 3)
    if maxval != 255:
        img = np.floor(img.astype(np.float64) * 255 / maxval + 0.5).astype(np.uint8)
    return img.copy()


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError:
        raise ImageFormatError(f"{path}: PNG support needs Pillow (pip install 'artifact[png]')") from None
    with Image.open(path) as im:
        if im.mode in ("L", "P", "1", "I;16", "I"):
            if im.mode != "L":
                im = im.convert("L")
            return np.asarray(im, dtype=np.uint8).copy()
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_image(path) -> np.ndarray:
    """Read PGM, PPM or PNG. Grayscale comes back HxW, color HxWx3."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc.strerror}") from None
    if head.startswith(PNG_SIGNATURE):
        return _read_png(path)
    if head[:2] in (b"P5", b"P6"):
        return read_netpbm(path)
    raise ImageFormatError(f"{path}: unsupported image format (need P5/P6 netpbm or PNG)")


def probe_image(path) -> None:
    """Cheap readability check: the header parses and the raster is complete."""
    read_image(path)


def _write(path, header: bytes, pixels: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
    os.replace(tmp, path)


def write_pgm(path, img) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ImageFormatError(f"PGM needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    _write(path, f"P5\n{w} {h}\n255\n".encode("ascii"), img)


def write_ppm(path, img) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ImageFormatError(f"PPM needs an HxWx3 uint8 array, got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    _write(path, f"P6\n{w} {h}\n255\n".encode("ascii"), img)


def write_png(path, img) -> None:
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path)


def write_image(path, img) -> None:
    """Pick the writer from the suffix: .pgm, .ppm or .png."""
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        write_png(path, img)
    elif suffix == ".ppm" or np.ndim(img) == 3:
        write_ppm(path, img)
    else:
        write_pgm(path, img)
