"""8-bit grayscale image I/O: native PGM (binary P5), PNG via Pillow."""

from __future__ import annotations

import os

import numpy as np


def write_pgm(path, img: np.ndarray):
    """Write a uint8 2-d array as binary PGM."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"write_pgm: expected 2-d image, got shape {img.shape}")
    img = img.astype(np.uint8, copy=False)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    # header: magic, width, height, maxval separated by whitespace/comments
    tokens = []
    i = 0
    while len(tokens) < 4:
        if raw[i:i + 1] == b"#":
            i = raw.index(b"\n", i) + 1
            continue
        j = i
        while j < len(raw) and raw[j:j + 1] not in b" \t\r\n":
            j += 1
        if j > i:
            tokens.append(raw[i:j])
        i = j + 1
    if tokens[0] != b"P5":
        raise ValueError(f"read_pgm: unsupported magic {tokens[0]!r} in {path}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"read_pgm: only 8-bit PGM supported, maxval={maxval}")
    data = np.frombuffer(raw[i:i + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"read_pgm: truncated payload in {path}")
    return data.reshape(h, w).copy()


def read_frame(path) -> np.ndarray:
    """Read a silhouette frame (PGM or PNG) as a uint8 grayscale array."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pgm":
        return read_pgm(path)
    if ext == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    raise ValueError(f"read_frame: unsupported extension {ext!r} ({path})")
