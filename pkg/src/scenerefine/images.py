"""Depth, normal and label image files (PGM, PFM, 16-bit PNG)."""

from __future__ import annotations

import re

import numpy as np
from PIL import Image


def save_pgm16(path, depth_m) -> None:
    """16-bit binary PGM in millimetres (values clipped to the uint16 range)."""
    mm = np.clip(np.rint(np.asarray(depth_m, float) * 1000.0), 0, 65535).astype(">u2")
    h, w = mm.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(mm.tobytes())


def load_pgm16(path) -> np.ndarray:
    """Depth in metres from a binary PGM written in millimetres."""
    data = open(path, "rb").read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(x) for x in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    img = np.frombuffer(data, dtype=dtype, count=w * h, offset=m.end()).reshape(h, w)
    return img.astype(float) / 1000.0


def save_pfm(path, image) -> None:
    """Little-endian PFM; 2D arrays become ``Pf``, ``(h, w, 3)`` arrays ``PF``."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        tag = "Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = "PF"
    else:
        raise ValueError("PFM supports (h, w) or (h, w, 3) images")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{tag}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(img).tobytes())


def load_pfm(path) -> np.ndarray:
    data = open(path, "rb").read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a PFM file")
    tag, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    ch = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(data, dtype=dtype, count=w * h * ch, offset=m.end())
    img = img.reshape((h, w, 3) if ch == 3 else (h, w))
    return np.flipud(img).astype(np.float64)


def save_labels_png(path, labels) -> None:
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() > 65535:
        raise ValueError("labels must fit in uint16")
    Image.fromarray(lab.astype(np.uint16)).save(path, format="PNG")


def load_labels_png(path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.int64)
