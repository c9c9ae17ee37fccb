"""Image and raw-array artifact writers.

Silhouettes go out as 8-bit grayscale PNG; embedding images as a 3-channel
PCA preview.  Every visual artifact can also be dumped as raw 64-bit
little-endian floats next to a small JSON shape header, which is what the
tests compare, since PNG quantizes.
"""

from __future__ import annotations

import json

import numpy as np
from PIL import Image

from .errors import IoError, SchemaError


def save_gray_png(image: np.ndarray, path: str) -> None:
    """Write a float image in [0, 1] as 8-bit grayscale."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise SchemaError(f"grayscale image must be 2d, got {img.shape}")
    quant = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quant, mode="L").save(path, format="PNG")


def save_rgb_png(image: np.ndarray, path: str) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise SchemaError(f"rgb image must be (h, w, 3), got {img.shape}")
    quant = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quant, mode="RGB").save(path, format="PNG")


def embedding_rgb(embedding_image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Reduce a (H, W, D) embedding image to an RGB preview.

    Masked pixels are projected onto their three leading principal
    components (signs fixed by forcing each component's largest-magnitude
    loading positive, so the preview is a pure function of the data) and
    min-max scaled per channel; background stays black.
    """
    img = np.asarray(embedding_image, dtype=np.float64)
    msk = np.asarray(mask, dtype=bool)
    if img.ndim != 3:
        raise SchemaError(f"embedding image must be (h, w, d), got {img.shape}")
    if msk.shape != img.shape[:2]:
        raise SchemaError("mask shape must match the image plane")
    out = np.zeros((*img.shape[:2], 3))
    flat = img[msk]
    if flat.shape[0] == 0:
        return out
    centered = flat - flat.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    n_comp = min(3, vt.shape[0])
    proj = np.zeros((flat.shape[0], 3))
    for k in range(n_comp):
        v = vt[k]
        pivot = np.argmax(np.abs(v))
        if v[pivot] < 0:
            v = -v
        proj[:, k] = centered @ v
    lo = proj.min(axis=0)
    span = proj.max(axis=0) - lo
    span[span == 0] = 1.0
    out[msk] = (proj - lo) / span
    return out


def dump_raw(arr: np.ndarray, path: str) -> None:
    """Raw little-endian float64 bytes plus a `<path>.json` shape header."""
    data = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(data.tobytes())
    with open(path + ".json", "w") as fh:
        json.dump({"shape": list(data.shape), "dtype": "<f8"}, fh)
        fh.write("\n")


def load_raw(path: str) -> np.ndarray:
    try:
        with open(path + ".json") as fh:
            meta = json.load(fh)
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read raw dump {path}: {exc}") from exc
    shape = tuple(int(v) for v in meta["shape"])
    expected = int(np.prod(shape)) * 8
    if len(blob) != expected:
        raise IoError(
            f"{path}: raw dump holds {len(blob)} bytes, header implies {expected}"
        )
    return np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
