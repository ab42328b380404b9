"""Small shared helpers: seeded named RNG streams and image codecs."""
from __future__ import annotations

import base64
import hashlib
import io

import numpy as np
from PIL import Image


def stream(seed: int, *purpose) -> np.random.Generator:
    """Independent RNG stream keyed by (seed, purpose...).

    Adding a new consumer with a different purpose tuple never perturbs
    existing streams.
    """
    digest = hashlib.blake2s(repr((int(seed),) + tuple(purpose)).encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def to_uint8_image(img: np.ndarray) -> np.ndarray:
    """Float image in [0, 1] (H,W) or (H,W,3) -> uint8."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8)


def image_to_png_b64(img: np.ndarray) -> str:
    """Encode a float [0,1] or uint8 image as base64 PNG."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = to_uint8_image(arr)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def mask_to_png16_b64(labels: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(labels).astype(np.uint16), mode="I;16").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def png_b64_to_array(data: str) -> np.ndarray:
    img = Image.open(io.BytesIO(base64.b64decode(data)))
    return np.asarray(img)
