"""File formats: PFM float maps, 8-bit / 1-bit PNG, and voxel-field checkpoints."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .field import VoxelField


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian 32-bit PFM; (H, W) writes ``Pf``, (H, W, 3) writes ``PF``."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError("PFM stores (H, W) or (H, W, 3) arrays")
    H, W = data.shape[:2]
    body = np.flipud(data).astype("<f4").tobytes()  # PFM rows run bottom to top
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{W} {H}\n".encode() + b"-1.0\n" + body)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ValueError(f"{path} is not a PFM file")
        W, H = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if tag == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype, count=W * H * channels)
    shape = (H, W, 3) if channels == 3 else (H, W)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_png(path, image: np.ndarray) -> None:
    """8-bit PNG of linear values in [0, 1] (no gamma)."""
    image = np.asarray(image, dtype=np.float64)
    q = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "1":
            return np.asarray(im, dtype=bool)
        im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("1"), dtype=bool)


CHANNEL_LAYOUT = [
    {"name": "density_raw", "channels": 1, "activation": "density_scale * softplus"},
    {"name": "color_raw", "channels": 3, "activation": "sigmoid"},
    {"name": "relevance_raw", "channels": 1, "activation": "sigmoid"},
]


def save_field(directory, field: VoxelField) -> Path:
    """Write ``field.json`` (header) and ``field.bin`` (little-endian float32, C order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": list(field.dims),
        "bbox_min": field.bbox_min.tolist(),
        "bbox_max": field.bbox_max.tolist(),
        "density_scale": field.density_scale,
        "dtype": "<f4",
        "layout": CHANNEL_LAYOUT,
    }
    (directory / "field.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    flat = np.concatenate(
        [field.density_raw.ravel(), field.color_raw.ravel(), field.relevance_raw.ravel()]
    )
    (directory / "field.bin").write_bytes(flat.astype("<f4").tobytes())
    return directory


def load_field(directory) -> VoxelField:
    directory = Path(directory)
    header = json.loads((directory / "field.json").read_text())
    dims = tuple(header["dims"])
    n = int(np.prod(dims))
    flat = np.frombuffer((directory / "field.bin").read_bytes(), dtype="<f4").astype(np.float64)
    if flat.size != 5 * n:
        raise ValueError("checkpoint size does not match its header")
    density = flat[:n].reshape(dims)
    color = flat[n : 4 * n].reshape(dims + (3,))
    relevance = flat[4 * n :].reshape(dims)
    return VoxelField(density, color, relevance, header["bbox_min"], header["bbox_max"],
                      header["density_scale"])
