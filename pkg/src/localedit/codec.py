"""Encoder/decoder pairs standing in for a latent autoencoder.

``avgpool`` encodes by block averaging and decodes by nearest-neighbour
upsampling, so the decoder's spatial upsampling is exercised without any
learned weights.  Images and latents are ``(H, W, C)`` float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CODEC_KINDS = ("identity", "avgpool")


@dataclass(frozen=True)
class Codec:
    kind: str = "identity"
    factor: int = 1
    channels: int = 3

    def __post_init__(self):
        if self.kind not in CODEC_KINDS:
            raise ValueError(f"unknown codec kind {self.kind!r}")
        if self.factor < 1 or self.channels < 1:
            raise ValueError("factor and channels must be >= 1")
        if self.kind == "identity" and self.factor != 1:
            raise ValueError("identity codec requires factor 1")

    def latent_shape(self, height: int, width: int) -> tuple[int, int]:
        self._check_dims(height, width)
        return height // self.factor, width // self.factor

    def _check_dims(self, height, width):
        if height % self.factor or width % self.factor:
            raise ValueError(
                f"image size {height}x{width} not divisible by codec factor {self.factor}"
            )

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            return self.encode(image[..., None])[..., 0]
        H, W, C = image.shape
        self._check_dims(H, W)
        if self.kind == "identity":
            return image.copy()
        f = self.factor
        return image.reshape(H // f, f, W // f, f, C).mean(axis=(1, 3))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        if self.kind == "identity":
            return latent.copy()
        f = self.factor
        return np.repeat(np.repeat(latent, f, axis=0), f, axis=1)


def encode(codec: Codec, image: np.ndarray) -> np.ndarray:
    return codec.encode(image)


def decode(codec: Codec, latent: np.ndarray) -> np.ndarray:
    return codec.decode(latent)
