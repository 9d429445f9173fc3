"""Feature backends: image file -> 4096-dim float32 vector.

Every backend is deterministic in evaluation mode (no augmentation, no
run-dependent state), so extracting the same image twice gives identical
bytes. The default backend needs no pretrained weights: it resizes the
image and applies a fixed random projection whose seed is derived from
the model identifier, which keeps the primary pipeline exercisable on
machines that cannot fetch CNN weights. The CNN backend reads the first
fully-connected layer of a pretrained classification network.
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

FEATURE_DIM = 4096


class BackendUnavailable(RuntimeError):
    """The chosen backend cannot run in this environment."""


def _decode(path, side: int) -> np.ndarray:
    """Image file -> (side*side*3,) float32 in [0, 1]. Raises OSError or
    ValueError on anything Pillow cannot decode."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((side, side), Image.BILINEAR)
    return np.asarray(rgb, dtype=np.float32).reshape(-1) / 255.0


class HashProjection:
    """Seeded Gaussian projection of a downscaled image, tanh-squashed.

    The projection matrix is a pure function of the model identifier, so
    the mapping is stable across runs and machines.
    """

    side = 32

    def __init__(self, model_id: str):
        self.model_id = model_id
        digest = hashlib.sha256(model_id.encode("utf-8")).digest()
        seed = np.random.SeedSequence([int.from_bytes(digest[:8], "little")])
        rng = np.random.default_rng(seed)
        n_in = self.side * self.side * 3
        scale = 1.0 / np.sqrt(n_in)
        self._proj = (rng.standard_normal((n_in, FEATURE_DIM)) * scale).astype(np.float32)

    def extract(self, path) -> np.ndarray:
        pixels = _decode(path, self.side)
        return np.tanh(pixels @ self._proj).astype(np.float32)


class CnnFc1:
    """First fully-connected layer of a pretrained VGG16, 4096 activations."""

    def __init__(self, model_id: str):
        self.model_id = model_id
        try:
            import torch
            from torchvision import models
        except ImportError as err:
            raise BackendUnavailable(f"{model_id} needs torch+torchvision: {err}")
        try:
            weights = models.VGG16_Weights.IMAGENET1K_V1
            net = models.vgg16(weights=weights)
        except Exception as err:  # weights not cached and not fetchable
            raise BackendUnavailable(f"cannot load pretrained weights: {err}")
        net.eval()
        self._torch = torch
        self._net = net
        self._transform = weights.transforms()

    def extract(self, path) -> np.ndarray:
        torch = self._torch
        with Image.open(path) as img:
            x = self._transform(img.convert("RGB")).unsqueeze(0)
        with torch.no_grad():
            net = self._net
            h = net.avgpool(net.features(x)).flatten(1)
            fc1 = net.classifier[0](h)
        return fc1.squeeze(0).numpy().astype(np.float32)


_BACKENDS = {
    "hash-proj/v1": HashProjection,
    "vgg16-fc1/v1": CnnFc1,
}

DEFAULT_MODEL = "hash-proj/v1"


def make_backend(model_id: str):
    if model_id not in _BACKENDS:
        known = ", ".join(sorted(_BACKENDS))
        raise ValueError(f"unknown model {model_id!r} (known: {known})")
    return _BACKENDS[model_id](model_id)
