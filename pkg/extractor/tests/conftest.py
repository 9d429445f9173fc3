import numpy as np
import pytest
from PIL import Image


@pytest.fixture
def image_dir(tmp_path):
    """A few small decodable images plus one undecodable file."""
    root = tmp_path / "images"
    root.mkdir()
    rng = np.random.default_rng(7)

    Image.new("RGB", (40, 30), (200, 30, 30)).save(root / "red.png")

    grad = np.zeros((64, 64, 3), dtype=np.uint8)
    grad[..., 0] = np.arange(64, dtype=np.uint8)[None, :] * 4
    grad[..., 1] = np.arange(64, dtype=np.uint8)[:, None] * 4
    Image.fromarray(grad).save(root / "gradient.png")

    noise = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    Image.fromarray(noise, "RGB").save(root / "noise.png")

    (root / "broken.jpg").write_bytes(b"this is not an image at all")
    return root


def write_manifest(path, rows, header=False):
    lines = ["item_id,image_path"] if header else []
    lines += [f"{item_id},{image_path}" for item_id, image_path in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
