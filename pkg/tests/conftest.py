import numpy as np
import pytest
import torch

from carigen.backbones import toy_backbone


@pytest.fixture(scope="session")
def backbone():
    return toy_backbone(seed=0)


@pytest.fixture(scope="session")
def backbone_f64():
    return toy_backbone(seed=0, image_resolution=32, dtype=torch.float64)


def make_train_image(resolution: int = 64, seed: int = 7) -> torch.Tensor:
    """Smooth deterministic pseudo-photo in [-1, 1]."""
    gen = torch.Generator().manual_seed(seed)
    low = torch.randn(1, 3, 8, 8, generator=gen)
    img = torch.nn.functional.interpolate(
        low, size=(resolution, resolution), mode="bilinear", align_corners=False
    )
    return torch.tanh(1.5 * img)[0]


@pytest.fixture(scope="session")
def train_image():
    return make_train_image()


def image_to_pil(tensor: torch.Tensor):
    from PIL import Image

    arr = np.clip((tensor.numpy().transpose(1, 2, 0) + 1) * 127.5, 0, 255).astype(np.uint8)
    return Image.fromarray(arr)


@pytest.fixture()
def train_image_file(train_image, tmp_path):
    path = tmp_path / "reference.png"
    image_to_pil(train_image).save(path)
    return path
