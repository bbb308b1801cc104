import numpy as np
import pytest
from skimage import data
from skimage.transform import resize

from octcodec.model import CodecModel, named_config

NATURAL_IMAGES = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry")


def natural_image(name: str = "astronaut", size=None) -> np.ndarray:
    """8-bit RGB test image, optionally resized to ``size`` = (h, w)."""
    img = getattr(data, name)()
    if size is not None:
        img = resize(img, size, anti_aliasing=True)
        img = np.clip(np.floor(img * 255 + 0.5), 0, 255).astype(np.uint8)
    return img


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    return CodecModel(named_config("tiny"), seed=7)


@pytest.fixture(scope="session")
def tiny_model64():
    return CodecModel(named_config("tiny"), dtype=np.float64, seed=7)


@pytest.fixture(scope="session")
def tiny_ckpt(tmp_path_factory, tiny_model):
    """Untrained tiny model saved as a middle-band checkpoint (model id 2)."""
    from octcodec.params import save_checkpoint
    from octcodec.training import LambdaSet, checkpoint_meta

    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    save_checkpoint(path, tiny_model.store.state(), checkpoint_meta(tiny_model, 2, LambdaSet.table("middle")))
    return path
