"""Pytest fixtures for DRRNet tests."""

import numpy as np
import pytest
import torch
from PIL import Image
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from drrnet.config import AugmentSpec, TrainConfig
from drrnet.models import Base
from drrnet.repository import RunRepository


@pytest.fixture(autouse=True)
def seeded():
    """Start every test from the same global RNG state."""
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def temp_db_path(tmp_path):
    """Create a temporary database path."""
    return tmp_path / "test_runs.db"


@pytest.fixture
def test_engine(temp_db_path):
    """Create a test database engine."""
    engine = create_engine(f"sqlite:///{temp_db_path}", echo=False)
    Base.metadata.create_all(engine)
    return engine


@pytest.fixture
def test_session(test_engine):
    """Create a test database session."""
    Session = sessionmaker(bind=test_engine)
    session = Session()
    yield session
    session.close()


@pytest.fixture
def repository(test_engine):
    """Run repository backed by the temporary database."""
    return RunRepository(engine=test_engine)


def blob_pair(size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Textured background with one colored disk; returns (uint8 RGB image, uint8 0/255 mask)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
    radius = rng.uniform(0.15 * size, 0.25 * size)
    mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2).astype(np.uint8) * 255
    background = rng.integers(20, 90, size=(size, size, 3))
    foreground = np.array([200, 160, 60]) + rng.integers(-20, 20, size=(size, size, 3))
    image = np.where(mask[..., None] > 0, foreground, background).clip(0, 255).astype(np.uint8)
    return image, mask


@pytest.fixture
def make_dataset():
    """Factory writing `count` blob pairs under root/Imgs and root/GT."""

    def _make(root, count=4, size=64, images_subdir="Imgs", gt_subdir="GT"):
        (root / images_subdir).mkdir(parents=True, exist_ok=True)
        (root / gt_subdir).mkdir(parents=True, exist_ok=True)
        for index in range(count):
            image, mask = blob_pair(size, seed=index)
            Image.fromarray(image).save(root / images_subdir / f"sample_{index:02d}.png")
            Image.fromarray(mask).save(root / gt_subdir / f"sample_{index:02d}.png")
        return root

    return _make


@pytest.fixture
def blob_dataset(tmp_path, make_dataset):
    """Four 64x64 blob pairs."""
    return make_dataset(tmp_path / "train")


@pytest.fixture
def tiny_train_config(tmp_path, blob_dataset):
    """Desk-scale training config on the blob dataset."""
    return TrainConfig(
        width=8,
        input_size=32,
        epochs=2,
        batch_size=2,
        seed=7,
        train_root=blob_dataset,
        checkpoint_dir=tmp_path / "ckpt",
        augment=AugmentSpec(crop_scale_range=(0.8, 1.0)),
        log_every=1,
    )
