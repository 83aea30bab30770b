import numpy as np
import pytest

from proxyclust.data import SynthSpec, generate_synthetic, load_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A shared 4-class set, 12 images per class, for fast integration tests."""
    root = tmp_path_factory.mktemp("ds")
    manifest = generate_synthetic(SynthSpec(classes=4, per_class=12, image_size=64), 11, str(root))
    return load_dataset(manifest, with_truth_masks=True)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
