import numpy as np
import pytest

from fedsynth import datagen
from fedsynth.models import TrainConfig, train_local
from fedsynth.partitioner import ClientShard, LabeledImage


def shard_from(images: list[LabeledImage], n_classes: int, client_id: int = 0) -> ClientShard:
    histogram = np.zeros(n_classes, dtype=np.int64)
    for img in images:
        histogram[img.label] += 1
    return ClientShard(client_id=client_id, images=images, class_histogram=histogram)


@pytest.fixture(scope="session")
def corpus16():
    """Small 10-class corpus at 16x16 used by most unit tests."""
    return datagen.make_corpus(per_class=12, side=16, seed=42)


@pytest.fixture(scope="session")
def shard16(corpus16):
    return shard_from(corpus16, n_classes=10)


@pytest.fixture(scope="session")
def observer16(shard16):
    """A reasonably trained observer model on the 16x16 corpus."""
    result = train_local(
        shard16, "small_conv", TrainConfig(epochs=60, batch_size=32, seed=7), num_classes=10
    )
    assert result.train_accuracy > 0.8
    return result.model
