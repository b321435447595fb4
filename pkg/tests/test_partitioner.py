import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsynth import datagen
from fedsynth.partitioner import (
    ClientShard,
    CorpusError,
    LabeledImage,
    PartitionSpec,
    dirichlet_partition,
    load_corpus,
    load_corpus_archive,
    partition_stats,
    save_corpus_archive,
)


def _mini_corpus(per_class=6, classes=4, side=16, seed=0):
    names = datagen.SHAPE_CLASSES[:classes]
    return datagen.make_corpus(per_class=per_class, side=side, seed=seed, classes=names)


def test_labeled_image_validation():
    good = LabeledImage(pixels=np.zeros((3, 16, 16), dtype=np.float32), label=0)
    good.validate()
    with pytest.raises(ValueError, match="powers of two"):
        LabeledImage(pixels=np.zeros((3, 12, 12), dtype=np.float32), label=0).validate()
    with pytest.raises(ValueError, match="powers of two"):
        LabeledImage(pixels=np.zeros((3, 8, 8), dtype=np.float32), label=0).validate()
    bad = np.zeros((3, 16, 16), dtype=np.float32)
    bad[0, 0, 0] = 1.5
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        LabeledImage(pixels=bad, label=0).validate()


def test_partition_spec_validation():
    with pytest.raises(ValueError, match="alpha"):
        PartitionSpec(n_clients=2, alpha=0.0)
    with pytest.raises(ValueError, match="n_clients"):
        PartitionSpec(n_clients=0, alpha=1.0)


def test_load_corpus_directory_tree(tmp_path):
    root = tmp_path / "tree"
    datagen.write_corpus_tree(root, per_class=3, side=16, seed=1)
    corpus = load_corpus(root, resize=16)
    # independent count: walk the directories
    files = sorted(root.rglob("*.png"))
    assert len(corpus) == len(files) == 3 * len(datagen.SHAPE_CLASSES)
    assert all(img.pixels.shape == (3, 16, 16) for img in corpus)
    # class indices follow sorted directory names
    class_dirs = sorted(d.name for d in root.iterdir())
    by_label = {}
    for img in corpus:
        by_label.setdefault(img.label, 0)
        by_label[img.label] += 1
    assert sorted(by_label) == list(range(len(class_dirs)))


def test_load_corpus_resize(tmp_path):
    root = tmp_path / "tree"
    datagen.write_corpus_tree(root, per_class=2, side=32, seed=1)
    corpus = load_corpus(root, resize=16)
    assert all(img.pixels.shape == (3, 16, 16) for img in corpus)
    for img in corpus:
        img.validate()


def test_load_corpus_errors(tmp_path):
    with pytest.raises(CorpusError, match="does not exist"):
        load_corpus(tmp_path / "nothing", resize=16)
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(CorpusError, match="fewer than 2 classes"):
        load_corpus(empty, resize=16)
    one_class = tmp_path / "one"
    (one_class / "only").mkdir(parents=True)
    with pytest.raises(CorpusError, match="fewer than 2 classes"):
        load_corpus(one_class, resize=16)
    with pytest.raises(CorpusError, match="resize"):
        load_corpus(tmp_path, resize=12)


def test_load_corpus_unreadable_image(tmp_path):
    root = tmp_path / "tree"
    for name in ("a", "b"):
        (root / name).mkdir(parents=True)
        (root / name / "img.png").write_bytes(b"not a png")
    with pytest.raises(CorpusError, match="unreadable"):
        load_corpus(root, resize=16)


def test_corpus_archive_roundtrip(tmp_path):
    corpus = _mini_corpus()
    path = tmp_path / "corpus.bin"
    save_corpus_archive(corpus, path)
    loaded = load_corpus_archive(path, resize=16)
    assert len(loaded) == len(corpus)
    for a, b in zip(corpus, loaded):
        assert a.label == b.label
        np.testing.assert_array_equal(a.pixels, b.pixels)
    # load_corpus dispatches on files too
    again = load_corpus(path, resize=16)
    assert len(again) == len(corpus)


def test_single_client_gets_everything():
    corpus = _mini_corpus()
    shards = dirichlet_partition(corpus, PartitionSpec(n_clients=1, alpha=0.3, seed=5))
    assert len(shards) == 1
    assert len(shards[0].images) == len(corpus)
    report = partition_stats(shards)
    assert np.allclose(report.max_class_share, 1.0)


def test_partition_disjoint_exhaustive_cover():
    corpus = _mini_corpus(per_class=8)
    spec = PartitionSpec(n_clients=3, alpha=0.5, seed=9)
    shards = dirichlet_partition(corpus, spec)
    ids = [id(img) for shard in shards for img in shard.images]
    assert len(ids) == len(corpus)
    assert set(ids) == {id(img) for img in corpus}
    for shard in shards:
        shard.validate()


@settings(max_examples=20, deadline=None)
@given(
    n_clients=st.integers(1, 6),
    alpha=st.floats(0.05, 50.0, allow_nan=False),
    seed=st.integers(0, 2**32 - 1),
)
def test_partition_cover_property(n_clients, alpha, seed):
    corpus = _mini_corpus(per_class=5, classes=3)
    shards = dirichlet_partition(corpus, PartitionSpec(n_clients=n_clients, alpha=alpha, seed=seed))
    assert sum(len(s.images) for s in shards) == len(corpus)
    assert {id(i) for s in shards for i in s.images} == {id(i) for i in corpus}


def test_partition_seed_determinism():
    corpus = _mini_corpus(per_class=10)
    spec = PartitionSpec(n_clients=4, alpha=0.2, seed=123)
    a = dirichlet_partition(corpus, spec)
    b = dirichlet_partition(corpus, spec)
    for sa, sb in zip(a, b):
        assert [id(i) for i in sa.images] == [id(i) for i in sb.images]
    c = dirichlet_partition(corpus, PartitionSpec(n_clients=4, alpha=0.2, seed=124))
    assert any(
        [id(i) for i in sa.images] != [id(i) for i in sc.images] for sa, sc in zip(a, c)
    )


def test_heterogeneity_monotone_in_alpha():
    corpus = _mini_corpus(per_class=12, classes=5)
    means = []
    for alpha in (0.1, 1.0, 100.0):
        shares = []
        for seed in range(20):
            shards = dirichlet_partition(corpus, PartitionSpec(n_clients=4, alpha=alpha, seed=seed))
            shares.append(partition_stats(shards).mean_max_class_share)
        means.append(float(np.mean(shares)))
    assert means[0] > means[1] > means[2]


def test_paper_alpha_grid_all_valid():
    corpus = _mini_corpus(per_class=10)
    seen = set()
    for alpha in (0.1, 0.3, 0.5):
        shards = dirichlet_partition(corpus, PartitionSpec(n_clients=3, alpha=alpha, seed=5))
        assert sum(len(s.images) for s in shards) == len(corpus)
        key = tuple(tuple(id(i) for i in s.images) for s in shards)
        seen.add(key)
    assert len(seen) == 3  # distinct partitions


def test_partition_stats_even_split():
    corpus = _mini_corpus(per_class=6, classes=3)
    half = len(corpus) // 2
    # interleave so each client holds exactly half of every class
    shard0, shard1 = [], []
    for i, img in enumerate(corpus):
        (shard0 if i % 2 == 0 else shard1).append(img)
    hist = np.zeros(3, dtype=np.int64)
    shards = []
    for cid, images in enumerate((shard0, shard1)):
        hist = np.zeros(3, dtype=np.int64)
        for img in images:
            hist[img.label] += 1
        shards.append(ClientShard(client_id=cid, images=images, class_histogram=hist))
    report = partition_stats(shards)
    assert np.allclose(report.class_shares, 0.5)
    assert report.client_sizes == [half, half]


def test_partition_stats_shares_sum_to_one():
    corpus = _mini_corpus(per_class=9, classes=4)
    shards = dirichlet_partition(corpus, PartitionSpec(n_clients=3, alpha=0.1, seed=2))
    report = partition_stats(shards)
    sums = report.class_shares.sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-9)
    with pytest.raises(ValueError, match="empty"):
        partition_stats([])


def test_empty_corpus_rejected():
    with pytest.raises(ValueError, match="empty"):
        dirichlet_partition([], PartitionSpec(n_clients=2, alpha=1.0))
