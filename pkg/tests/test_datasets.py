import json

import numpy as np
import pytest

from pbpnet.datasets import (SHAPENET_CATEGORIES, SHAPENET_PART_OFFSETS, SHAPENET_SPLIT_SIZES,
                             batch_iterator, load_points_text, load_shapenet_part,
                             synthetic_split, text_split)
from pbpnet.errors import DatasetError, InvalidInputError, ParseError


def write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def test_text_with_labels(tmp_path):
    cloud = load_points_text(write(tmp_path / "a.txt", "0 0 0 1\n1 0 0 2"))
    assert len(cloud) == 2 and set(cloud.labels) == {1, 2}


def test_text_without_labels_and_comments(tmp_path):
    cloud = load_points_text(write(tmp_path / "a.txt", "# header\n\n0 0 0\n  \n1 2 3\n"))
    assert cloud.labels is None and cloud.coords.tolist() == [[0, 0, 0], [1, 2, 3]]


@pytest.mark.parametrize("text, line", [("0 0 x", 1), ("0 0 0 1\n0 0 0", 2), ("0 0\n", 1),
                                        ("# c\n1 1 1 -1", 2), ("0 0 0 a", 1), ("nan 0 0", 1)])
def test_text_parse_errors_name_the_line(tmp_path, text, line):
    with pytest.raises(ParseError) as err:
        load_points_text(write(tmp_path / "bad.txt", text))
    assert err.value.line_no == line
    assert f":{line}:" in str(err.value)


def test_text_empty_file(tmp_path):
    with pytest.raises(InvalidInputError):
        load_points_text(write(tmp_path / "e.txt", "# nothing\n"))


def test_loading_is_pure(tmp_path):
    path = write(tmp_path / "a.txt", "0.1 0.2 0.3 0\n1 1 1 1\n")
    assert np.array_equal(load_points_text(path).coords, load_points_text(path).coords)


def test_text_split_rejects_out_of_range_labels(tmp_path):
    split = text_split([write(tmp_path / "a.txt", "0 0 0 5\n")], num_classes=3)
    with pytest.raises(DatasetError):
        split.load(0)


def test_offset_table():
    assert len(SHAPENET_CATEGORIES) == 16
    assert sum(n for _, _, n in SHAPENET_CATEGORIES) == 50
    assert SHAPENET_PART_OFFSETS["Airplane"] == (0, 4)
    assert SHAPENET_PART_OFFSETS["Chair"] == (12, 4)
    assert SHAPENET_PART_OFFSETS["Table"] == (47, 3)
    assert SHAPENET_SPLIT_SIZES == {"train": 14006, "test": 2874}
    assert sum(SHAPENET_SPLIT_SIZES.values()) == 16880


def shapenet_fixture(root, stems=("s1", "s2", "s3"), synset="03001627"):
    for k, stem in enumerate(stems):
        write(root / synset / "points" / f"{stem}.pts", "0 0 0\n1 0 0\n0 1 0\n0 0 1\n")
        write(root / synset / "points_label" / f"{stem}.seg", "1\n2\n3\n4\n")
    return root


def test_shapenet_chair_maps_to_global_range(tmp_path):
    root = shapenet_fixture(tmp_path)
    split = load_shapenet_part(root, "Chair", "all")
    assert len(split) == 3 and split.num_classes == 50
    cloud = split.load(0)
    assert cloud.labels.tolist() == [12, 13, 14, 15]
    assert split.part_ids(split.categories[0]) == [12, 13, 14, 15]


def test_shapenet_official_split_lists(tmp_path):
    root = shapenet_fixture(tmp_path)
    lists = root / "train_test_split"
    write(lists / "shuffled_train_file_list.json", json.dumps(["shape_data/03001627/s1",
                                                                 "shape_data/03001627/s3"]))
    write(lists / "shuffled_test_file_list.json", json.dumps(["shape_data/03001627/s2"]))
    assert len(load_shapenet_part(root, "chair", "train")) == 2
    assert len(load_shapenet_part(root, "03001627", "test")) == 1


def test_shapenet_hash_split_partitions(tmp_path):
    stems = [f"shape{i:03d}" for i in range(40)]
    root = shapenet_fixture(tmp_path, stems)
    train = load_shapenet_part(root, "Chair", "train")
    test = load_shapenet_part(root, "Chair", "test")
    assert len(train) + len(test) == 40
    assert not {s[0] for s in train.samples} & {s[0] for s in test.samples}


def test_shapenet_errors(tmp_path):
    root = shapenet_fixture(tmp_path)
    with pytest.raises(DatasetError, match="unknown"):
        load_shapenet_part(root, "Sofa")
    (root / "03001627" / "points_label" / "s2.seg").unlink()
    with pytest.raises(DatasetError, match="s2"):
        load_shapenet_part(root, "Chair", "all")
    with pytest.raises(DatasetError):
        load_shapenet_part(tmp_path / "missing", "Chair")


def test_batches_partition_and_point_count():
    split = synthetic_split("z_halves", 10, 100, seed=0)
    batches = list(batch_iterator(split, 4, 64, seed=1))
    assert [b[0].shape[0] for b in batches] == [4, 4, 2]
    assert all(c.shape[1:] == (64, 3) and l.shape[1:] == (64,) for c, l in batches)
    with pytest.raises(InvalidInputError):
        next(batch_iterator(split, 0, 64, seed=1))


def test_batches_deterministic():
    split = synthetic_split("quadrants", 6, 50, seed=3)
    a = list(batch_iterator(split, 4, 32, seed=9, epoch=2))
    b = list(batch_iterator(synthetic_split("quadrants", 6, 50, seed=3), 4, 32, seed=9, epoch=2))
    for (ca, la), (cb, lb) in zip(a, b):
        assert np.array_equal(ca, cb) and np.array_equal(la, lb)


def test_seeds_change_the_order():
    split = synthetic_split("z_halves", 20, 16, seed=0)
    orders = {tuple(np.concatenate([i for _, _, i in batch_iterator(split, 5, 8, seed=s,
                                                                     with_index=True)]))
              for s in range(5)}
    assert len(orders) == 5


def test_synthetic_splits_differ_and_labels_in_range():
    train = synthetic_split("two_spheres", 4, 64, seed=0, split="train")
    test = synthetic_split("two_spheres", 4, 64, seed=0, split="test")
    assert not set(train.samples) & set(test.samples)
    for i in range(4):
        assert train.load(i).labels.max() < train.num_classes
    with pytest.raises(DatasetError):
        synthetic_split("cubes", 2, 10, seed=0)
