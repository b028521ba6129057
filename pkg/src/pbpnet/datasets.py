"""Point-cloud data sources and deterministic batching."""

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, InvalidInputError, ParseError
from .pcgeom import SYNTHETIC_NUM_CLASSES, PointCloud, make_synthetic_task, sample_fixed_count

# (name, synset id, number of parts) in the conventional order that defines
# the global 50-part label space.
SHAPENET_CATEGORIES = (
    ("Airplane", "02691156", 4),
    ("Bag", "02773838", 2),
    ("Cap", "02954340", 2),
    ("Car", "02958343", 4),
    ("Chair", "03001627", 4),
    ("Earphone", "03261776", 3),
    ("Guitar", "03467517", 3),
    ("Knife", "03624134", 2),
    ("Lamp", "03636649", 4),
    ("Laptop", "03642806", 2),
    ("Motorbike", "03790512", 6),
    ("Mug", "03797390", 2),
    ("Pistol", "03948459", 3),
    ("Rocket", "04099429", 3),
    ("Skateboard", "04225987", 3),
    ("Table", "04379243", 3),
)
SHAPENET_NUM_PARTS = 50
SHAPENET_SPLIT_SIZES = {"train": 14006, "test": 2874}
# Share of shapes assigned to train when no official split list is present.
FALLBACK_TRAIN_PERCENT = 83


def _offsets():
    table, start = {}, 0
    for name, synset, n_parts in SHAPENET_CATEGORIES:
        table[name] = (start, n_parts)
        start += n_parts
    return table


SHAPENET_PART_OFFSETS = _offsets()


@dataclass
class DatasetSplit:
    """A list of sample references plus what is needed to load them.

    ``samples`` holds file paths (ShapeNet-Part, text) or integer seeds
    (synthetic). ``categories`` has one category index per sample.
    """

    samples: list
    categories: list
    num_classes: int
    part_offsets: dict = field(default_factory=dict)
    category_names: tuple = ()
    kind: str = "files"
    n_points: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.samples)

    def load(self, i):
        if i not in self._cache:
            self._cache[i] = self._load(self.samples[i])
        return self._cache[i]

    def _load(self, ref):
        if self.kind in SYNTHETIC_NUM_CLASSES:
            return make_synthetic_task(self.kind, self.n_points, int(ref))
        if self.kind == "text":
            cloud = load_points_text(ref)
        elif self.kind == "shapenet":
            cloud = _load_shapenet_sample(*ref)
        else:
            raise DatasetError(f"unknown dataset kind {self.kind!r}")
        if cloud.labels is not None and cloud.labels.max() >= self.num_classes:
            raise DatasetError(f"{ref}: label {cloud.labels.max()} >= {self.num_classes} classes")
        return cloud

    def part_ids(self, category):
        """Global part ids belonging to category index ``category``."""
        if not self.part_offsets:
            return list(range(self.num_classes))
        start, count = self.part_offsets[self.category_names[category]]
        return list(range(start, start + count))


def load_points_text(path):
    """Read ``x y z [label]`` lines; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    coords, labels = [], []
    has_label = None
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) not in (3, 4):
                raise ParseError(path, line_no, f"expected 3 or 4 fields, got {len(parts)}")
            if has_label is None:
                has_label = len(parts) == 4
            elif has_label != (len(parts) == 4):
                raise ParseError(path, line_no, "inconsistent label column")
            try:
                coords.append([float(v) for v in parts[:3]])
            except ValueError:
                raise ParseError(path, line_no, f"non-numeric coordinate in {text!r}") from None
            if not np.all(np.isfinite(coords[-1])):
                raise ParseError(path, line_no, "non-finite coordinate")
            if has_label:
                try:
                    label = int(parts[3])
                except ValueError:
                    raise ParseError(path, line_no, f"label {parts[3]!r} is not an integer") from None
                if label < 0:
                    raise ParseError(path, line_no, f"negative label {label}")
                labels.append(label)
    if not coords:
        raise InvalidInputError(f"{path}: no points")
    return PointCloud(np.array(coords), labels=np.array(labels, dtype=np.int64) if has_label else None)


def _category_entry(category):
    key = str(category).strip().lower()
    for index, (name, synset, n_parts) in enumerate(SHAPENET_CATEGORIES):
        if key in (name.lower(), synset):
            return index, name, synset, n_parts
    raise DatasetError(f"unknown ShapeNet-Part category {category!r}")


def _category_dir(root, name, synset):
    for candidate in (synset, name, name.lower()):
        if (root / candidate).is_dir():
            return root / candidate
    raise DatasetError(f"no directory for category {name} ({synset}) under {root}")


def _load_shapenet_sample(pts_path, seg_path, offset, n_parts):
    if not Path(seg_path).exists():
        raise DatasetError(f"missing part-label file for sample {Path(pts_path).stem}: {seg_path}")
    cloud = load_points_text(pts_path)
    try:
        local = np.loadtxt(seg_path, dtype=np.int64, ndmin=1)
    except ValueError as exc:
        raise DatasetError(f"{seg_path}: {exc}") from None
    if local.shape[0] != len(cloud):
        raise DatasetError(f"{seg_path}: {local.shape[0]} labels for {len(cloud)} points")
    if local.min() < 1 or local.max() > n_parts:
        raise DatasetError(f"{seg_path}: part ids must lie in [1, {n_parts}]")
    return PointCloud(cloud.coords, labels=local - 1 + offset, num_classes=SHAPENET_NUM_PARTS)


def _split_list(root, split):
    names = {"train": ["train"], "val": ["val"], "test": ["test"], "trainval": ["train", "val"]}
    if split not in names:
        return None
    listed = []
    for part in names[split]:
        path = root / "train_test_split" / f"shuffled_{part}_file_list.json"
        if not path.exists():
            return None
        listed.extend(json.loads(path.read_text()))
    # entries look like "shape_data/<synset>/<stem>"
    return {tuple(entry.split("/")[-2:]) for entry in listed}


def load_shapenet_part(root, category=None, split="train"):
    """Collect one split of the ShapeNet-Part layout.

    ``category`` is a name or synset id, or ``None`` for all 16. ``split`` is
    ``train``, ``val``, ``test``, ``trainval`` or ``all``. Official split lists
    under ``train_test_split/`` are used when present; otherwise shapes are
    split by a hash of their file stem.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    entries = [_category_entry(category)] if category is not None else [
        _category_entry(name) for name, _, _ in SHAPENET_CATEGORIES]
    listed = _split_list(root, split)
    if split not in ("train", "val", "test", "trainval", "all"):
        raise DatasetError(f"unknown split {split!r}")
    samples, categories = [], []
    for index, name, synset, n_parts in entries:
        folder = _category_dir(root, name, synset)
        offset = SHAPENET_PART_OFFSETS[name][0]
        for pts in sorted((folder / "points").glob("*.pts")):
            stem = pts.stem
            if listed is not None:
                if (synset, stem) not in listed:
                    continue
            elif split != "all":
                in_train = zlib.crc32(stem.encode()) % 100 < FALLBACK_TRAIN_PERCENT
                if in_train != (split in ("train", "trainval")):
                    continue
            seg = folder / "points_label" / f"{stem}.seg"
            if not seg.exists():
                raise DatasetError(f"missing part-label file for sample {stem}: {seg}")
            samples.append((pts, seg, offset, n_parts))
            categories.append(index)
    return DatasetSplit(samples, categories, SHAPENET_NUM_PARTS, dict(SHAPENET_PART_OFFSETS),
                        tuple(n for n, _, _ in SHAPENET_CATEGORIES), kind="shapenet")


def text_split(paths, num_classes):
    paths = [Path(p) for p in paths]
    return DatasetSplit(paths, [0] * len(paths), num_classes, kind="text")


def synthetic_split(kind, n_clouds, n_points, seed, split="train"):
    """Synthetic clouds whose seeds are derived from ``(seed, split)``."""
    if kind not in SYNTHETIC_NUM_CLASSES:
        raise DatasetError(f"unknown synthetic task {kind!r}")
    tag = zlib.crc32(split.encode())
    seeds = np.random.default_rng([seed, tag]).integers(0, 2**31 - 1, size=n_clouds)
    return DatasetSplit([int(s) for s in seeds], [0] * n_clouds, SYNTHETIC_NUM_CLASSES[kind],
                        kind=kind, n_points=n_points)


def batch_iterator(split, batch_size, points_per_cloud, seed, epoch=0, shuffle=True,
                   with_index=False):
    """Yield ``(coords (B, N, 3), labels (B, N))`` batches.

    The sample order is a permutation drawn from ``(seed, epoch)``; every
    cloud is resampled to ``points_per_cloud`` points and the last batch may
    be smaller. With ``with_index`` the sample indices are yielded third.
    """
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    n = len(split)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        index = order[start:start + batch_size]
        coords, labels = [], []
        for i in index:
            cloud = split.load(int(i))
            if cloud.labels is None:
                raise DatasetError(f"sample {split.samples[int(i)]} has no labels")
            sampled = sample_fixed_count(cloud, points_per_cloud, [seed, epoch, int(i)])
            coords.append(sampled.coords)
            labels.append(sampled.labels)
        batch = (np.stack(coords), np.stack(labels))
        yield batch + (index,) if with_index else batch
