"""Biased datasets: a synthetic generator calibrated to CelebA's
Attractive/Male rates and a reader for CelebA-format attribute files with
16x16 PGM images."""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import regex as re

from .images import ImageFormatError, read_pgm, write_pgm

logger = logging.getLogger(__name__)

IMAGE_SIZE = 16
BASE_INTENSITY = 0.2
BAND_ROWS = (2, 5)  # rows 2-4
BAND_INTENSITY = 0.5
SQUARE_SPAN = (5, 11)  # centered 6x6 square
SQUARE_INTENSITY = 0.4
MARKER_INTENSITY = 0.3
# Top-left corners of the 2x2 auxiliary markers, clear of the band and the square.
MARKER_SLOTS = [(0, 0), (0, 14), (14, 0), (14, 14), (0, 7), (14, 7), (7, 0), (7, 14)]

ATTR_FILENAME = "list_attr.txt"
IMAGE_DIRNAME = "images"

TRAIN_SPLIT, TEST_SPLIT = 0, 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class GenConfig:
    n_train: int = 4000
    n_test: int = 1000
    p_y_given_s0: float = 0.6791
    p_y_given_s1: float = 0.2793
    aux_spec: List[float] = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    noise_sigma: float = 0.05
    seed: int = 0
    target_name: str = "Attractive"
    protected_name: str = "Male"
    aux_names: Optional[List[str]] = None
    aux_categories: Optional[List[str]] = None

    def __post_init__(self):
        for name in ("p_y_given_s0", "p_y_given_s1"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be a probability, got {value}")
        for d in self.aux_spec:
            if not 0.0 <= d <= 1.0:
                raise ValueError(f"Auxiliary dependence strengths must lie in [0, 1], got {d}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError(f"n_train and n_test must be at least 1, got {self.n_train}, {self.n_test}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if len(self.aux_spec) > len(MARKER_SLOTS):
            raise ValueError(f"At most {len(MARKER_SLOTS)} auxiliary attributes, got {len(self.aux_spec)}")
        for name in ("aux_names", "aux_categories"):
            value = getattr(self, name)
            if value is not None and len(value) != len(self.aux_spec):
                raise ValueError(f"{name} needs one entry per auxiliary attribute")

    @property
    def attribute_names(self) -> List[str]:
        return self.aux_names or [f"Aux_{j + 1}" for j in range(len(self.aux_spec))]

    @property
    def attribute_categories(self) -> List[str]:
        return self.aux_categories or ["all"] * len(self.aux_spec)


@dataclass
class Example:
    image: np.ndarray
    y: int
    s: int
    aux: np.ndarray


@dataclass
class Dataset:
    """Column-oriented collection of examples.

    images: (N, 1, 16, 16) float32 in [0, 1]; y, s: (N,) binary; aux: (N, m) binary.
    """

    images: np.ndarray
    y: np.ndarray
    s: np.ndarray
    aux: np.ndarray
    aux_names: List[str]
    filenames: List[str] = None
    target_name: str = "Attractive"
    protected_name: str = "Male"
    aux_categories: List[str] = None

    def __post_init__(self):
        n = len(self.images)
        if self.aux.ndim != 2 or len(self.aux) != n or len(self.y) != n or len(self.s) != n:
            raise ValueError("Dataset columns disagree in length")
        if self.aux.shape[1] != len(self.aux_names):
            raise ValueError("One auxiliary name per auxiliary column is required")
        if self.filenames is None:
            self.filenames = [f"{i:06d}.pgm" for i in range(n)]
        if self.aux_categories is None:
            self.aux_categories = ["all"] * len(self.aux_names)
        if len(self.aux_categories) != len(self.aux_names):
            raise ValueError("One category per auxiliary attribute is required")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Example:
        return Example(self.images[i], int(self.y[i]), int(self.s[i]), self.aux[i])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            images=self.images[indices],
            y=self.y[indices],
            s=self.s[indices],
            aux=self.aux[indices],
            filenames=[self.filenames[i] for i in indices],
        )

    def label(self, name: str) -> np.ndarray:
        "Column for a named attribute."
        if name == self.target_name:
            return self.y
        if name == self.protected_name:
            return self.s
        if name in self.aux_names:
            return self.aux[:, self.aux_names.index(name)]
        raise KeyError(f"Unknown attribute {name!r}")

    @property
    def attribute_names(self) -> List[str]:
        return [self.target_name, self.protected_name, *self.aux_names]


@dataclass
class AttributeTable:
    names: List[str]
    rows: Dict[str, Dict[str, int]]

    def __len__(self) -> int:
        return len(self.rows)


def render_example(y: int, s: int, aux: Sequence[int], noise_seed: int, noise_sigma: float = 0.0) -> np.ndarray:
    """Compose a 1x16x16 image: base 0.2, a bright band for s=1, a centered
    square for y=1, one corner/edge marker per active auxiliary attribute,
    plus seeded Gaussian noise, clamped to [0, 1]."""
    if len(aux) > len(MARKER_SLOTS):
        raise ValueError(f"At most {len(MARKER_SLOTS)} auxiliary markers, got {len(aux)}")
    for value in (y, s, *aux):
        if value not in (0, 1):
            raise ValueError(f"Labels must be binary, got {value}")

    image = np.full((IMAGE_SIZE, IMAGE_SIZE), BASE_INTENSITY, dtype=np.float64)
    if s:
        image[BAND_ROWS[0] : BAND_ROWS[1], :] += BAND_INTENSITY
    if y:
        lo, hi = SQUARE_SPAN
        image[lo:hi, lo:hi] += SQUARE_INTENSITY
    for (row, col), active in zip(MARKER_SLOTS, aux):
        if active:
            image[row : row + 2, col : col + 2] += MARKER_INTENSITY
    if noise_sigma > 0:
        image += np.random.default_rng(noise_seed).normal(0.0, noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)[None]


def _draw_example(config: GenConfig, split: int, index: int) -> Example:
    rng = np.random.default_rng([config.seed, split, index])
    s = int(rng.random() < 0.5)
    y = int(rng.random() < (config.p_y_given_s1 if s else config.p_y_given_s0))
    aux = np.array(
        [y if rng.random() < (1.0 + d) / 2.0 else 1 - y for d in config.aux_spec],
        dtype=np.int8,
    )
    noise_seed = int(rng.integers(2**32))
    return Example(render_example(y, s, aux, noise_seed, config.noise_sigma), y, s, aux)


def _generate_split(config: GenConfig, split: int, n: int, threads: int) -> Dataset:
    def draw(i):
        return _draw_example(config, split, i)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            examples = list(pool.map(draw, range(n)))
    else:
        examples = [draw(i) for i in range(n)]

    return Dataset(
        images=np.stack([e.image for e in examples]),
        y=np.array([e.y for e in examples], dtype=np.int8),
        s=np.array([e.s for e in examples], dtype=np.int8),
        aux=np.stack([e.aux for e in examples]).reshape(n, len(config.aux_spec)),
        aux_names=config.attribute_names,
        target_name=config.target_name,
        protected_name=config.protected_name,
        aux_categories=config.attribute_categories,
    )


def synth_generate(config: GenConfig, threads: int = 1) -> Tuple[Dataset, Dataset]:
    """Draw train and test sets. Example i of a split is seeded from
    (seed, split, i), so train and test never share a stream and the result
    does not depend on thread interleaving."""
    train = _generate_split(config, TRAIN_SPLIT, config.n_train, threads)
    test = _generate_split(config, TEST_SPLIT, config.n_test, threads)
    logger.info(
        f"Generated {len(train)} train / {len(test)} test examples, "
        f"P(y=1|s=0)={train.y[train.s == 0].mean():.4f}, P(y=1|s=1)={train.y[train.s == 1].mean():.4f}"
    )
    return train, test


def load_attr_file(path: str) -> AttributeTable:
    """Parse a CelebA list-attribute file: a count line, a line of attribute
    names, then `filename v1 v2 ...` rows with values in {-1, 1}."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.strip() for line in f.read().splitlines()]
    while lines and not lines[-1]:
        lines.pop()
    if len(lines) < 2:
        raise DatasetFormatError(f"{path}: missing count or attribute header line")

    try:
        count = int(lines[0])
    except ValueError:
        raise DatasetFormatError(f"{path}: first line must be the row count, got {lines[0]!r}")
    names = re.split(r"\s+", lines[1])
    body = lines[2:]
    if count != len(body):
        raise DatasetFormatError(f"{path}: header declares {count} rows but the file has {len(body)}")

    rows = {}
    for line_no, line in enumerate(body, start=3):
        tokens = re.split(r"\s+", line)
        filename, values = tokens[0], tokens[1:]
        if len(values) != len(names):
            raise DatasetFormatError(
                f"{path}:{line_no}: expected {len(names)} attribute columns, got {len(values)}"
            )
        bits = {}
        for name, token in zip(names, values):
            if token not in ("-1", "1"):
                raise DatasetFormatError(f"{path}:{line_no}: value {token!r} for {name} is not -1 or 1")
            bits[name] = 1 if token == "1" else 0
        rows[filename] = bits

    return AttributeTable(names, rows)


def write_attr_file(table: AttributeTable, path: str):
    lines = [str(len(table)), " ".join(table.names)]
    for filename, bits in table.rows.items():
        lines.append(" ".join([filename] + ["1" if bits[name] else "-1" for name in table.names]))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_pgm_dataset(
    image_dir: str,
    attr_table: AttributeTable,
    target_name: str,
    protected_name: str,
    aux_categories: Optional[List[str]] = None,
) -> Dataset:
    """Read every image listed in the table. Target and protected labels come
    from the named columns; remaining columns become auxiliary attributes in
    file order."""
    for name in (target_name, protected_name):
        if name not in attr_table.names:
            raise DatasetFormatError(f"Attribute {name!r} is not in the attribute table")
    aux_names = [n for n in attr_table.names if n not in (target_name, protected_name)]

    images, y, s, aux = [], [], [], []
    for filename, bits in attr_table.rows.items():
        path = os.path.join(image_dir, filename)
        if not os.path.isfile(path):
            raise FileNotFoundError(f"Image {filename} listed in the attribute table is missing from {image_dir}")
        try:
            images.append(read_pgm(path, shape=(IMAGE_SIZE, IMAGE_SIZE))[None])
        except ImageFormatError as e:
            raise DatasetFormatError(str(e))
        y.append(bits[target_name])
        s.append(bits[protected_name])
        aux.append([bits[n] for n in aux_names])

    n = len(images)
    return Dataset(
        images=np.stack(images) if n else np.zeros((0, 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32),
        y=np.array(y, dtype=np.int8),
        s=np.array(s, dtype=np.int8),
        aux=np.array(aux, dtype=np.int8).reshape(n, len(aux_names)),
        aux_names=aux_names,
        filenames=list(attr_table.rows),
        target_name=target_name,
        protected_name=protected_name,
        aux_categories=aux_categories,
    )


def save_dataset(dataset: Dataset, directory: str):
    "Persist as `images/*.pgm` plus a CelebA-format attribute file."
    image_dir = os.path.join(directory, IMAGE_DIRNAME)
    os.makedirs(image_dir, exist_ok=True)
    rows = {}
    for i, filename in enumerate(dataset.filenames):
        write_pgm(dataset.images[i, 0], os.path.join(image_dir, filename))
        rows[filename] = {name: int(dataset.label(name)[i]) for name in dataset.attribute_names}
    write_attr_file(AttributeTable(dataset.attribute_names, rows), os.path.join(directory, ATTR_FILENAME))
    logger.info(f"Saved {len(dataset)} examples to {directory}")


def load_dataset(
    directory: str,
    target_name: str,
    protected_name: str,
    aux_categories: Optional[List[str]] = None,
) -> Dataset:
    table = load_attr_file(os.path.join(directory, ATTR_FILENAME))
    return load_pgm_dataset(
        os.path.join(directory, IMAGE_DIRNAME), table, target_name, protected_name, aux_categories
    )


def filter_attributes(dataset: Dataset, min_positive_rate: float = 0.05) -> Dataset:
    "Drop auxiliary attributes whose positive rate is below the floor."
    if len(dataset) == 0 or not dataset.aux_names:
        return dataset
    rates = dataset.aux.mean(axis=0)
    keep = [j for j, rate in enumerate(rates) if rate >= min_positive_rate]
    dropped = [dataset.aux_names[j] for j in range(len(rates)) if j not in keep]
    if dropped:
        logger.warning(f"Dropping attributes below {min_positive_rate:.0%} positives: {dropped}")
    return replace(
        dataset,
        aux=dataset.aux[:, keep],
        aux_names=[dataset.aux_names[j] for j in keep],
        aux_categories=[dataset.aux_categories[j] for j in keep],
    )


def batch_iter(dataset: Dataset, batch_size: int, shuffle_seed: int) -> List[Dataset]:
    """Seeded shuffle into consecutive batches; a final batch smaller than 2
    is dropped because HSIC needs at least two samples."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be at least 2, got {batch_size}")
    order = np.random.default_rng(shuffle_seed).permutation(len(dataset))
    batches = []
    for start in range(0, len(order), batch_size):
        indices = order[start : start + batch_size]
        if len(indices) < 2:
            break
        batches.append(dataset.subset(indices))
    return batches
