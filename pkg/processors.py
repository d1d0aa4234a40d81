import os
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from core.errors import ConfigError
from ssf.checkpoint import load_tensor, save_tensor
from ssf.tensor import Tensor

# Logging setup
logger = logging.getLogger(__name__)

TASKS = ("upstream_shapes", "downstream_shifted")
LABELS_FILE = "labels.csv"
SPEC_FILE = "dataset.json"

# Per-channel distortion of the downstream task
DEFAULT_AFFINE_SCALE = (1.8, 0.5, -1.2)
DEFAULT_AFFINE_SHIFT = (0.6, -0.4, 0.3)


@dataclass(frozen=True)
class DatasetSpec:
    """Where a dataset comes from and how large its splits are"""

    task_id: str = "upstream_shapes"
    seed: int = 0
    n_train: int = 1000
    n_val: int = 400
    image_side: int = 16
    channels: int = 3
    num_classes: int = 4
    noise: float = 0.25
    affine_scale: Optional[Tuple[float, ...]] = None
    affine_shift: Optional[Tuple[float, ...]] = None
    remap: Optional[Tuple[int, ...]] = None
    directory: Optional[str] = None

    def validate(self) -> "DatasetSpec":
        if self.directory is None and self.task_id not in TASKS:
            raise ConfigError(f"Unknown synthetic task '{self.task_id}', expected one of {TASKS}")
        if self.n_train < 1 or self.n_val < 0:
            raise ConfigError(f"Split sizes must be n_train >= 1, n_val >= 0, got {self.n_train}/{self.n_val}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("affine_scale", "affine_shift"):
            value = getattr(self, name)
            if value is not None and len(value) != self.channels:
                raise ConfigError(f"{name} needs {self.channels} values, got {len(value)}")
        if self.remap is not None and sorted(self.remap) != list(range(self.num_classes)):
            raise ConfigError(f"remap must be a permutation of 0..{self.num_classes - 1}, got {list(self.remap)}")
        return self

    def downstream_params(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-channel (a, b) and class remap, with the task defaults filled in"""
        c = self.channels
        scale = self.affine_scale if self.affine_scale is not None else (DEFAULT_AFFINE_SCALE * c)[:c]
        shift = self.affine_shift if self.affine_shift is not None else (DEFAULT_AFFINE_SHIFT * c)[:c]
        remap = self.remap if self.remap is not None else tuple((k + 1) % self.num_classes
                                                                 for k in range(self.num_classes))
        return np.asarray(scale, dtype=np.float64), np.asarray(shift, dtype=np.float64), np.asarray(remap)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "DatasetSpec":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        for name in ("affine_scale", "affine_shift", "remap"):
            if known.get(name) is not None:
                known[name] = tuple(known[name])
        return cls(**known)


@dataclass
class Dataset:
    """Images [n, C, H, W] (float32) with integer labels"""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise ConfigError(f"Dataset: images {list(self.images.shape)} with labels {list(self.labels.shape)}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"Dataset: labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    spec: DatasetSpec = field(default_factory=DatasetSpec)

    @property
    def num_classes(self) -> int:
        return self.train.num_classes


class DatasetProcessor:
    """Class for generating, writing and loading image datasets"""

    @staticmethod
    def _render(rng: np.random.Generator, classes: np.ndarray, spec: DatasetSpec) -> np.ndarray:
        """
        Procedural stripe textures, one orientation per class:
        - angle k·pi/c with a small jitter
        - random frequency, phase and amplitude
        - a class-dependent channel tint plus Gaussian noise
        """
        n, side, c = classes.shape[0], spec.image_side, spec.channels
        grid = (np.arange(side) + 0.5) / side
        yy, xx = np.meshgrid(grid, grid, indexing="ij")

        jitter = rng.uniform(-0.25, 0.25, size=n) * np.pi / spec.num_classes
        theta = classes * np.pi / spec.num_classes + jitter
        freq = rng.uniform(1.5, 2.5, size=n)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=n)
        amplitude = rng.uniform(0.7, 1.3, size=n)
        noise = rng.normal(0.0, spec.noise, size=(n, c, side, side))

        proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
        pattern = amplitude[:, None, None] * np.sin(2.0 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
        tint = 0.75 + 0.25 * np.cos(classes[:, None] * 2.0 * np.pi / spec.num_classes
                                    + np.arange(c)[None, :] * 2.0 * np.pi / max(c, 1))
        return pattern[:, None] * tint[:, :, None, None] + noise

    @staticmethod
    def _split(rng: np.random.Generator, n: int, spec: DatasetSpec) -> Dataset:
        # Round-robin labels keep every class within one sample of n / c
        classes = np.arange(n) % spec.num_classes
        images = DatasetProcessor._render(rng, classes, spec)
        labels = classes
        if spec.task_id == "downstream_shifted":
            scale, shift, remap = spec.downstream_params()
            images = images * scale[None, :, None, None] + shift[None, :, None, None]
            labels = remap[classes]
        return Dataset(images.astype(np.float32), labels.astype(np.int64), spec.num_classes)

    @staticmethod
    def gen_synthetic(spec: DatasetSpec) -> Splits:
        """
        Generate train and validation splits of a synthetic task:
        - upstream_shapes: c-way stripe orientation classification
        - downstream_shifted: the same images after a fixed per-channel
          affine a·x+b, with classes permuted
        """
        spec.validate()
        rng = np.random.default_rng(spec.seed)
        train = DatasetProcessor._split(rng, spec.n_train, spec)
        val = DatasetProcessor._split(rng, spec.n_val, spec)
        logger.info(f"Generated {spec.task_id}: {len(train)} train / {len(val)} val, {spec.num_classes} classes")
        return Splits(train, val, spec)

    @staticmethod
    def write_split(dataset: Dataset, directory: str) -> None:
        """Write one ``.ssft`` file per image plus ``labels.csv`` (filename,label)"""
        try:
            os.makedirs(directory, exist_ok=True)
            filenames = []
            for i in range(len(dataset)):
                filename = f"{i:06d}.ssft"
                save_tensor(os.path.join(directory, filename), Tensor(dataset.images[i]), name="image")
                filenames.append(filename)
            frame = pd.DataFrame({"filename": filenames, "label": dataset.labels.astype(int)})
            frame.to_csv(os.path.join(directory, LABELS_FILE), index=False)
            logger.debug(f"Wrote {len(dataset)} samples to: {directory}")

        except OSError as e:
            logger.error(f"Error writing dataset split to {directory}: {e}")
            raise

    @staticmethod
    def read_split(directory: str, num_classes: int) -> Dataset:
        """Load a directory written by :meth:`write_split`"""
        try:
            frame = pd.read_csv(os.path.join(directory, LABELS_FILE))
            if list(frame.columns) != ["filename", "label"]:
                raise ConfigError(f"{directory}/{LABELS_FILE}: expected columns filename,label")
            images = [load_tensor(os.path.join(directory, name)).data for name in frame["filename"]]
            stacked = np.stack(images).astype(np.float32) if images else np.zeros((0, 1, 1, 1), np.float32)
            return Dataset(stacked, frame["label"].to_numpy(dtype=np.int64), num_classes)

        except (OSError, pd.errors.ParserError) as e:
            logger.error(f"Error reading dataset split {directory}: {e}")
            raise ConfigError(f"Cannot read dataset split {directory}: {e}")

    @staticmethod
    def save(splits: Splits, directory: str) -> None:
        DatasetProcessor.write_split(splits.train, os.path.join(directory, "train"))
        DatasetProcessor.write_split(splits.val, os.path.join(directory, "val"))
        with open(os.path.join(directory, SPEC_FILE), 'w', encoding='utf-8') as f:
            json.dump(splits.spec.to_dict(), f, indent=2, sort_keys=True)
        logger.info(f"Dataset saved to: {directory}")

    @staticmethod
    def load(directory: str) -> Splits:
        """Load ``train/`` and ``val/`` splits plus the dataset description"""
        spec_path = os.path.join(directory, SPEC_FILE)
        if not os.path.exists(spec_path):
            logger.error(f"No {SPEC_FILE} in {directory}")
            raise ConfigError(f"{directory} is not a dataset directory (missing {SPEC_FILE})")
        with open(spec_path, 'r', encoding='utf-8') as f:
            spec = replace(DatasetSpec.from_dict(json.load(f)), directory=directory)
        train = DatasetProcessor.read_split(os.path.join(directory, "train"), spec.num_classes)
        val = DatasetProcessor.read_split(os.path.join(directory, "val"), spec.num_classes)
        logger.info(f"Loaded dataset {directory}: {len(train)} train / {len(val)} val")
        return Splits(train, val, spec)


def load_dataset(spec: DatasetSpec) -> Splits:
    """Resolve a DatasetSpec: read a directory or generate in memory"""
    if spec.directory:
        return DatasetProcessor.load(spec.directory)
    return DatasetProcessor.gen_synthetic(spec)
