"""Label datasets (one row-stochastic (N+1, C) matrix per sample) and their JSON form."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


@dataclass(eq=False)
class LabelDataset:
    """Per-sample grade distributions, optionally paired with feature vectors.

    ``samples`` has shape (S, N+1, C); hard labels are one-hot rows.  Row 0
    is the disease node.
    """

    samples: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 3:
            raise ValueError(f"samples must be (S, nodes, grades), got shape {self.samples.shape}")
        if self.samples.size and (
            self.samples.min() < 0
            or np.abs(self.samples.sum(axis=2) - 1.0).max() > 1e-9
        ):
            raise ValueError("every sample row must be a distribution over grades")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=float)
            if self.features.shape[0] != self.samples.shape[0]:
                raise ValueError("features and samples disagree on sample count")

    @classmethod
    def from_grades(cls, grades: np.ndarray, C: int, features=None) -> "LabelDataset":
        """One-hot dataset from an (S, N+1) array of 1-based grades."""
        g = np.asarray(grades, dtype=int)
        if g.size and (g.min() < 1 or g.max() > C):
            raise ValueError(f"grades must lie in [1, {C}]")
        onehot = np.zeros(g.shape + (C,))
        np.put_along_axis(onehot, (g - 1)[..., None], 1.0, axis=-1)
        return cls(onehot, features)

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @property
    def nodes(self) -> int:
        return self.samples.shape[1]

    @property
    def grades(self) -> int:
        return self.samples.shape[2]

    def hard_grades(self) -> np.ndarray:
        """1-based argmax grades, shape (S, N+1)."""
        return self.samples.argmax(axis=2) + 1

    def subset(self, idx) -> "LabelDataset":
        idx = np.asarray(idx)
        feats = None if self.features is None else self.features[idx]
        return LabelDataset(self.samples[idx], feats)

    def to_dict(self) -> dict:
        d = {
            "version": FORMAT_VERSION,
            "nodes": self.nodes,
            "grades": self.grades,
            "samples": self.samples.tolist(),
        }
        if self.features is not None:
            d["features"] = self.features.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LabelDataset":
        if not isinstance(d, dict):
            raise DatasetFormatError("top level must be a JSON object")
        version = d.get("version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"unsupported dataset version {version!r} (this reader handles {FORMAT_VERSION})"
            )
        for key in ("nodes", "grades", "samples"):
            if key not in d:
                raise DatasetFormatError(f"missing field '{key}'")
        try:
            samples = np.array(d["samples"], dtype=float)
        except (TypeError, ValueError) as exc:
            raise DatasetFormatError(f"field 'samples': {exc}") from None
        if samples.size == 0:
            samples = samples.reshape(0, d["nodes"], d["grades"])
        if samples.ndim != 3 or samples.shape[1:] != (d["nodes"], d["grades"]):
            raise DatasetFormatError(
                f"field 'samples' has shape {samples.shape}, expected (S, {d['nodes']}, {d['grades']})"
            )
        feats = None
        if d.get("features") is not None:
            try:
                feats = np.array(d["features"], dtype=float)
            except (TypeError, ValueError) as exc:
                raise DatasetFormatError(f"field 'features': {exc}") from None
            if feats.ndim != 2:
                raise DatasetFormatError(f"field 'features' must be a matrix, got shape {feats.shape}")
        try:
            return cls(samples, feats)
        except ValueError as exc:
            raise DatasetFormatError(str(exc)) from None

    def equals(self, other: "LabelDataset") -> bool:
        if not np.array_equal(self.samples, other.samples):
            return False
        if (self.features is None) != (other.features is None):
            return False
        return self.features is None or np.array_equal(self.features, other.features)


def save_dataset(path: str | os.PathLike, ds: LabelDataset) -> None:
    # write-then-rename so readers never see a partial file
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(ds.to_dict(), fh)
    os.replace(tmp, path)


def load_dataset(path: str | os.PathLike) -> LabelDataset:
    with open(path) as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from None
    try:
        return LabelDataset.from_dict(d)
    except UnsupportedVersionError:
        raise
    except DatasetFormatError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None
