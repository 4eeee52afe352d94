"""Sample containers shared by the model, baselines and experiment harnesses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix


def _vec(v, name, n, dtype=np.float64):
    v = np.asarray(v, dtype=dtype).reshape(-1)
    if v.shape[0] != n:
        raise ValueError(f"{name} has length {v.shape[0]}, expected {n}")
    return v


@dataclass
class SourceSample:
    """Labeled draws from the source design."""

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = as_matrix(self.x, "x")
        n = self.x.shape[0]
        self.t = _vec(self.t, "t", n, np.int64)
        self.y = _vec(self.y, "y", n)
        if n and self.t.min() < 0:
            raise ValueError("arm indices must be non-negative")

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> "SourceSample":
        return SourceSample(self.x[idx], self.t[idx], self.y[idx])


@dataclass
class TargetSample:
    """Unlabeled draws from the target design.

    Outcomes, when known, are held privately and only released through
    ``evaluation_outcomes`` so that training code never sees them.
    """

    x: np.ndarray
    t: np.ndarray
    _hidden_y: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.x = as_matrix(self.x, "x")
        n = self.x.shape[0]
        self.t = _vec(self.t, "t", n, np.int64)
        if self._hidden_y is not None:
            self._hidden_y = _vec(self._hidden_y, "hidden outcomes", n)

    def __len__(self):
        return self.x.shape[0]

    def evaluation_outcomes(self) -> np.ndarray:
        if self._hidden_y is None:
            raise ValueError("target sample carries no evaluation outcomes")
        return self._hidden_y.copy()


@dataclass
class CateDataset:
    x: np.ndarray
    t: np.ndarray
    y_factual: np.ndarray
    y_cfactual: np.ndarray | None = None
    mu0: np.ndarray | None = None
    mu1: np.ndarray | None = None

    def __post_init__(self):
        self.x = as_matrix(self.x, "x")
        n = self.x.shape[0]
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if t.shape[0] != n:
            raise ValueError(f"t has length {t.shape[0]}, expected {n}")
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("treatment must be binary (0 or 1)")
        self.t = t.astype(np.int64)
        self.y_factual = _vec(self.y_factual, "y_factual", n)
        for name in ("y_cfactual", "mu0", "mu1"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, _vec(v, name, n))

    def __len__(self):
        return self.x.shape[0]

    @property
    def has_truth(self) -> bool:
        return self.mu0 is not None and self.mu1 is not None

    @property
    def tau(self) -> np.ndarray:
        if not self.has_truth:
            raise ValueError("dataset has no mu0/mu1 ground truth")
        return self.mu1 - self.mu0

    def source(self, idx=None) -> SourceSample:
        if idx is None:
            idx = slice(None)
        return SourceSample(self.x[idx], self.t[idx], self.y_factual[idx])
