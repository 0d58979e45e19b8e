"""Target feature memory bank and neighbor-candidate assembly."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import Model, forward_features


class MemoryBank:
    """Stores one unit-norm feature per target sample, indexed by sample id.

    Updates overwrite rows outright; there is no momentum blending.
    """

    def __init__(self, V: np.ndarray):
        self.V = np.array(V, dtype=np.float64)

    @property
    def n_target(self) -> int:
        return self.V.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.V.shape[1]

    def update(self, indices, f_hat: np.ndarray) -> None:
        idx = np.asarray(indices, dtype=np.int64).ravel()
        if f_hat.shape != (idx.size, self.feat_dim):
            raise ValueError(f"expected features of shape {(idx.size, self.feat_dim)}, got {f_hat.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_target):
            raise IndexError(f"bank index out of range [0, {self.n_target})")
        if np.unique(idx).size != idx.size:
            raise ValueError("duplicate index within a single bank update")
        self.V[idx] = f_hat

    def save(self, path) -> Path:
        """Dump as CSV (header ``f0..f{d-1}``) or ``.npz`` by file suffix."""
        path = Path(path)
        if path.suffix == ".npz":
            np.savez(path, V=self.V)
        else:
            header = ",".join(f"f{j}" for j in range(self.feat_dim))
            np.savetxt(path, self.V, delimiter=",", header=header, comments="", fmt="%.17g")
        return path

    @classmethod
    def load(cls, path) -> "MemoryBank":
        path = Path(path)
        if path.suffix == ".npz":
            with np.load(path) as z:
                return cls(z["V"])
        return cls(np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2))


def init_bank(model: Model, target_X: np.ndarray, chunk: int = 4096) -> MemoryBank:
    """Fill the bank with inference-mode target features (target BN, running stats)."""
    target_X = np.asarray(target_X, dtype=np.float64)
    if target_X.shape[0] == 0:
        raise ValueError("cannot build a memory bank from an empty target set")
    parts = [forward_features(model, target_X[s:s + chunk], "target", training=False)[0]
             for s in range(0, target_X.shape[0], chunk)]
    return MemoryBank(np.vstack(parts))


def update_bank(bank: MemoryBank, indices, f_hat: np.ndarray) -> None:
    bank.update(indices, f_hat)


def assemble_candidates(bank_rows: np.ndarray | MemoryBank, W_hat: np.ndarray) -> np.ndarray:
    """Stack stored features over normalized prototypes: ``[V; W_hat]``.

    Returns a fresh array, so later bank writes never leak into it.
    """
    V = bank_rows.V if isinstance(bank_rows, MemoryBank) else np.asarray(bank_rows)
    if V.shape[1] != W_hat.shape[1]:
        raise ValueError(f"bank width {V.shape[1]} != prototype width {W_hat.shape[1]}")
    return np.vstack([V, W_hat])
