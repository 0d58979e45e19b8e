"""Synthetic category-shift benchmarks and a CSV dataset loader.

Classes live as isotropic Gaussians around canonical latent centers (evenly
spaced on the unit circle for a 2-D latent space, seeded random unit
directions otherwise).  A fixed random linear map lifts latent points to the
input space.  The target domain additionally goes through a rigid-ish
:class:`DomainTransform` in latent space.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

REGIMES = ("CDA", "PDA", "ODA", "OPDA")


@dataclass(frozen=True)
class ShiftScenario:
    regime: str
    shared: tuple
    source_private: tuple
    target_private: tuple
    seed: int = 0

    @property
    def K(self) -> int:
        return len(self.shared) + len(self.source_private)

    @property
    def source_labels(self) -> tuple:
        return self.shared + self.source_private

    @property
    def target_labels(self) -> tuple:
        return self.shared + self.target_private

    @property
    def has_unknown(self) -> bool:
        return bool(self.target_private)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftScenario":
        return cls(d["regime"], tuple(d["shared"]), tuple(d["source_private"]),
                   tuple(d["target_private"]), int(d.get("seed", 0)))


def _check_regime(regime, n_sp, n_tp):
    rules = {
        "CDA": (n_sp == 0 and n_tp == 0),
        "PDA": (n_sp > 0 and n_tp == 0),
        "ODA": (n_sp == 0 and n_tp > 0),
        "OPDA": (n_sp > 0 and n_tp > 0),
    }
    if regime not in rules:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if not rules[regime]:
        raise ValueError(
            f"{regime} inconsistent with {n_sp} source-private / {n_tp} target-private classes")


def make_scenario(regime: str, n_total_classes: int, n_shared: int,
                  n_source_private: int = 0, n_target_private: int = 0, seed: int = 0) -> ShiftScenario:
    """Assign classes in index order: shared, then source-private, then target-private."""
    _check_regime(regime, n_source_private, n_target_private)
    if n_shared < 1:
        raise ValueError("need at least one shared class")
    if min(n_source_private, n_target_private) < 0:
        raise ValueError("class counts must be non-negative")
    used = n_shared + n_source_private + n_target_private
    if used > n_total_classes:
        raise ValueError(f"split uses {used} classes but only {n_total_classes} exist")
    if n_shared + n_source_private < 2:
        raise ValueError("source must have at least 2 classes")
    a, b = n_shared, n_shared + n_source_private
    return ShiftScenario(regime, tuple(range(a)), tuple(range(a, b)), tuple(range(b, used)), seed)


def openness(scenario: ShiftScenario) -> float:
    """``1 - |shared| / |target private|``.

    Note the denominator: this is the ratio as stated for the benchmark, which
    differs from the more common ``1 - |shared| / |L_t|``.
    """
    if not scenario.target_private:
        raise ValueError("openness undefined without target-private classes")
    return 1.0 - len(scenario.shared) / len(scenario.target_private)


@dataclass(frozen=True)
class DomainTransform:
    rotation: float = 0.0          # radians, in the plane of latent axes 0 and 1
    translation: tuple = ()        # latent-space shift; empty = none
    scale: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("transform scale must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def shift_vector(self, latent_dim: int) -> np.ndarray:
        if len(self.translation) == 0:
            return np.zeros(latent_dim)
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (latent_dim,):
            raise ValueError(f"translation must have {latent_dim} entries")
        return t

    def rotation_matrix(self, latent_dim: int) -> np.ndarray:
        R = np.eye(latent_dim)
        if latent_dim >= 2 and self.rotation:
            c, s = math.cos(self.rotation), math.sin(self.rotation)
            R[:2, :2] = [[c, -s], [s, c]]
        return R

    def apply_mean(self, Z: np.ndarray) -> np.ndarray:
        d = Z.shape[1]
        return self.scale * Z @ self.rotation_matrix(d).T + self.shift_vector(d)


IDENTITY = DomainTransform()


@dataclass(frozen=True)
class Geometry:
    """Fixed latent layout and lifting map shared by both domains."""

    n_classes: int = 12
    latent_dim: int = 2
    input_dim: int = 10
    class_std: float = 0.1
    input_noise: float = 0.05
    embed_seed: int = 1234
    layout: str = "interleaved"
    private_radius: float = 1.0

    def slots(self) -> np.ndarray:
        """Circle slot of each class index.

        ``"index"`` puts class c at slot c.  ``"interleaved"`` orders slots by
        ``(s % 2, (s // 2) % 2, s)`` so consecutive class blocks (shared,
        private, ...) land evenly around the circle; for 12 classes the
        first six take every other slot and each following triple forms an
        equilateral triangle.
        """
        n = self.n_classes
        if self.layout == "index":
            return np.arange(n)
        if self.layout != "interleaved":
            raise ValueError(f"unknown layout {self.layout!r}")
        order = sorted(range(n), key=lambda s: (s % 2, (s // 2) % 2, s))
        return np.asarray(order)

    def centers(self) -> np.ndarray:
        if self.latent_dim == 2:
            ang = 2.0 * np.pi * self.slots() / self.n_classes
            return np.column_stack([np.cos(ang), np.sin(ang)])
        rng = np.random.default_rng([self.embed_seed, 1])
        C = rng.standard_normal((self.n_classes, self.latent_dim))
        return C / np.linalg.norm(C, axis=1, keepdims=True)

    def embedding(self) -> np.ndarray:
        rng = np.random.default_rng([self.embed_seed, 2])
        # orthonormal rows keep latent distances intact after lifting
        Q, _ = np.linalg.qr(rng.standard_normal((self.input_dim, self.latent_dim)))
        return Q.T

    def domain_centers(self, scenario: "ShiftScenario", which: str) -> np.ndarray:
        """Latent centers for one domain; target-private classes use ``private_radius``."""
        C = self.centers()
        if which == "target" and self.private_radius != 1.0:
            C = C.copy()
            priv = list(scenario.target_private)
            C[priv] *= self.private_radius
        return C


@dataclass
class LabeledSet:
    X: np.ndarray
    y: np.ndarray
    domain: str = "source"

    def __len__(self):
        return self.X.shape[0]

    def subset(self, mask) -> "LabeledSet":
        return LabeledSet(self.X[mask], self.y[mask], self.domain)


def class_means(scenario: ShiftScenario, which: str, transform: DomainTransform = IDENTITY,
                geometry: Geometry = Geometry()) -> dict:
    """Analytic input-space mean of every class present in the domain."""
    tf = IDENTITY if which == "source" else transform
    labels = _domain_labels(scenario, which)
    Z = tf.apply_mean(geometry.domain_centers(scenario, which)[list(labels)])
    M = Z @ geometry.embedding()
    return {c: M[i] for i, c in enumerate(labels)}


def _domain_labels(scenario, which):
    if which == "source":
        return scenario.source_labels
    if which == "target":
        return scenario.target_labels
    raise ValueError(f"domain must be 'source' or 'target', got {which!r}")


def generate_domain(scenario: ShiftScenario, which: str, n_per_class: int,
                    transform: DomainTransform = IDENTITY, seed: int = 0,
                    geometry: Geometry = Geometry()) -> LabeledSet:
    """Sample ``n_per_class`` points for every class legal in ``which``.

    The source domain always uses the identity transform.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    labels = _domain_labels(scenario, which)
    if max(labels) >= geometry.n_classes:
        raise ValueError("scenario uses more classes than the geometry defines")
    tf = IDENTITY if which == "source" else transform
    rng = np.random.default_rng([seed, 0 if which == "source" else 1])
    C = geometry.domain_centers(scenario, which)
    E = geometry.embedding()
    d = geometry.latent_dim
    y = np.repeat(np.asarray(labels, dtype=np.int64), n_per_class)
    Z = C[y] + geometry.class_std * rng.standard_normal((y.size, d))
    Z = tf.apply_mean(Z)
    if tf.noise_sigma:
        Z = Z + tf.noise_sigma * rng.standard_normal(Z.shape)
    X = Z @ E
    if geometry.input_noise:
        X = X + geometry.input_noise * rng.standard_normal(X.shape)
    order = rng.permutation(y.size)
    return LabeledSet(X[order], y[order], which)


# --- canonical desk-scale benchmark ------------------------------------------
#
# (shared, source-private, target-private) per regime.  PDA keeps roughly the
# 1:2 shared-to-private ratio of the usual Office partial split.

SYNTH_OFFICE_SPLITS = {
    "CDA": (6, 0, 0),
    "PDA": (3, 9, 0),
    "ODA": (6, 0, 6),
    "OPDA": (6, 3, 3),
}


@dataclass
class BenchmarkConfig:
    n_classes: int = 12
    latent_dim: int = 2
    input_dim: int = 10
    class_std: float = 0.1
    input_noise: float = 0.05
    embed_seed: int = 1234
    layout: str = "interleaved"
    private_radius: float = 1.0
    rotation_deg: float = 10.0
    translation: float = 0.3
    scale: float = 1.0
    noise_sigma: float = 0.05
    n_per_class: int = 100
    splits: dict = field(default_factory=lambda: dict(SYNTH_OFFICE_SPLITS))

    def geometry(self) -> Geometry:
        return Geometry(self.n_classes, self.latent_dim, self.input_dim,
                        self.class_std, self.input_noise, self.embed_seed, self.layout,
                        self.private_radius)

    def transform(self) -> DomainTransform:
        t = np.zeros(self.latent_dim)
        t[0] = self.translation
        return DomainTransform(math.radians(self.rotation_deg), tuple(t), self.scale, self.noise_sigma)


def separated_benchmark(**overrides) -> BenchmarkConfig:
    """Benchmark variant whose target-private clusters sit at the latent origin.

    Known classes lie on the unit circle, so the private clusters are a full
    radius (ten class standard deviations) away from every known cluster.
    """
    return BenchmarkConfig(**{"private_radius": 0.0, **overrides})


def synth_office(regime: str, seed: int, bench: BenchmarkConfig | None = None,
                 n_target_private: int | None = None):
    """Build ``(scenario, source, target)`` for one regime of the benchmark."""
    bench = bench or BenchmarkConfig()
    n_sh, n_sp, n_tp = bench.splits[regime]
    if n_target_private is not None:
        n_tp = n_target_private
    sc = make_scenario(regime, bench.n_classes, n_sh, n_sp, n_tp, seed)
    geo = bench.geometry()
    src = generate_domain(sc, "source", bench.n_per_class, IDENTITY, seed, geo)
    tgt = generate_domain(sc, "target", bench.n_per_class, bench.transform(), seed, geo)
    return sc, src, tgt


# --- CSV I/O ----------------------------------------------------------------

class CSVFormatError(ValueError):
    pass


def save_csv(data: LabeledSet, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(data.X.shape[1])] + ["label"])
        for row, label in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])
    return path


def load_csv(path, domain: str = "source") -> LabeledSet:
    """Read a ``f0,...,fD,label`` table; errors name the offending line."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file") from None
        if not header or header[-1].strip() != "label" or len(header) < 2:
            raise CSVFormatError(f"{path}:1: header must be f0,...,fD,label")
        width = len(header) - 1
        X, y = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise CSVFormatError(f"{path}:{lineno}: expected {width + 1} fields, got {len(row)}")
            try:
                feats = [float(v) for v in row[:-1]]
                label = int(row[-1])
            except ValueError as exc:
                raise CSVFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in feats):
                raise CSVFormatError(f"{path}:{lineno}: non-finite feature value")
            X.append(feats)
            y.append(label)
    return LabeledSet(np.asarray(X, dtype=np.float64).reshape(-1, width),
                      np.asarray(y, dtype=np.int64), domain)
