"""Synthetic shifted-domain benchmark for the three training variants.

Clean features are two Gaussian classes in ``dim`` dimensions, centred at
``+delta * e`` (bonafide) and ``-delta * e`` (spoof). Watermarking is
modelled as a fixed affine map ``x -> A x + c`` applied to a chosen
fraction of samples. Three models are compared on eval sets at each
watermark ratio:

* ``baseline``: phase-1 training on clean data only
* ``watermarked``: the phase-1 recipe run on the partly shifted training set
* ``kpwl``: the baseline adapted with frozen ends, KD and L2-SP
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluation import RATIOS, RatioTable, compute_eer, emit_ratio_table
from .kpwl import (
    ADAPT_DEFAULTS,
    FeatureSet,
    KpwlModel,
    TrainConfig,
    freeze_ends,
    init_model,
    kpwl_adapt,
    pretrain,
    score_dataset,
)

VARIANTS = ("baseline", "watermarked", "kpwl")


@dataclass(frozen=True)
class ShiftDomain:
    """Class geometry and the affine map standing in for watermark embedding."""

    direction: np.ndarray
    matrix: np.ndarray
    offset: np.ndarray
    delta: float
    bonafide_fraction: float

    @classmethod
    def create(cls, seed: int, dim: int = 16, delta: float = 1.5, mix: float = 0.3,
               along: float = 1.0, across: float = 2.5,
               bonafide_fraction: float = 0.3) -> "ShiftDomain":
        rng = np.random.default_rng([seed, 101])
        e = rng.standard_normal(dim)
        e /= np.linalg.norm(e)
        v = rng.standard_normal(dim)
        v -= (v @ e) * e
        v /= np.linalg.norm(v)
        g = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        a = np.eye(dim) + mix * g
        c = along * e + across * v
        return cls(e, a, c, delta, bonafide_fraction)

    @property
    def dim(self) -> int:
        return self.direction.shape[0]

    def shift(self, x: np.ndarray) -> np.ndarray:
        return x @ self.matrix.T + self.offset

    def sample_clean(self, n: int, rng: np.random.Generator):
        n_bona = int(round(n * self.bonafide_fraction))
        labels = np.array([0] * n_bona + [1] * (n - n_bona))
        rng.shuffle(labels)
        sign = np.where(labels == 0, 1.0, -1.0)
        x = rng.standard_normal((n, self.dim)) + sign[:, None] * self.delta * self.direction
        return x, labels

    def apply(self, x: np.ndarray, labels: np.ndarray, ratio: float,
              rng: np.random.Generator) -> np.ndarray:
        """Shift ``round(ratio * n_c)`` samples of each class, chosen at random."""
        out = x.copy()
        for c in (0, 1):
            idx = np.flatnonzero(labels == c)
            k = int(np.floor(ratio * len(idx) + 0.5))
            pick = rng.choice(idx, size=k, replace=False)
            out[pick] = self.shift(x[pick])
        return out


@dataclass
class BenchmarkConfig:
    seed: int = 0
    dim: int = 16
    n_train: int = 5000
    n_eval: int = 2000
    train_ratio: float = 0.5
    hidden: tuple = (32, 16)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-2, epochs=20))
    adapt: TrainConfig = ADAPT_DEFAULTS
    beta: float = 0.3
    mu: float = 1e-4


@dataclass
class BenchmarkResult:
    eers: dict  # (variant, ratio) -> EerResult
    models: dict
    table: RatioTable

    def eer(self, variant: str, ratio: float) -> float:
        return self.eers[(variant, ratio)].eer


def train_variants(cfg: BenchmarkConfig, domain: ShiftDomain):
    rng = np.random.default_rng([cfg.seed, 202])
    x, y = domain.sample_clean(cfg.n_train, rng)
    clean = FeatureSet(x, y)
    shifted = FeatureSet(domain.apply(x, y, cfg.train_ratio, rng), y)

    init = init_model([cfg.dim, *cfg.hidden, 2], seed=cfg.seed)
    p1 = TrainConfig(cfg.pretrain.lr, cfg.pretrain.epochs, cfg.pretrain.batch_size, cfg.seed)
    p2 = TrainConfig(cfg.adapt.lr, cfg.adapt.epochs, cfg.adapt.batch_size, cfg.seed)
    baseline = pretrain(init, clean, p1)
    watermarked = pretrain(init, shifted, p1)
    adapted, _ = kpwl_adapt(freeze_ends(baseline), shifted, cfg.beta, cfg.mu, p2)
    return {"baseline": baseline, "watermarked": watermarked, "kpwl": adapted}


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig()) -> BenchmarkResult:
    """Train the three variants and score them at each eval watermark ratio."""
    domain = ShiftDomain.create(cfg.seed, cfg.dim)
    models: dict[str, KpwlModel] = train_variants(cfg, domain)

    rng = np.random.default_rng([cfg.seed, 303])
    x, y = domain.sample_clean(cfg.n_eval, rng)
    eval_sets = {r: FeatureSet(domain.apply(x, y, r, rng), y) for r in RATIOS}

    eers = {}
    for name in VARIANTS:
        for r, data in eval_sets.items():
            eers[(name, r)] = compute_eer(score_dataset(models[name], data))
    table = emit_ratio_table(eers, with_delta=True, row_header="model")
    return BenchmarkResult(eers, models, table)
