"""Synthetic piecewise heterogeneous-treatment-effect data.

Four covariates ride on a single uniform latent variable; treatment is
assigned by a logistic model in (X3, X4); the outcome mixes a global linear
main effect with a treatment effect whose coefficients switch across the
four quadrants cut by the empirical medians of X1 and X2.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .numkit import Rng

BETA1 = (2.25, 1.65, 1.55, 1.25)

# Region-specific treatment coefficients over (1, X1, X2). Region numbering:
#   1: X1 <= med1, X2 <= med2    2: X1 <= med1, X2 > med2
#   3: X1 >  med1, X2 <= med2    4: X1 >  med1, X2 > med2
DEFAULT_BETA_K2 = (
    (1.20, 0.80, -0.60),
    (-1.10, 0.50, 0.90),
    (0.40, -1.30, 0.70),
    (-0.50, -0.70, -0.90),
)

COLUMNS = ("x1", "x2", "x3", "x4")


def expit(a):
    return 1.0 / (1.0 + np.exp(-a))


def treatment_probability(x3, x4):
    return expit(-0.65 * np.asarray(x3) + 0.15 * np.asarray(x4))


@dataclass
class SimConfig:
    n: int = 2000
    seed: int = 0
    noise_sd: float = 1.0
    misspecified: bool = False
    quad_coef: float = 0.35
    beta_k2: tuple = DEFAULT_BETA_K2

    def __post_init__(self):
        if int(self.n) < 8:
            raise ValueError("n must be at least 8")
        if not self.noise_sd > 0:
            raise ValueError("noise_sd must be positive")
        self.beta_k2 = tuple(tuple(float(v) for v in row) for row in self.beta_k2)
        if len(self.beta_k2) != 4 or any(len(r) != 3 for r in self.beta_k2):
            raise ValueError("beta_k2 must be four 3-vectors")


@dataclass
class Dataset:
    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    columns: tuple = COLUMNS

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 2 or len(self.t) != len(self.x) or len(self.y) != len(self.x):
            raise ValueError("x, t, y must describe the same rows")
        if not np.all((self.t == 0) | (self.t == 1)):
            raise ValueError("t must be binary")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("non-finite values in dataset")
        self.columns = tuple(self.columns)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def d(self) -> np.ndarray:
        """Treatment-first design ``(T, X)``."""
        return np.column_stack([self.t, self.x])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.t[idx], self.y[idx], self.columns)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*self.columns, "t", "y"])
        for xi, ti, yi in zip(self.x, self.t, self.y):
            w.writerow([*(repr(float(v)) for v in xi), int(ti), repr(float(yi))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header[-2:] != ["t", "y"]:
            raise ValueError("CSV must end with columns t,y")
        arr = np.array(body, dtype=float).reshape(len(body), len(header))
        return cls(arr[:, :-2], arr[:, -2], arr[:, -1], tuple(header[:-2]))


@dataclass
class GroundTruth:
    beta1: np.ndarray
    beta_k2: np.ndarray
    x1_med: float
    x2_med: float
    quad_coef: float = 0.0
    region: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    optimal_t: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def region_of(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        hi1 = x[:, 0] > self.x1_med
        hi2 = x[:, 1] > self.x2_med
        return 1 + 2 * hi1.astype(int) + hi2.astype(int)

    def treatment_effect(self, x: np.ndarray) -> np.ndarray:
        """Oracle E[Y | T=1, X] - E[Y | T=0, X]."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b = self.beta_k2[self.region_of(x) - 1]
        h1 = np.column_stack([np.ones(len(x)), x[:, 0], x[:, 1]])
        return np.sum(b * h1, axis=1) + self.quad_coef * x[:, 0] ** 2

    def subset(self, idx) -> "GroundTruth":
        return GroundTruth(self.beta1, self.beta_k2, self.x1_med, self.x2_med, self.quad_coef,
                           self.region[idx], self.optimal_t[idx])

    def to_dict(self) -> dict:
        return {
            "beta1": self.beta1.tolist(),
            "beta_k2": self.beta_k2.tolist(),
            "medians": {"x1": self.x1_med, "x2": self.x2_med},
            "quad_coef": self.quad_coef,
            "region": self.region.tolist(),
            "optimal_t": self.optimal_t.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(np.array(d["beta1"], dtype=float), np.array(d["beta_k2"], dtype=float),
                   float(d["medians"]["x1"]), float(d["medians"]["x2"]), float(d.get("quad_coef", 0.0)),
                   np.array(d["region"], dtype=int), np.array(d["optimal_t"], dtype=int))


def generate(config: SimConfig, rng: Rng | None = None) -> tuple[Dataset, GroundTruth]:
    """Draw a dataset and its ground truth. Medians are taken over all ``n`` rows."""
    rng = rng if rng is not None else Rng(config.seed).child("sim")
    n = int(config.n)
    z = rng.uniform(0.0, 20.0, size=n)
    x1 = np.exp(rng.normal(1.50 * np.sin(z), 0.05))
    x2 = rng.normal(1.25 * np.cos(z), 0.55)
    x3 = rng.normal(1.65 * np.sin(z), 0.65)
    x4 = np.exp(rng.normal(1.25 * np.cos(z), 0.05))
    x = np.column_stack([x1, x2, x3, x4])
    t = (rng.uniform(size=n) < treatment_probability(x3, x4)).astype(float)
    eps = rng.normal(0.0, config.noise_sd, size=n)

    quad = float(config.quad_coef) if config.misspecified else 0.0
    truth = GroundTruth(np.array(BETA1), np.array(config.beta_k2, dtype=float),
                        float(np.median(x1)), float(np.median(x2)), quad)
    truth.region = truth.region_of(x)
    effect = truth.treatment_effect(x)
    truth.optimal_t = (effect > 0).astype(int)
    y = x @ truth.beta1 + effect * t + eps
    return Dataset(x, t, y), truth


def oracle_optimal_treatment(x_row, truth: GroundTruth) -> int:
    """1 iff the true treatment effect at ``x_row`` is positive; ties go to 0."""
    return int(truth.treatment_effect(np.asarray(x_row, dtype=float)[None, :])[0] > 0)


def truth_sidecar(truth: GroundTruth, config: SimConfig, **extra) -> str:
    d = truth.to_dict()
    cfg = asdict(config)
    cfg["beta_k2"] = [list(r) for r in config.beta_k2]
    d.update(seed=config.seed, config=cfg, **extra)
    return json.dumps(d)
