"""Comparators: a LIME-style local linear surrogate and one-stage linear Q-learning."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .blackbox import BlackboxModel, blackbox_itr
from .moe import DEFAULT_H0, DEFAULT_H1, Explanation, FeatureSpec, treatment_rule
from .numkit import Rng, ShapeError
from .simgen import Dataset

RIDGE_FALLBACK = 1e-6


def weighted_least_squares(a: np.ndarray, y: np.ndarray, w: np.ndarray | None = None):
    """Solve ``min sum w (y - a b)^2``.

    Returns
    -------
    coef : ndarray
    ridge_used : bool
        True when the weighted design was rank deficient and a ``1e-6`` ridge
        penalty was added to make the normal equations solvable.
    """
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    if a.ndim != 2 or len(a) != len(y) or len(w) != len(y):
        raise ShapeError("design, target and weights must share rows")
    sw = np.sqrt(w)
    aw, yw = a * sw[:, None], y * sw
    if np.linalg.matrix_rank(aw) < a.shape[1]:
        gram = aw.T @ aw + RIDGE_FALLBACK * np.eye(a.shape[1])
        return np.linalg.solve(gram, aw.T @ yw), True
    return np.linalg.lstsq(aw, yw, rcond=None)[0], False


@dataclass
class LimeConfig:
    m: int = 20000
    kernel_width: float | None = None  # defaults to 0.75 * sqrt(p)
    perturb_sd: float = 1.0  # in standardized units, applied to every feature
    h0_spec: FeatureSpec = DEFAULT_H0
    h1_spec: FeatureSpec = DEFAULT_H1

    def __post_init__(self):
        if isinstance(self.h0_spec, dict):
            self.h0_spec = FeatureSpec.from_dict(self.h0_spec)
        if isinstance(self.h1_spec, dict):
            self.h1_spec = FeatureSpec.from_dict(self.h1_spec)
        if self.kernel_width is not None and not self.kernel_width > 0:
            raise ValueError("kernel_width must be positive")
        if not self.perturb_sd > 0:
            raise ValueError("perturb_sd must be positive")
        if self.m < 10:
            raise ValueError("m must be at least 10")

    def width(self, p: int) -> float:
        return self.kernel_width if self.kernel_width is not None else 0.75 * math.sqrt(p)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["h0_spec"] = self.h0_spec.to_dict()
        d["h1_spec"] = self.h1_spec.to_dict()
        return d


def kernel_weights(dist: np.ndarray, width: float) -> np.ndarray:
    """Exponential kernel ``exp(-d^2 / width^2)``."""
    return np.exp(-np.asarray(dist, dtype=float) ** 2 / width ** 2)


def lime_explain(x_subject, bb: BlackboxModel, cfg: LimeConfig | None = None, rng: Rng | None = None,
                 subject_id: str = "") -> Explanation:
    """Weighted linear fit of black-box predictions around one subject.

    Covariates are perturbed independently per feature, ignoring their
    correlation. Scales come from the black-box's covariate scaler, so
    ``perturb_sd`` and distances are in standardized units.
    """
    cfg = cfg or LimeConfig()
    rng = rng if rng is not None else Rng(0).child(f"lime:{subject_id}")
    x_subject = np.asarray(x_subject, dtype=float)
    p = len(x_subject)
    sd = np.asarray(bb.x_scaler.sd, dtype=float)

    noise = rng.child("features").normal(0.0, cfg.perturb_sd, size=(cfg.m, p))
    x = x_subject + noise * sd
    t = (rng.child("treatment").uniform(size=cfg.m) < 0.5).astype(float)
    y = bb.predict_tx(t, x)
    w = kernel_weights(np.linalg.norm(noise, axis=1), cfg.width(p))

    h0, h1 = cfg.h0_spec.build(x), cfg.h1_spec.build(x)
    design = np.hstack([h0, h1 * t[:, None]])
    coef, ridge_used = weighted_least_squares(design, y, w)
    b1, b2 = coef[:h0.shape[1]], coef[h0.shape[1]:]

    fitted = design @ coef
    ybar = np.average(y, weights=w)
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    r2 = 1.0 - float(np.sum(w * (y - fitted) ** 2)) / ss_tot if ss_tot > 0 else None
    h1_subject = cfg.h1_spec.build(x_subject[None, :])[0]
    return Explanation(
        subject_id=str(subject_id),
        selected_expert=0,
        beta_k1=b1.tolist(),
        beta_k2=b2.tolist(),
        recommended_t=treatment_rule(b2, h1_subject),
        local_r2=r2,
        gate_distribution=[1.0],
        method="lime",
        extra={"local_mae": float(np.average(np.abs(fitted - y), weights=w)),
               "kernel_width": cfg.width(p), "ridge_fallback": ridge_used},
    )


@dataclass
class QLearningModel:
    intercept: float
    beta1: np.ndarray
    beta2: np.ndarray
    h0_spec: FeatureSpec = DEFAULT_H0
    h1_spec: FeatureSpec = DEFAULT_H1
    ridge_fallback: bool = False
    std_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def predict(self, t, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
        return self.intercept + self.h0_spec.build(x) @ self.beta1 + (self.h1_spec.build(x) @ self.beta2) * t

    def rule(self, x) -> np.ndarray | int:
        """1 iff the fitted contrast is positive; ties go to 0."""
        x_arr = np.asarray(x, dtype=float)
        out = (self.h1_spec.build(np.atleast_2d(x_arr)) @ self.beta2 > 0).astype(int)
        return int(out[0]) if x_arr.ndim == 1 else out

    def explain(self, x_subject, subject_id: str = "") -> Explanation:
        return Explanation(str(subject_id), 0, self.beta1.tolist(), self.beta2.tolist(),
                           self.rule(np.asarray(x_subject, dtype=float)), None, [1.0], method="qlearn",
                           extra={"intercept": self.intercept})

    def to_json(self) -> str:
        return json.dumps({"intercept": self.intercept, "beta1": self.beta1.tolist(),
                           "beta2": self.beta2.tolist(), "h0_spec": self.h0_spec.to_dict(),
                           "h1_spec": self.h1_spec.to_dict(), "ridge_fallback": self.ridge_fallback,
                           "std_errors": self.std_errors.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "QLearningModel":
        d = json.loads(text)
        return cls(float(d["intercept"]), np.array(d["beta1"]), np.array(d["beta2"]),
                   FeatureSpec.from_dict(d["h0_spec"]), FeatureSpec.from_dict(d["h1_spec"]),
                   bool(d["ridge_fallback"]), np.array(d["std_errors"]))


def q_learning_fit(data: Dataset, h0_spec: FeatureSpec = DEFAULT_H0,
                   h1_spec: FeatureSpec = DEFAULT_H1) -> QLearningModel:
    """Ordinary least squares of Y on (1, H0, T*H1): a single global rule."""
    h0, h1 = h0_spec.build(data.x), h1_spec.build(data.x)
    design = np.column_stack([np.ones(data.n), h0, h1 * data.t[:, None]])
    if data.n <= design.shape[1]:
        raise ValueError(f"need more than {design.shape[1]} rows, got {data.n}")
    coef, ridge_used = weighted_least_squares(design, data.y)

    resid = data.y - design @ coef
    s2 = float(resid @ resid) / (data.n - design.shape[1])
    gram = design.T @ design + (RIDGE_FALLBACK * np.eye(design.shape[1]) if ridge_used else 0.0)
    se = np.sqrt(s2 * np.diag(np.linalg.inv(gram)))
    p0 = h0.shape[1]
    return QLearningModel(float(coef[0]), coef[1:1 + p0], coef[1 + p0:], h0_spec, h1_spec, ridge_used, se)


def blackbox_explain(x_subject, bb: BlackboxModel, subject_id: str = "") -> Explanation:
    """The black-box rule itself, wrapped in the shared explanation schema."""
    x_subject = np.asarray(x_subject, dtype=float)
    y0, y1 = bb.predict_tx(0, x_subject), bb.predict_tx(1, x_subject)
    return Explanation(str(subject_id), 0, [], [], blackbox_itr(bb, x_subject), None, [1.0], method="blackbox",
                       extra={"predicted_contrast": float(y1[0] - y0[0])})
