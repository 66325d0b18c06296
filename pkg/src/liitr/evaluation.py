"""Evaluation quantities: coefficient bias tables, PCOT, IPW policy value, fidelity."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .moe import DEFAULT_H0, DEFAULT_H1, Explanation, FeatureSpec, Surrogate, local_fit
from .numkit import ShapeError
from .simgen import Dataset, GroundTruth, expit

log = logging.getLogger(__name__)

PROPENSITY_CLIP = (0.01, 0.99)


@dataclass
class BiasReport:
    """Per-coefficient mean |bias| and sample SD of signed biases across subjects.

    ``main`` rows cover the prognostic coefficients, ``treatment`` rows the
    region-specific treatment coefficients.
    """

    method: str
    main_mean_abs: list
    main_sd: list
    treatment_mean_abs: list
    treatment_sd: list
    n_subjects: int
    n_skipped: int = 0
    single_subject: bool = False
    setting: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for group, means, sds in (("main", self.main_mean_abs, self.main_sd),
                                  ("treatment", self.treatment_mean_abs, self.treatment_sd)):
            for j, (m, s) in enumerate(zip(means, sds)):
                out.append({"method": self.method, **self.setting, "group": group, "coef": j,
                            "mean_abs_bias": m, "sd_bias": s, "n_subjects": self.n_subjects})
        return out


def _bias_stats(b: np.ndarray) -> tuple[list, list]:
    if len(b) == 0:
        return [], []
    sd = b.std(axis=0, ddof=1) if len(b) > 1 else np.zeros(b.shape[1])
    return np.abs(b).mean(axis=0).tolist(), sd.tolist()


def bias_table(explanations, truth: GroundTruth, regions=None, method: str | None = None,
               setting: dict | None = None) -> BiasReport:
    """Bias of each explanation's coefficients against its subject's true region.

    Parameters
    ----------
    explanations : sequence of Explanation
    truth : GroundTruth
        Supplies ``beta1`` and ``beta_k2``.
    regions : sequence of int, optional
        True region (1-based) per explanation. Defaults to ``truth.region``
        aligned with ``explanations``.
    """
    explanations = list(explanations)
    regions = truth.region if regions is None else regions
    regions = np.asarray(regions, dtype=int)
    if len(regions) != len(explanations):
        raise ShapeError("need one true region per explanation")
    main, treat, skipped = [], [], 0
    for e, r in zip(explanations, regions):
        if len(e.beta_k1) != len(truth.beta1) or len(e.beta_k2) != truth.beta_k2.shape[1]:
            skipped += 1
            continue
        main.append(np.asarray(e.beta_k1) - truth.beta1)
        treat.append(np.asarray(e.beta_k2) - truth.beta_k2[r - 1])
    if skipped:
        log.info("bias_table: skipped %d explanations without comparable coefficients", skipped)
    main_m, main_s = _bias_stats(np.array(main))
    treat_m, treat_s = _bias_stats(np.array(treat))
    return BiasReport(method or (explanations[0].method if explanations else ""), main_m, main_s, treat_m,
                      treat_s, len(main), skipped, len(main) == 1, dict(setting or {}))


def pcot(recommendations, optimal) -> float:
    """Proportion of recommendations equal to the oracle optimal treatment."""
    rec = np.asarray(recommendations, dtype=int)
    opt = np.asarray(optimal, dtype=int)
    if rec.shape != opt.shape:
        raise ShapeError(f"length mismatch: {rec.shape} vs {opt.shape}")
    if rec.size == 0:
        raise ValueError("no recommendations to score")
    return float(np.mean(rec == opt))


@dataclass
class PropensityModel:
    """Logistic model ``P(T=1 | X)`` with an intercept; probabilities are clipped."""

    intercept: float
    coef: np.ndarray
    converged: bool
    iterations: int
    separated: bool = False
    clip: tuple = PROPENSITY_CLIP

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.clip(expit(self.intercept + x @ self.coef), *self.clip)


def fit_propensity(data: Dataset, ridge: float = 1e-6, max_iter: int = 100, tol: float = 1e-10) -> PropensityModel:
    """Newton-Raphson logistic regression of T on X.

    A small ridge on the slopes keeps the Hessian invertible and the estimate
    finite under perfect separation; separation is reported via ``separated``.
    """
    t = data.t
    if np.all(t == t[0]):
        raise ValueError("propensity model needs both treatment arms")
    a = np.column_stack([np.ones(data.n), data.x])
    penalty = np.full(a.shape[1], ridge * data.n)
    penalty[0] = 0.0
    w = np.zeros(a.shape[1])
    converged, it = False, 0
    for it in range(1, max_iter + 1):
        p = expit(a @ w)
        grad = a.T @ (t - p) - penalty * w
        hess = (a * (p * (1 - p))[:, None]).T @ a + np.diag(penalty) + 1e-12 * np.eye(a.shape[1])
        step = np.linalg.solve(hess, grad)
        w = w + step
        if np.max(np.abs(step)) < tol * (1.0 + np.max(np.abs(w))):
            converged = True
            break
    model = PropensityModel(float(w[0]), w[1:], converged, it)
    raw = expit(a @ w)
    model.separated = bool(np.all((raw > 0.5) == (t == 1)) and np.all(model.predict(data.x) != raw))
    if not converged:
        log.warning("propensity fit did not converge in %d iterations", max_iter)
    return model


def value_function(data: Dataset, recommendations, prop) -> float:
    """IPW estimate ``mean(1[T = d] Y / P(T | X))``.

    ``prop`` is a fitted :class:`PropensityModel` or an array of ``P(T=1|X)``.
    """
    d = np.asarray(recommendations, dtype=int)
    if len(d) != data.n:
        raise ShapeError("one recommendation per row is required")
    e = prop.predict(data.x) if hasattr(prop, "predict") else np.asarray(prop, dtype=float)
    p_obs = e * data.t + (1.0 - e) * (1.0 - data.t)
    return float(np.mean((data.t == d) * data.y / p_obs))


@dataclass
class PolicyReport:
    method: str
    pcot: float
    n_treated: int
    n_control: int
    value: float | None = None
    setting: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.n_treated + self.n_control

    def row(self) -> dict:
        return {"method": self.method, **self.setting, "pcot": self.pcot, "n_treated": self.n_treated,
                "n_control": self.n_control, "value": self.value}


def policy_report(method: str, recommendations, optimal, data: Dataset | None = None, prop=None,
                  setting: dict | None = None) -> PolicyReport:
    rec = np.asarray(recommendations, dtype=int)
    value = value_function(data, rec, prop) if data is not None and prop is not None else None
    return PolicyReport(method, pcot(rec, optimal), int(rec.sum()), int(len(rec) - rec.sum()), value,
                        dict(setting or {}))


def local_fidelity(explanation: Explanation, pset, surrogate: Surrogate) -> dict:
    """R^2 and mean |error| of the selected expert over rows gated to it."""
    return local_fit(surrogate, explanation.selected_expert, pset)


def point_fidelity(explanation: Explanation, bb, x_subject, h0_spec: FeatureSpec = DEFAULT_H0,
                   h1_spec: FeatureSpec = DEFAULT_H1) -> float:
    """Mean over ``t in {0, 1}`` of |linear explanation - black-box| at the subject itself."""
    x = np.atleast_2d(np.asarray(x_subject, dtype=float))
    g0 = float(h0_spec.build(x)[0] @ np.asarray(explanation.beta_k1))
    g0 += float(explanation.extra.get("intercept", 0.0))
    contrast = float(h1_spec.build(x)[0] @ np.asarray(explanation.beta_k2))
    f0, f1 = float(bb.predict_tx(0, x)[0]), float(bb.predict_tx(1, x)[0])
    return 0.5 * (abs(g0 - f0) + abs(g0 + contrast - f1))
