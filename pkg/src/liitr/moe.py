"""Mixture of interpretable linear experts with a hard-gated MLP router.

Each expert models the black-box output as

    mu_k = beta_k1 . H0 + (beta_k2 . H1) * T

with Gaussian noise scale sigma_k. A gating network maps covariates to
responsibilities over experts. Training maximizes the mixture log-likelihood
plus a negative-entropy penalty on the responsibilities; after a soft warmup
the forward pass routes each row to a single expert while gradients flow
through the softmax (straight-through).
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from sklearn.cluster import KMeans

from .numkit import AdamW, MlpModel, Rng, Scaler, TrainingError, minibatches, r_squared, standardize

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
SIGMA_FLOOR = 1e-3
# Caps the straight-through likelihood ratio N_k / N_selected at e^1. Once
# expert scales shrink, uncapped ratios let a few misrouted rows dominate the
# batch gradient and the gate stampedes onto the broadest expert.
STE_LOG_RATIO_CAP = 1.0


@dataclass(frozen=True)
class FeatureSpec:
    """Covariate columns (0-based into X) plus an optional leading intercept."""

    indices: tuple
    intercept: bool = False

    def build(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        cols = [x[:, i] for i in self.indices]
        if self.intercept:
            cols.insert(0, np.ones(len(x)))
        return np.column_stack(cols) if cols else np.zeros((len(x), 0))

    @property
    def width(self) -> int:
        return len(self.indices) + int(self.intercept)

    def names(self, columns=None) -> list[str]:
        columns = columns or [f"x{i + 1}" for i in range(max(self.indices, default=-1) + 1)]
        out = [columns[i] for i in self.indices]
        return (["1"] if self.intercept else []) + out

    def to_dict(self) -> dict:
        return {"indices": list(self.indices), "intercept": self.intercept}

    @classmethod
    def from_dict(cls, d) -> "FeatureSpec":
        return cls(tuple(int(i) for i in d["indices"]), bool(d["intercept"]))


DEFAULT_H0 = FeatureSpec((0, 1, 2, 3), intercept=False)
DEFAULT_H1 = FeatureSpec((0, 1), intercept=True)


@dataclass
class MoEConfig:
    k: int = 4
    lam: float = 0.1
    warmup_epochs: int = 30
    max_epochs: int = 60
    batch_size: int = 1024
    expert_lr: float = 3e-3
    gate_lr: float = 1e-3
    weight_decay: float = 0.0
    gate_hidden: tuple = (32, 32)
    init_jitter: float = 0.01
    # "kmeans": each expert starts from least squares on one k-means cluster of X';
    # "global": every expert starts from the pooled least-squares fit plus jitter
    init: str = "kmeans"
    # cosine decay of both learning rates down to this fraction of the base
    lr_floor: float = 0.01
    ste_log_ratio_cap: float = STE_LOG_RATIO_CAP
    h0_spec: FeatureSpec = DEFAULT_H0
    h1_spec: FeatureSpec = DEFAULT_H1

    def __post_init__(self):
        self.gate_hidden = tuple(int(h) for h in self.gate_hidden)
        if isinstance(self.h0_spec, dict):
            self.h0_spec = FeatureSpec.from_dict(self.h0_spec)
        if isinstance(self.h1_spec, dict):
            self.h1_spec = FeatureSpec.from_dict(self.h1_spec)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.init not in ("kmeans", "global"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.h1_spec.width == 0:
            raise ValueError("h1_spec must select at least one feature")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gate_hidden"] = list(self.gate_hidden)
        d["h0_spec"] = self.h0_spec.to_dict()
        d["h1_spec"] = self.h1_spec.to_dict()
        return d


@dataclass
class ExpertModel:
    beta_k1: np.ndarray
    beta_k2: np.ndarray
    log_sigma_k: float = 0.0

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma_k))

    def mean(self, h0: np.ndarray, h1: np.ndarray, t: np.ndarray) -> np.ndarray:
        return h0 @ self.beta_k1 + (h1 @ self.beta_k2) * t


@dataclass
class GatingModel:
    """Router from raw covariates to K logits (covariates only, never T)."""

    net: MlpModel
    scaler: Scaler

    @property
    def k(self) -> int:
        return self.net.n_out

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.net.predict(self.scaler.transform(x))

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "scaler": self.scaler.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "GatingModel":
        return cls(MlpModel.from_dict(d["net"]), Scaler.from_dict(d["scaler"]))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def responsibilities(gate: GatingModel, x) -> np.ndarray:
    return softmax(gate.logits(np.asarray(x, dtype=float)))


def hard_gate(pi: np.ndarray) -> np.ndarray:
    """One-hot of the argmax (first index on ties).

    In training the backward pass treats this as the identity on ``pi``; see
    :func:`hard_gate_backward`.
    """
    pi = np.asarray(pi, dtype=float)
    out = np.zeros_like(pi)
    np.put_along_axis(out, np.argmax(pi, axis=-1)[..., None], 1.0, axis=-1)
    return out


def hard_gate_backward(pi: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Straight-through backward: gradient w.r.t. gate logits given d/d(one-hot).

    The one-hot is treated as ``pi`` so this is the softmax vector-Jacobian
    product ``pi * (g - sum(pi * g))``.
    """
    return pi * (grad_out - np.sum(pi * grad_out, axis=-1, keepdims=True))


def entropy_term(pi: np.ndarray) -> np.ndarray:
    """Per-row ``pi . log(pi)`` with ``0 log 0 = 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(pi > 0, pi * np.log(np.where(pi > 0, pi, 1.0)), 0.0)
    return v.sum(axis=-1)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def objective(b1, b2, log_sigma, gate_net: MlpModel, h0, h1, t, y, xg, lam: float,
              hard: bool, with_grad: bool = True, ratio_cap: float = STE_LOG_RATIO_CAP):
    """Penalized log-likelihood summed over rows and, optionally, its gradient.

    ``xg`` is the standardized gating input. Returns ``(L, grads)`` where
    ``grads`` holds gradients of ``L`` for ``(b1, b2, log_sigma)`` followed by
    the gating network's parameters (ascent direction).
    """
    logits = gate_net.forward(xg) if with_grad else gate_net.predict(xg)
    log_pi = _log_softmax(logits)
    pi = np.exp(log_pi)
    mu = h0 @ b1.T + (h1 @ b2.T) * t[:, None]
    r = y[:, None] - mu
    inv_var = np.exp(-2.0 * log_sigma)
    log_n = -0.5 * LOG_2PI - log_sigma - 0.5 * r * r * inv_var

    if hard:
        sel = np.argmax(pi, axis=1)
        rows = np.arange(len(y))
        log_p = log_n[rows, sel]
    else:
        a = log_pi + log_n
        amax = a.max(axis=1, keepdims=True)
        log_p = (amax + np.log(np.sum(np.exp(a - amax), axis=1, keepdims=True)))[:, 0]
    ent = entropy_term(pi)
    value = float(np.sum(log_p) + lam * np.sum(ent))
    if not with_grad:
        return value, None

    if hard:
        weight = np.zeros_like(pi)
        weight[rows, sel] = 1.0
        ratio = np.exp(np.minimum(log_n - log_p[:, None], ratio_cap))
        g_logits = hard_gate_backward(pi, ratio)
    else:
        weight = np.exp(a - log_p[:, None])  # posterior responsibilities
        g_logits = weight - pi
    g_logits = g_logits + lam * pi * (log_pi - ent[:, None])

    g_mu = weight * r * inv_var
    g_b1 = g_mu.T @ h0
    g_b2 = (g_mu * t[:, None]).T @ h1
    g_ls = np.sum(weight * (r * r * inv_var - 1.0), axis=0)
    gate_grads = gate_net.backward(xg, g_logits).params()
    return value, [g_b1, g_b2, g_ls, *gate_grads]


@dataclass
class FitDiagnostics:
    final_loss: float
    usage: list
    local_r2: float
    epochs: int
    collapsed: list = field(default_factory=list)
    history: list = field(default_factory=list)


@dataclass
class Surrogate:
    """Trained mixture: experts, router, and the design it was fit with."""

    experts: list
    gate: GatingModel
    config: MoEConfig
    diagnostics: FitDiagnostics | None = None

    @property
    def b1(self) -> np.ndarray:
        return np.array([e.beta_k1 for e in self.experts])

    @property
    def b2(self) -> np.ndarray:
        return np.array([e.beta_k2 for e in self.experts])

    @property
    def log_sigma(self) -> np.ndarray:
        return np.array([e.log_sigma_k for e in self.experts])

    def design(self, d: np.ndarray):
        d = np.atleast_2d(d)
        x = d[:, 1:]
        return self.config.h0_spec.build(x), self.config.h1_spec.build(x), d[:, 0], x

    def expert_means(self, d: np.ndarray) -> np.ndarray:
        h0, h1, t, _ = self.design(d)
        return h0 @ self.b1.T + (h1 @ self.b2.T) * t[:, None]

    def assign(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.gate.logits(x), axis=1)

    def predict(self, d: np.ndarray) -> np.ndarray:
        """Hard-gated mixture mean."""
        d = np.atleast_2d(d)
        mu = self.expert_means(d)
        return mu[np.arange(len(d)), self.assign(d[:, 1:])]


def penalized_loglik(pset, surrogate: Surrogate, hard: bool = False) -> float:
    """Objective value on a perturbation set with attached predictions."""
    h0, h1, t, x = surrogate.design(pset.d_prime)
    value, _ = objective(surrogate.b1, surrogate.b2, surrogate.log_sigma, surrogate.gate.net, h0, h1, t,
                         np.asarray(pset.y_hat, dtype=float), surrogate.gate.scaler.transform(x),
                         surrogate.config.lam, hard, with_grad=False)
    if not np.isfinite(value):
        raise TrainingError("penalized log-likelihood is not finite")
    return value


def _least_squares(a: np.ndarray, y: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    if ridge:
        return np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ y)
    return np.linalg.lstsq(a, y, rcond=None)[0]


def fit_surrogate(pset, cfg: MoEConfig | None = None, rng: Rng | None = None) -> Surrogate:
    """Jointly fit experts and router on one subject's perturbation set."""
    cfg = cfg or MoEConfig()
    rng = rng if rng is not None else Rng(0).child(f"moe:{pset.subject_id}")
    if pset.y_hat is None:
        raise ValueError("attach black-box predictions before fitting")
    if pset.m < 50 * cfg.k:
        raise ValueError(f"need at least {50 * cfg.k} synthetic rows for k={cfg.k}")

    x = pset.x
    h0, h1, t = cfg.h0_spec.build(x), cfg.h1_spec.build(x), pset.t
    y = np.asarray(pset.y_hat, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        gate_scaler, xg = standardize(x)
    p0 = h0.shape[1]

    design = np.hstack([h0, h1 * t[:, None]])
    coef = _least_squares(design, y)
    init_rng = rng.child("init")
    scale = cfg.init_jitter * (1.0 + np.abs(coef))
    coefs = np.tile(coef, (cfg.k, 1))
    if cfg.init == "kmeans" and cfg.k > 1:
        labels = KMeans(cfg.k, n_init=1, random_state=int(init_rng.integers(2 ** 31))).fit_predict(xg)
        for j in range(cfg.k):
            rows = labels == j
            if rows.sum() >= 5 * design.shape[1]:
                coefs[j] = _least_squares(design[rows], y[rows], ridge=1e-8)
    coefs = coefs + init_rng.normal(size=coefs.shape) * scale
    b1, b2 = coefs[:, :p0].copy(), coefs[:, p0:].copy()
    log_sigma = np.zeros(cfg.k)
    gate_net = MlpModel([x.shape[1], *cfg.gate_hidden, cfg.k],
                        ["relu"] * len(cfg.gate_hidden) + ["identity"], init_rng.child("gate"))

    expert_params = [b1, b2, log_sigma]
    expert_opt = AdamW(expert_params, ["beta_k1", "beta_k2", "log_sigma"],
                       learning_rate=cfg.expert_lr, weight_decay=cfg.weight_decay)
    gate_opt = AdamW(gate_net.params(), [f"gate.{s}" for s in gate_net.param_names()],
                     learning_rate=cfg.gate_lr)
    log_floor = math.log(SIGMA_FLOOR)
    batch_rng = rng.child("batches")
    history = []
    steps_per_epoch = -(-len(y) // cfg.batch_size)
    total_steps = max(1, cfg.max_epochs * steps_per_epoch)
    step = 0
    for epoch in range(cfg.max_epochs):
        hard = epoch >= cfg.warmup_epochs
        total = 0.0
        for idx in minibatches(len(y), cfg.batch_size, batch_rng):
            decay = cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            expert_opt.state.learning_rate = cfg.expert_lr * decay
            gate_opt.state.learning_rate = cfg.gate_lr * decay
            step += 1
            value, grads = objective(b1, b2, log_sigma, gate_net, h0[idx], h1[idx], t[idx], y[idx], xg[idx],
                                     cfg.lam, hard, ratio_cap=cfg.ste_log_ratio_cap)
            if not np.isfinite(value):
                raise TrainingError(f"surrogate objective diverged at epoch {epoch}")
            total += value
            scale_ = -1.0 / len(idx)  # minimize the negative mean objective
            expert_opt.step([g * scale_ for g in grads[:3]])
            gate_opt.step([g * scale_ for g in grads[3:]])
            np.maximum(log_sigma, log_floor, out=log_sigma)
        history.append(total / len(y))

    experts = [ExpertModel(b1[k].copy(), b2[k].copy(), float(log_sigma[k])) for k in range(cfg.k)]
    surrogate = Surrogate(experts, GatingModel(gate_net, gate_scaler), cfg)
    assign = surrogate.assign(x)
    usage = np.bincount(assign, minlength=cfg.k) / len(y)
    collapsed = np.flatnonzero(usage == 0).tolist()
    if collapsed and cfg.max_epochs > cfg.warmup_epochs:
        log.warning("subject %s: experts %s received no rows", pset.subject_id, collapsed)
    surrogate.diagnostics = FitDiagnostics(
        final_loss=penalized_loglik(pset, surrogate, hard=cfg.max_epochs > cfg.warmup_epochs),
        usage=usage.tolist(),
        local_r2=r_squared(y, surrogate.predict(pset.d_prime)),
        epochs=cfg.max_epochs,
        collapsed=collapsed,
        history=history,
    )
    return surrogate


@dataclass
class Explanation:
    subject_id: str
    selected_expert: int
    beta_k1: list
    beta_k2: list
    recommended_t: int
    local_r2: float | None
    gate_distribution: list
    method: str = "li-itr"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "subject_id": self.subject_id,
            "method": self.method,
            "selected_expert": self.selected_expert,
            "beta_k1": [float(v) for v in self.beta_k1],
            "beta_k2": [float(v) for v in self.beta_k2],
            "recommended_t": int(self.recommended_t),
            "local_r2": None if self.local_r2 is None else float(self.local_r2),
            "gate_distribution": [float(v) for v in self.gate_distribution],
        }
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Explanation":
        known = {"subject_id", "method", "selected_expert", "beta_k1", "beta_k2", "recommended_t",
                 "local_r2", "gate_distribution"}
        return cls(str(d["subject_id"]), int(d["selected_expert"]), list(d["beta_k1"]), list(d["beta_k2"]),
                   int(d["recommended_t"]), d.get("local_r2"), list(d["gate_distribution"]),
                   d.get("method", "li-itr"), {k: v for k, v in d.items() if k not in known})


def treatment_rule(beta_k2: np.ndarray, h1: np.ndarray) -> int:
    """argmax over t of the expert mean: 1 iff the treatment contrast is positive."""
    return int(float(np.dot(beta_k2, h1)) > 0)


def local_fit(surrogate: Surrogate, expert: int, pset) -> dict:
    """Fidelity of one expert on the rows routed to it."""
    rows = surrogate.assign(pset.x) == expert
    n = int(rows.sum())
    if n < 10:
        return {"local_r2": None, "local_mae": None, "n_rows": n, "undefined": True}
    mu = surrogate.expert_means(pset.d_prime[rows])[:, expert]
    y = np.asarray(pset.y_hat)[rows]
    return {"local_r2": r_squared(y, mu), "local_mae": float(np.mean(np.abs(mu - y))), "n_rows": n,
            "undefined": False}


def explain_subject(x_subject, surrogate: Surrogate, pset=None, subject_id: str | None = None) -> Explanation:
    """Route the subject's own covariates through the gate and read off its expert."""
    x_subject = np.asarray(x_subject, dtype=float)
    pi = responsibilities(surrogate.gate, x_subject[None, :])[0]
    k = int(np.argmax(pi))
    expert = surrogate.experts[k]
    h1 = surrogate.config.h1_spec.build(x_subject[None, :])[0]
    extra = {}
    local_r2 = None
    if pset is not None:
        fit = local_fit(surrogate, k, pset)
        local_r2 = fit["local_r2"]
        extra = {"local_mae": fit["local_mae"], "n_gated": fit["n_rows"], "local_r2_undefined": fit["undefined"]}
    return Explanation(
        subject_id=str(subject_id if subject_id is not None else getattr(pset, "subject_id", "")),
        selected_expert=k,
        beta_k1=expert.beta_k1.tolist(),
        beta_k2=expert.beta_k2.tolist(),
        recommended_t=treatment_rule(expert.beta_k2, h1),
        local_r2=local_r2,
        gate_distribution=pi.tolist(),
        extra=extra,
    )
