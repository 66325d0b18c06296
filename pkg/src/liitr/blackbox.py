"""Flexible outcome model f(T, X) and the treatment rule it induces."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .numkit import AdamW, MlpModel, Rng, Scaler, ShapeError, TrainingError, minibatches, r_squared, standardize
from .simgen import Dataset

log = logging.getLogger(__name__)


@dataclass
class BlackboxConfig:
    hidden: tuple = (64, 64)
    activation: str = "relu"
    max_epochs: int = 400
    patience: int = 30
    batch_size: int = 256
    val_fraction: float = 0.15
    learning_rate: float = 1e-3
    weight_decay: float = 0.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class BlackboxModel:
    """MLP regressor over ``D = (T, X)``.

    Covariates are standardized; the treatment column is passed through raw
    so flipping it is an exact counterfactual query.
    """

    net: MlpModel
    x_scaler: Scaler
    y_scaler: Scaler
    log: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.net.n_in - 1

    def _inputs(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        if d.shape[-1] != self.net.n_in:
            raise ShapeError(f"expected {self.net.n_in} columns (T first), got {d.shape[-1]}")
        if d.ndim == 1:
            return np.concatenate([d[:1], self.x_scaler.transform(d[1:])])
        return np.column_stack([d[:, 0], self.x_scaler.transform(d[:, 1:])])

    def predict(self, d: np.ndarray) -> np.ndarray:
        """Outcome prediction for one row ``(t, x...)`` or a batch of rows."""
        out = self.net.predict(self._inputs(d))
        return self.y_scaler.inverse(out)[..., 0]

    def predict_tx(self, t, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
        return self.predict(np.column_stack([t, x]))

    def to_json(self, **meta) -> str:
        d = self.net.to_dict()
        d["scaler"] = {"x": self.x_scaler.to_dict(), "y": self.y_scaler.to_dict()}
        d["log"] = self.log
        d.update(meta)
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "BlackboxModel":
        d = json.loads(text)
        if "scaler" not in d or "x" not in (d["scaler"] or {}):
            raise ValueError("not a black-box model file")
        return cls(MlpModel.from_dict(d), Scaler.from_dict(d["scaler"]["x"]),
                   Scaler.from_dict(d["scaler"]["y"]), d.get("log", {}))


def fit(data: Dataset, config: BlackboxConfig | None = None, rng: Rng | None = None) -> BlackboxModel:
    """Train by minibatch AdamW on MSE with early stopping on a held-out split."""
    config = config or BlackboxConfig()
    rng = rng if rng is not None else Rng(0).child("blackbox")
    if data.n < 50:
        raise ValueError("need at least 50 rows to fit the black-box")

    order = rng.permutation(data.n)
    n_val = max(1, int(round(config.val_fraction * data.n)))
    val_idx, tr_idx = order[:n_val], order[n_val:]

    x_scaler, _ = standardize(data.x[tr_idx])
    y_scaler, _ = standardize(data.y[tr_idx])
    inputs = np.column_stack([data.t, x_scaler.transform(data.x)])
    target = y_scaler.transform(data.y)[:, None]

    sizes = [data.p + 1, *config.hidden, 1]
    acts = [config.activation] * len(config.hidden) + ["identity"]
    net = MlpModel(sizes, acts, rng.child("init"))
    # zero head: training starts from the mean outcome, and a constant target stays exact
    net.weights[-1][...] = 0.0
    opt = AdamW(net.params(), net.param_names(), learning_rate=config.learning_rate,
                weight_decay=config.weight_decay)
    model = BlackboxModel(net, x_scaler, y_scaler)

    x_tr, y_tr = inputs[tr_idx], target[tr_idx]
    x_val, y_val = inputs[val_idx], target[val_idx]
    best_val, best_params, best_epoch, stale = np.inf, None, 0, 0
    history = []
    batch_rng = rng.child("batches")
    for epoch in range(config.max_epochs):
        for idx in minibatches(len(tr_idx), config.batch_size, batch_rng):
            xb = x_tr[idx]
            out = net.forward(xb)
            grad = 2.0 * (out - y_tr[idx]) / len(idx)
            opt.step(net.backward(xb, grad).params())
        val_mse = float(np.mean((net.predict(x_val) - y_val) ** 2))
        if not np.isfinite(val_mse):
            raise TrainingError(f"black-box validation loss diverged at epoch {epoch}")
        history.append(val_mse)
        if val_mse < best_val - 1e-12:
            best_val, best_epoch, stale = val_mse, epoch, 0
            best_params = [p.copy() for p in net.params()]
        else:
            stale += 1
            if stale >= config.patience:
                break
    for p, best in zip(net.params(), best_params):
        p[...] = best

    train_pred = model.predict(data.d[tr_idx])
    val_pred = model.predict(data.d[val_idx])
    model.log = {
        "epochs": len(history),
        "best_epoch": best_epoch,
        "train_mse": float(np.mean((train_pred - data.y[tr_idx]) ** 2)),
        "val_mse": float(np.mean((val_pred - data.y[val_idx]) ** 2)),
        "train_r2": r_squared(data.y[tr_idx], train_pred),
        "val_r2": r_squared(data.y[val_idx], val_pred),
    }
    log.info("black-box fit: %s", model.log)
    return model


def predict(model: BlackboxModel, d_row) -> float | np.ndarray:
    return model.predict(d_row)


def blackbox_itr(model: BlackboxModel, x) -> np.ndarray | int:
    """Treatment maximizing the predicted outcome; ties go to 0."""
    x_arr = np.asarray(x, dtype=float)
    rule = (model.predict_tx(1, x_arr) > model.predict_tx(0, x_arr)).astype(int)
    return int(rule[0]) if x_arr.ndim == 1 else rule


def config_dict(config: BlackboxConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(config.hidden)
    return d
