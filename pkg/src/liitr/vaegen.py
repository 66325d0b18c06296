"""beta-VAE over covariates and latent-space neighborhood sampling.

The VAE never sees the treatment. Perturbed covariates are produced by
shifting a subject's posterior-mean code, ``z' = z + min(1, alpha) * eps``,
and decoding; synthetic treatments are fair coin flips.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .numkit import AdamW, MlpModel, Rng, Scaler, ShapeError, TrainingError, UsageError, minibatches, standardize
from .simgen import Dataset

log = logging.getLogger(__name__)

LOG_VAR_BOUNDS = (-12.0, 8.0)


@dataclass
class VaeConfig:
    latent_dim: int = 2
    beta: float = 1.0
    hidden: tuple = (64, 64)
    activation: str = "relu"
    max_epochs: int = 300
    patience: int = 30
    batch_size: int = 256
    val_fraction: float = 0.15
    learning_rate: float = 1e-3
    # "learned": per-column decoder log-variance is a trained parameter;
    # "unit": fixed unit scale on the standardized covariates
    decoder_variance: str = "learned"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.decoder_variance not in ("learned", "unit"):
            raise ValueError(f"unknown decoder_variance {self.decoder_variance!r}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be positive")


@dataclass
class VaeModel:
    encoder: MlpModel
    decoder: MlpModel
    beta: float
    scaler: Scaler
    log: dict = field(default_factory=dict)
    # per-column [lo, hi] of the training covariates, padded by 3 sd
    support: np.ndarray | None = None
    # decoder log-variance per standardized column
    decoder_log_var: np.ndarray | None = None

    @property
    def latent_dim(self) -> int:
        return self.decoder.n_in

    @property
    def p(self) -> int:
        return self.decoder.n_out

    def encode(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and log-variance for raw covariate rows."""
        h = self.encoder.predict(self.scaler.transform(x))
        k = self.latent_dim
        return h[..., :k], np.clip(h[..., k:], *LOG_VAR_BOUNDS)

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Decoder mean mapped back to raw covariate units."""
        return self.scaler.inverse(self.decoder.predict(z))

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(x)[0])

    def sample_decoder(self, z: np.ndarray, rng: Rng) -> np.ndarray:
        """Draw from p(x | z) rather than returning its mean."""
        mean = self.decoder.predict(z)
        lv = self.decoder_log_var if self.decoder_log_var is not None else np.zeros(self.p)
        return self.scaler.inverse(mean + np.exp(0.5 * lv) * rng.standard_normal(mean.shape))

    def to_json(self) -> str:
        return json.dumps({
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
            "beta": self.beta,
            "scaler": self.scaler.to_dict(),
            "support": None if self.support is None else self.support.tolist(),
            "decoder_log_var": None if self.decoder_log_var is None else self.decoder_log_var.tolist(),
            "log": self.log,
        })

    @classmethod
    def from_json(cls, text: str) -> "VaeModel":
        d = json.loads(text)
        if "encoder" not in d:
            raise ValueError("not a VAE model file")
        support = None if d.get("support") is None else np.array(d["support"], dtype=float)
        lv = None if d.get("decoder_log_var") is None else np.array(d["decoder_log_var"], dtype=float)
        return cls(MlpModel.from_dict(d["encoder"]), MlpModel.from_dict(d["decoder"]), float(d["beta"]),
                   Scaler.from_dict(d["scaler"]), d.get("log", {}), support, lv)


def kl_standard_normal(mu: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)) per row."""
    return 0.5 * np.sum(mu * mu + np.exp(log_var) - 1.0 - log_var, axis=-1)


def negative_elbo(encoder: MlpModel, decoder: MlpModel, x: np.ndarray, noise: np.ndarray, beta: float,
                  with_grad: bool = True, decoder_log_var: np.ndarray | None = None):
    """Mean negative modified-ELBO over the standardized rows ``x``.

    The reconstruction term is a diagonal Gaussian log-likelihood with the
    ``log(2 pi)`` constant dropped; ``decoder_log_var=None`` means unit
    variance (half the squared error). ``noise`` is the reparameterization
    draw, passed in so the loss is a deterministic function of the parameters.

    Returns ``(loss, recon, kl, grads)``; ``grads`` is the flat list
    ``encoder.params() + decoder.params()`` with the decoder log-variance
    gradient appended when it is given.
    """
    n, k = noise.shape
    h = encoder.forward(x)
    mu, log_var = h[:, :k], h[:, k:]
    std = np.exp(0.5 * log_var)
    z = mu + std * noise
    x_hat = decoder.forward(z)
    resid = x_hat - x
    if decoder_log_var is None:
        prec = 1.0
        recon = 0.5 * np.sum(resid * resid, axis=1)
    else:
        prec = np.exp(-decoder_log_var)
        recon = 0.5 * np.sum(resid * resid * prec + decoder_log_var, axis=1)
    kl = kl_standard_normal(mu, log_var)
    loss = float(np.mean(recon + beta * kl))
    if not with_grad:
        return loss, float(recon.mean()), float(kl.mean()), None
    dec_g = decoder.backward(z, resid * prec / n)
    g_z = dec_g.input
    g_mu = g_z + beta * mu / n
    g_lv = g_z * noise * 0.5 * std + beta * 0.5 * (np.exp(log_var) - 1.0) / n
    enc_g = encoder.backward(x, np.hstack([g_mu, g_lv]))
    grads = enc_g.params() + dec_g.params()
    if decoder_log_var is not None:
        grads.append(0.5 * np.mean(1.0 - resid * resid * prec, axis=0))
    return loss, float(recon.mean()), float(kl.mean()), grads


def fit_vae(data: Dataset | np.ndarray, config: VaeConfig | None = None, rng: Rng | None = None) -> VaeModel:
    """Fit encoder/decoder jointly by AdamW on the negative modified-ELBO."""
    config = config or VaeConfig()
    rng = rng if rng is not None else Rng(0).child("vae")
    x_raw = data.x if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    n, p = x_raw.shape
    if n < 100:
        raise ValueError("need at least 100 rows to fit the VAE")

    scaler, xs = standardize(x_raw)
    order = rng.permutation(n)
    n_val = max(1, int(round(config.val_fraction * n)))
    x_val, x_tr = xs[order[:n_val]], xs[order[n_val:]]

    k = config.latent_dim
    acts = [config.activation] * len(config.hidden) + ["identity"]
    encoder = MlpModel([p, *config.hidden, 2 * k], acts, rng.child("encoder"))
    decoder = MlpModel([k, *config.hidden, p], acts, rng.child("decoder"))
    # start with small posterior variance so early reconstructions are informative
    encoder.biases[-1][k:] = -2.0
    params = encoder.params() + decoder.params()
    names = [f"encoder.{s}" for s in encoder.param_names()] + [f"decoder.{s}" for s in decoder.param_names()]
    dec_lv = None
    if config.decoder_variance == "learned":
        dec_lv = np.zeros(p)
        params.append(dec_lv)
        names.append("decoder.log_var")
    opt = AdamW(params, names, learning_rate=config.learning_rate)

    noise_rng = rng.child("noise")
    batch_rng = rng.child("batches")
    val_noise = rng.child("val-noise").standard_normal((len(x_val), k))
    best, best_params, stale, history = np.inf, None, 0, []
    for epoch in range(config.max_epochs):
        for idx in minibatches(len(x_tr), config.batch_size, batch_rng):
            xb = x_tr[idx]
            eps = noise_rng.standard_normal((len(idx), k))
            loss, _, _, grads = negative_elbo(encoder, decoder, xb, eps, config.beta, decoder_log_var=dec_lv)
            if not np.isfinite(loss):
                raise TrainingError(f"VAE loss diverged at epoch {epoch}")
            opt.step(grads)
        val_loss, val_recon, val_kl, _ = negative_elbo(encoder, decoder, x_val, val_noise, config.beta,
                                                        with_grad=False, decoder_log_var=dec_lv)
        if not np.isfinite(val_loss):
            raise TrainingError(f"VAE validation loss diverged at epoch {epoch}")
        history.append(val_loss)
        if val_loss < best - 1e-10:
            best, stale = val_loss, 0
            best_params = [q.copy() for q in params]
            best_stats = (epoch, val_recon, val_kl)
        else:
            stale += 1
            if stale >= config.patience:
                break
    for q, b in zip(params, best_params):
        q[...] = b

    sd = x_raw.std(axis=0)
    support = np.vstack([x_raw.min(axis=0) - 3 * sd, x_raw.max(axis=0) + 3 * sd])
    model = VaeModel(encoder, decoder, config.beta, scaler, support=support,
                     decoder_log_var=None if dec_lv is None else dec_lv.copy())
    mu_val, lv_val = model.encode(scaler.inverse(x_val))
    kl_per_dim = 0.5 * np.mean(mu_val ** 2 + np.exp(lv_val) - 1.0 - lv_val, axis=0)
    model.log = {
        "epochs": len(history),
        "best_epoch": best_stats[0],
        "val_loss": best,
        "val_recon": best_stats[1],
        "val_kl": best_stats[2],
        "kl_per_dim": kl_per_dim.tolist(),
    }
    if np.any(kl_per_dim < 1e-4):
        warnings.warn(f"posterior collapse in latent dims {np.flatnonzero(kl_per_dim < 1e-4).tolist()}",
                      RuntimeWarning, stacklevel=2)
    log.info("VAE fit: %s", model.log)
    return model


def reconstruction_relative_mse(vae: VaeModel, x: np.ndarray) -> np.ndarray:
    """Per-column MSE of posterior-mean reconstructions on the standardized scale,
    divided by each column's variance on that scale."""
    xs = vae.scaler.transform(x)
    rs = vae.scaler.transform(vae.reconstruct(x))
    return np.mean((rs - xs) ** 2, axis=0) / xs.var(axis=0)


@dataclass
class PerturbConfig:
    alpha: float = 0.5
    m: int = 20000
    alpha_schedule: str = "fixed"
    # sample X' from the probabilistic decoder instead of taking its mean
    decoder_noise: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.m < 100:
            raise ValueError("m must be at least 100")
        if self.alpha_schedule not in ("fixed", "linear_ramp"):
            raise ValueError(f"unknown alpha_schedule {self.alpha_schedule!r}")

    @property
    def scale(self) -> float:
        return min(1.0, self.alpha)

    def scales(self) -> np.ndarray:
        if self.alpha_schedule == "fixed":
            return np.full(self.m, self.scale)
        return self.scale * np.arange(1, self.m + 1) / self.m


@dataclass
class PerturbationSet:
    subject_id: str
    d_prime: np.ndarray
    y_hat: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def t(self) -> np.ndarray:
        return self.d_prime[:, 0]

    @property
    def x(self) -> np.ndarray:
        return self.d_prime[:, 1:]

    @property
    def m(self) -> int:
        return len(self.d_prime)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        p = self.d_prime.shape[1] - 1
        w.writerow(["t", *(f"x{j + 1}" for j in range(p)), "y_hat"])
        y = self.y_hat if self.y_hat is not None else [None] * self.m
        for row, yj in zip(self.d_prime, y):
            w.writerow([int(row[0]), *(repr(float(v)) for v in row[1:]), "" if yj is None else repr(float(yj))])
        return buf.getvalue()


def perturb_latent(vae: VaeModel, x_subject, cfg: PerturbConfig, rng: Rng,
                   subject_id: str = "", eps: np.ndarray | None = None) -> PerturbationSet:
    """Sample ``cfg.m`` synthetic rows ``(T', X')`` around one subject.

    ``eps`` overrides the latent noise draw (shape ``(m, latent_dim)``).
    """
    if vae is None or vae.scaler is None:
        raise UsageError("VAE is not trained")
    x_subject = np.asarray(x_subject, dtype=float)
    if x_subject.shape != (vae.p,):
        raise ShapeError(f"subject must have {vae.p} covariates")
    z = vae.encode(x_subject[None, :])[0][0]
    noise_rng = rng.child("latent")
    if eps is None:
        eps = noise_rng.standard_normal((cfg.m, vae.latent_dim))
    z_prime = z + cfg.scales()[:, None] * eps
    if cfg.decoder_noise:
        x_prime = vae.sample_decoder(z_prime, rng.child("decoder"))
    else:
        x_prime = vae.decode(z_prime)
    if not np.all(np.isfinite(x_prime)):
        raise TrainingError("decoder produced non-finite covariates")
    t_prime = (rng.child("treatment").uniform(size=cfg.m) < 0.5).astype(float)
    return PerturbationSet(
        subject_id=str(subject_id),
        d_prime=np.column_stack([t_prime, x_prime]),
        provenance={"alpha": cfg.alpha, "schedule": cfg.alpha_schedule, "m": cfg.m,
                    "decoder_noise": cfg.decoder_noise,
                    "seed": rng.seed, "latent_center": z.tolist()},
    )


def attach_predictions(pset: PerturbationSet, bb) -> PerturbationSet:
    if pset.y_hat is not None:
        raise UsageError("predictions already attached")
    y_hat = np.asarray(bb.predict(pset.d_prime), dtype=float)
    if y_hat.shape != (pset.m,):
        raise ShapeError("black-box returned the wrong number of predictions")
    pset.y_hat = y_hat
    return pset


def outside_support(vae: VaeModel, pset: PerturbationSet) -> float:
    """Fraction of synthetic rows falling outside the padded training range."""
    if vae.support is None:
        return 0.0
    lo, hi = vae.support
    bad = np.any((pset.x < lo) | (pset.x > hi), axis=1)
    return float(bad.mean())


def latent_decorrelation_report(vae: VaeModel, data: Dataset | np.ndarray) -> dict:
    """Correlation of encoded means versus raw covariates."""
    x = data.x if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    mu, _ = vae.encode(x)

    def max_off(c):
        if c.shape[0] < 2:
            return 0.0
        off = c[~np.eye(c.shape[0], dtype=bool)]
        return float(np.max(np.abs(off)))

    lat = np.atleast_2d(np.corrcoef(mu, rowvar=False))
    raw = np.corrcoef(x, rowvar=False)
    return {"latent_corr": lat, "latent_max_offdiag": max_off(lat),
            "raw_corr": raw, "raw_max_offdiag": max_off(raw)}


def config_dict(config) -> dict:
    d = asdict(config)
    if "hidden" in d:
        d["hidden"] = list(d["hidden"])
    return d
