"""Run configuration, pipeline stages and the run manifest.

Every stage reads its inputs from and writes its outputs to one run
directory. Numerical outputs are deterministic functions of the resolved
config, so reruns reproduce them byte for byte; wall-clock timings live only
in the manifest.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import partial, wraps
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import LimeConfig, blackbox_explain, lime_explain, q_learning_fit
from .blackbox import BlackboxConfig, BlackboxModel
from .blackbox import fit as fit_blackbox
from .evaluation import bias_table, fit_propensity, point_fidelity, policy_report
from .moe import Explanation, MoEConfig, explain_subject, fit_surrogate
from .numkit import Rng, UsageError
from .simgen import Dataset, GroundTruth, SimConfig, generate, truth_sidecar
from .vaegen import PerturbConfig, VaeConfig, VaeModel, attach_predictions, fit_vae, outside_support, perturb_latent

log = logging.getLogger(__name__)

METHODS = ("li-itr", "lime", "qlearn", "blackbox")
# A subject is skipped when more than this share of its synthetic rows leave
# the training support box.
MAX_OUTSIDE_FRACTION = 0.01


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class EvalConfig:
    n_test: int = 200
    replicates: int = 1


@dataclass
class BenchmarkConfig:
    grid: list = field(default_factory=lambda: [{"n_train": 2000, "m_synth": 20000}])
    methods: list = field(default_factory=lambda: list(METHODS))


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    workers: int = 1
    sim: SimConfig = field(default_factory=SimConfig)
    blackbox: BlackboxConfig = field(default_factory=BlackboxConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    lime: LimeConfig = field(default_factory=LimeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    SECTIONS = {"sim": SimConfig, "blackbox": BlackboxConfig, "vae": VaeConfig, "perturb": PerturbConfig,
                "moe": MoEConfig, "lime": LimeConfig, "eval": EvalConfig, "benchmark": BenchmarkConfig}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        try:
            for key, value in d.items():
                section = cls.SECTIONS.get(key)
                if section is None:
                    kwargs[key] = value
                    continue
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                allowed = {f.name for f in fields(section)}
                bad = set(value) - allowed
                if bad:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                kwargs[key] = section(**value)
            cfg = cls(**kwargs)
            cfg.seed = int(cfg.seed)
            cfg.workers = int(cfg.workers)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.sim.seed = cfg.seed
        if cfg.eval.n_test < 1:
            raise ConfigError("eval.n_test must be positive")
        return cfg

    def to_dict(self) -> dict:
        return json.loads(json.dumps({
            "seed": self.seed, "out_dir": self.out_dir, "workers": self.workers,
            **{name: _section_dict(getattr(self, name)) for name in self.SECTIONS},
        }))

    def numeric_dict(self) -> dict:
        """Config fields that affect numerical outputs (excludes paths and workers)."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("workers")
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.numeric_dict(), sort_keys=True).encode()).hexdigest()


def _section_dict(section) -> dict:
    if hasattr(section, "to_dict"):
        return section.to_dict()
    d = asdict(section)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


# ---------------------------------------------------------------- manifest


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """A run directory plus its manifest."""

    def __init__(self, cfg: RunConfig, out_dir: str | Path | None = None):
        self.cfg = cfg
        self.dir = Path(out_dir or cfg.out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"outputs": {}, "timings": {}}
        self.manifest.update(config_hash=cfg.config_hash(), config=cfg.to_dict(), versions=versions())

    def path(self, name: str) -> Path:
        return self.dir / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifact(str(p))
        return p

    def write(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        self.manifest["outputs"][name] = sha256_file(p)
        return p

    def record(self, stage: str, seconds: float):
        self.manifest["timings"][stage] = round(seconds, 3)
        self.manifest["outputs"] = dict(sorted(self.manifest["outputs"].items()))
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))


def versions() -> dict:
    import sklearn

    return {"liitr": __version__, "numpy": np.__version__, "scikit-learn": sklearn.__version__,
            "python": platform.python_version()}


def timed(stage: str):
    def deco(fn):
        @wraps(fn)
        def wrapper(run: Run, *args, **kwargs):
            t0 = time.perf_counter()
            out = fn(run, *args, **kwargs)
            # per-method stages get one timing entry each
            name = f"{stage}:{args[0]}" if args and isinstance(args[0], str) else stage
            run.record(name, time.perf_counter() - t0)
            return out
        return wrapper
    return deco


# ---------------------------------------------------------------- loaders


def read_dataset(run: Run, name: str) -> Dataset:
    return Dataset.from_csv(run.require(name).read_text())


def read_truth(run: Run) -> dict:
    return json.loads(run.require("truth.json").read_text())


def read_blackbox(run: Run) -> BlackboxModel:
    try:
        return BlackboxModel.from_json(run.require("blackbox.json").read_text())
    except (KeyError, ValueError) as exc:
        raise UsageError(f"blackbox.json does not hold a black-box model: {exc}") from exc


def read_vae(run: Run) -> VaeModel:
    try:
        return VaeModel.from_json(run.require("vae.json").read_text())
    except (KeyError, ValueError) as exc:
        raise UsageError(f"vae.json does not hold a VAE model: {exc}") from exc


def read_explanations(run: Run, method: str) -> list[Explanation]:
    lines = run.require(f"explanations_{method}.jsonl").read_text().splitlines()
    return [Explanation.from_dict(json.loads(line)) for line in lines if line.strip()]


# ---------------------------------------------------------------- stages


@timed("simulate")
def simulate(run: Run) -> tuple[Dataset, Dataset, GroundTruth]:
    """Draw training and test rows in one pass so both share the region medians."""
    cfg = run.cfg
    n_train, n_test = cfg.sim.n, cfg.eval.n_test
    sim = SimConfig(**{**asdict(cfg.sim), "n": n_train + n_test, "seed": cfg.seed})
    data, truth = generate(sim)
    train, test = data.subset(slice(0, n_train)), data.subset(slice(n_train, None))
    run.write("data.csv", train.to_csv())
    run.write("test.csv", test.to_csv())
    run.write("truth.json", truth_sidecar(truth, cfg.sim, n_train=n_train, n_test=n_test))
    return train, test, truth


@timed("fit-blackbox")
def fit_blackbox_stage(run: Run) -> BlackboxModel:
    data = read_dataset(run, "data.csv")
    bb = fit_blackbox(data, run.cfg.blackbox, Rng(run.cfg.seed).child("blackbox"))
    run.write("blackbox.json", bb.to_json(seed=run.cfg.seed, config=_section_dict(run.cfg.blackbox),
                                          train_r2=bb.log["train_r2"], val_r2=bb.log["val_r2"]))
    return bb


@timed("fit-vae")
def fit_vae_stage(run: Run) -> VaeModel:
    data = read_dataset(run, "data.csv")
    vae = fit_vae(data, run.cfg.vae, Rng(run.cfg.seed).child("vae"))
    run.write("vae.json", vae.to_json())
    return vae


def _liitr_subject(item, vae: VaeModel, bb: BlackboxModel, perturb: PerturbConfig, moe_cfg: MoEConfig,
                   seed: int):
    i, x = item
    root = Rng(seed)
    sid = str(i)
    lo, hi = vae.support if vae.support is not None else (-np.inf, np.inf)
    if np.any(x < lo) or np.any(x > hi):
        return None, {"subject_id": sid, "reason": "subject outside training support box"}
    pset = perturb_latent(vae, x, perturb, root.child(f"perturb:{sid}"), subject_id=sid)
    frac = outside_support(vae, pset)
    if frac > MAX_OUTSIDE_FRACTION:
        return None, {"subject_id": sid, "reason": "perturbations outside training support box",
                      "outside_fraction": frac}
    attach_predictions(pset, bb)
    surrogate = fit_surrogate(pset, moe_cfg, root.child(f"moe:{sid}"))
    e = explain_subject(x, surrogate, pset, subject_id=sid)
    e.extra.update(outside_fraction=frac, usage=surrogate.diagnostics.usage,
                   collapsed=surrogate.diagnostics.collapsed, mixture_r2=surrogate.diagnostics.local_r2)
    return e, None


def _lime_subject(item, bb: BlackboxModel, lime_cfg: LimeConfig, seed: int):
    i, x = item
    return lime_explain(x, bb, lime_cfg, Rng(seed).child(f"lime:{i}"), subject_id=str(i)), None


def _fan_out(fn, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


@timed("explain")
def explain(run: Run, method: str) -> list[Explanation]:
    """One explanation per test subject, skipping subjects outside the support box."""
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {METHODS}")
    cfg = run.cfg
    test = read_dataset(run, "test.csv")
    items = list(enumerate(test.x))
    skipped = []
    if method == "qlearn":
        model = q_learning_fit(read_dataset(run, "data.csv"), cfg.moe.h0_spec, cfg.moe.h1_spec)
        run.write("qlearn.json", model.to_json())
        out = [model.explain(x, str(i)) for i, x in items]
    elif method == "blackbox":
        bb = read_blackbox(run)
        out = [blackbox_explain(x, bb, str(i)) for i, x in items]
    elif method == "lime":
        bb = read_blackbox(run)
        lime_cfg = LimeConfig(**{**asdict(cfg.lime), "h0_spec": cfg.moe.h0_spec, "h1_spec": cfg.moe.h1_spec})
        results = _fan_out(partial(_lime_subject, bb=bb, lime_cfg=lime_cfg, seed=cfg.seed), items, cfg.workers)
        out = [e for e, _ in results]
    else:
        bb, vae = read_blackbox(run), read_vae(run)
        if vae.p != bb.p or vae.p != test.p:
            raise UsageError(f"covariate count mismatch: vae {vae.p}, black-box {bb.p}, data {test.p}")
        fn = partial(_liitr_subject, vae=vae, bb=bb, perturb=cfg.perturb, moe_cfg=cfg.moe, seed=cfg.seed)
        results = _fan_out(fn, items, cfg.workers)
        out = [e for e, _ in results if e is not None]
        skipped = [s for _, s in results if s is not None]
    for s in skipped:
        log.warning("skipped subject %s: %s", s["subject_id"], s["reason"])
    run.write(f"explanations_{method}.jsonl", "".join(e.to_json() + "\n" for e in out))
    run.write(f"skipped_{method}.json", json.dumps(skipped, indent=1))
    return out


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        keys = list(rows[0])
        for r in rows[1:]:
            keys += [k for k in r if k not in keys]
        w = csv.DictWriter(buf, keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def evaluate_methods(run: Run, methods=None, setting: dict | None = None) -> dict:
    """Score every available explanations file against the ground truth."""
    cfg = run.cfg
    truth_d = read_truth(run)
    truth = GroundTruth.from_dict(truth_d)
    n_train = int(truth_d.get("n_train", cfg.sim.n))
    test_region = truth.region[n_train:]
    test_opt = truth.optimal_t[n_train:]
    test = read_dataset(run, "test.csv")
    train = read_dataset(run, "data.csv")
    prop = fit_propensity(train)
    bb = read_blackbox(run) if run.path("blackbox.json").exists() else None
    methods = [m for m in (methods or METHODS) if run.path(f"explanations_{m}.jsonl").exists()]
    if not methods:
        raise MissingArtifact("no explanations found; run `explain` first")

    bias_rows, policy_rows, detail = [], [], {}
    for method in methods:
        expl = read_explanations(run, method)
        idx = np.array([int(e.subject_id) for e in expl], dtype=int)
        rec = np.array([e.recommended_t for e in expl], dtype=int)
        pol = policy_report(method, rec, test_opt[idx], test.subset(idx), prop, setting)
        entry = {"policy": pol.row(), "n_subjects": len(expl), "n_skipped": cfg.eval.n_test - len(expl)}
        if expl and expl[0].beta_k2:
            rep = bias_table(expl, truth, test_region[idx], method, setting)
            bias_rows += rep.rows()
            entry["bias"] = asdict(rep)
            if bb is not None:
                fid = [point_fidelity(e, bb, test.x[int(e.subject_id)], cfg.moe.h0_spec, cfg.moe.h1_spec)
                       for e in expl]
                entry["mean_point_fidelity"] = float(np.mean(fid))
            r2 = [e.local_r2 for e in expl if e.local_r2 is not None]
            mae = [e.extra["local_mae"] for e in expl if e.extra.get("local_mae") is not None]
            entry["median_local_r2"] = statistics.median(r2) if r2 else None
            entry["mean_local_mae"] = float(np.mean(mae)) if mae else None
        policy_rows.append({**pol.row(), "n_skipped": entry["n_skipped"],
                            "median_local_r2": entry.get("median_local_r2"),
                            "mean_point_fidelity": entry.get("mean_point_fidelity")})
        detail[method] = entry
    detail["propensity"] = {"intercept": prop.intercept, "coef": prop.coef.tolist(), "converged": prop.converged}
    return {"bias_rows": bias_rows, "policy_rows": policy_rows, "detail": detail}


@timed("evaluate")
def evaluate(run: Run, methods=None) -> dict:
    res = evaluate_methods(run, methods)
    run.write("report_bias.csv", _csv(res["bias_rows"]))
    run.write("report_policy.csv", _csv(res["policy_rows"]))
    run.write("report.json", json.dumps(res["detail"], indent=1, sort_keys=True))
    return res


def _cell_name(cell: dict, replicate: int) -> str:
    name = f"n{cell['n_train']}_m{cell['m_synth']}"
    if cell.get("misspecified"):
        name += "_mis"
    return f"{name}_r{replicate}"


def run_cell(cfg: RunConfig, cell: dict, replicate: int, out_dir: Path, methods) -> dict:
    d = cfg.to_dict()
    d["seed"] = cfg.seed + replicate
    d["sim"]["n"] = int(cell["n_train"])
    d["sim"]["misspecified"] = bool(cell.get("misspecified", False))
    d["perturb"]["m"] = int(cell["m_synth"])
    d["lime"]["m"] = int(cell["m_synth"])
    cell_cfg = RunConfig.from_dict(d)
    run = Run(cell_cfg, out_dir)
    simulate(run)
    fit_blackbox_stage(run)
    if "li-itr" in methods:
        fit_vae_stage(run)
    for method in methods:
        explain(run, method)
    return evaluate(run, methods)


@timed("benchmark")
def benchmark(run: Run) -> bool:
    """Run the full pipeline per grid cell and replicate; return True if all cells succeeded."""
    cfg = run.cfg
    methods = list(cfg.benchmark.methods)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown benchmark methods: {bad}")
    rows, detail, ok = [], {}, True
    for cell in cfg.benchmark.grid:
        for r in range(cfg.eval.replicates):
            name = _cell_name(cell, r)
            setting = {"cell": name, "n_train": int(cell["n_train"]), "m_synth": int(cell["m_synth"]),
                       "misspecified": bool(cell.get("misspecified", False)), "replicate": r}
            try:
                res = run_cell(cfg, cell, r, run.dir / "cells" / name, methods)
            except Exception as exc:  # a failed cell must not stop the grid
                log.error("cell %s failed: %s", name, exc)
                ok = False
                rows.append({**setting, "status": "failed", "error": str(exc)})
                detail[name] = {"status": "failed", "error": str(exc)}
                continue
            for prow in res["policy_rows"]:
                row = {**setting, "status": "ok", **prow}
                for b in res["bias_rows"]:
                    if b["method"] == prow["method"]:
                        row[f"{b['group']}_{b['coef']}_mean_abs_bias"] = b["mean_abs_bias"]
                        row[f"{b['group']}_{b['coef']}_sd_bias"] = b["sd_bias"]
                rows.append(row)
            detail[name] = {"status": "ok", **res["detail"]}
    run.write("benchmark.csv", _csv(rows))
    run.write("benchmark.json", json.dumps(detail, indent=1, sort_keys=True))
    return ok
