"""Experiment config files (YAML) <-> :class:`RunConfig`.

Layout of the document::

    seed: 0
    problem:     {kind, n, d, spread, noise_sigma, groups, seed, n_samples,
                  n_features, n_classes, hidden, l2_reg, data_path}
    fl:          {m, T, K, eta, eta_l, optimizer, beta1, beta2, epsilon, batch}
    compression: {upload, download, ef, restart_S, restart_start}
    metrics:     {qa_every}
    output:      {dir}

Every key is optional; unknown keys are rejected with their dotted path.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .compressors import CompressorSpec
from .engine import RunConfig
from .errors import ConfigurationError
from .local_trainer import Hyperparams
from .problems import ProblemSpec

DATA_BATCH_DEFAULT = 32

_SECTIONS = {
    "problem": {"kind", "n", "d", "spread", "noise_sigma", "groups", "seed", "n_samples", "n_features",
                "n_classes", "hidden", "l2_reg", "data_path"},
    "fl": {"m", "T", "K", "eta", "eta_l", "optimizer", "beta1", "beta2", "epsilon", "batch"},
    "compression": {"upload", "download", "ef", "restart_S", "restart_start"},
    "metrics": {"qa_every"},
    "output": {"dir"},
}
_INT_KEYS = {"problem.n", "problem.d", "problem.seed", "problem.n_samples", "problem.n_features",
             "problem.n_classes", "fl.m", "fl.T", "fl.K", "compression.restart_S",
             "compression.restart_start", "metrics.qa_every", "seed"}
_FLOAT_KEYS = {"problem.spread", "problem.noise_sigma", "problem.l2_reg", "fl.eta", "fl.eta_l",
               "fl.beta1", "fl.beta2", "fl.epsilon"}


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig
    out_dir: str = "out"


def _typed(path: str, value: Any) -> Any:
    if value is None:
        return None
    if path in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if path in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    return value


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigurationError(f"{name}: expected a mapping")
    for key in sec:
        if key not in _SECTIONS[name]:
            raise ConfigurationError(f"{name}.{key}: unknown key")
    return {k: _typed(f"{name}.{k}", v) for k, v in sec.items()}


def _compressor(path: str, value: Any) -> CompressorSpec | None:
    if value is None:
        return None
    if not isinstance(value, str):
        raise ConfigurationError(f"{path}: expected a compressor string such as 'topk:0.1'")
    try:
        return CompressorSpec.parse(value)
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def _int_list(path: str, value: Any) -> tuple[int, ...] | None:
    if value is None:
        return None
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool)
                                                       for v in value):
        raise ConfigurationError(f"{path}: expected a list of integers")
    return tuple(value)


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigurationError("config root must be a mapping")
    for key in doc:
        if key not in _SECTIONS and key != "seed":
            raise ConfigurationError(f"{key}: unknown key")
    seed = _typed("seed", doc.get("seed", 0))
    prob = _section(doc, "problem")
    fl = _section(doc, "fl")
    comp = _section(doc, "compression")
    metrics = _section(doc, "metrics")
    output = _section(doc, "output")

    if "groups" in prob:
        prob["groups"] = _int_list("problem.groups", prob["groups"])
    if "hidden" in prob:
        prob["hidden"] = _int_list("problem.hidden", prob["hidden"]) or ()
    try:
        problem = ProblemSpec(**prob)
    except TypeError as exc:
        raise ConfigurationError(f"problem: {exc}") from None

    batch = fl.pop("batch", "default")
    if batch == "default":
        batch = None if problem.kind == "quadratic" else DATA_BATCH_DEFAULT
    elif batch == "full":
        batch = None
    elif batch is not None and (isinstance(batch, bool) or not isinstance(batch, int)):
        raise ConfigurationError(f"fl.batch: expected an integer, 'full' or null, got {batch!r}")

    hp_keys = {"eta", "eta_l", "K", "beta1", "beta2", "epsilon"}
    try:
        hp = Hyperparams(batch_size=batch, **{k: v for k, v in fl.items() if k in hp_keys and v is not None})
    except ConfigurationError as exc:
        raise ConfigurationError(f"fl: {exc}") from None

    upload = _compressor("compression.upload", comp.get("upload", "identity"))
    run = RunConfig(
        problem=problem,
        m=fl.get("m"),
        T=fl.get("T", 100),
        hp=hp,
        optimizer=fl.get("optimizer") or "sgd",
        upload=upload if upload is not None else CompressorSpec.identity(),
        download=_compressor("compression.download", comp.get("download")),
        ef=bool(comp.get("ef", True)),
        restart_S=comp.get("restart_S"),
        restart_start=comp.get("restart_start") or 1,
        seed=seed,
        qa_every=metrics.get("qa_every", 1),
    )
    return ExperimentConfig(run, str(output.get("dir") or "out"))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    r, p, hp = cfg.run, cfg.run.problem, cfg.run.hp
    return {
        "seed": r.seed,
        "problem": {
            "kind": p.kind, "n": p.n, "d": p.d, "spread": p.spread, "noise_sigma": p.noise_sigma,
            "groups": None if p.groups is None else list(p.groups), "seed": p.seed,
            "n_samples": p.n_samples, "n_features": p.n_features, "n_classes": p.n_classes,
            "hidden": list(p.hidden), "l2_reg": p.l2_reg, "data_path": p.data_path,
        },
        "fl": {
            "m": r.m, "T": r.T, "K": hp.K, "eta": hp.eta, "eta_l": hp.eta_l, "optimizer": r.optimizer,
            "beta1": hp.beta1, "beta2": hp.beta2, "epsilon": hp.epsilon,
            "batch": "full" if hp.batch_size is None else hp.batch_size,
        },
        "compression": {
            "upload": str(r.upload), "download": None if r.download is None else str(r.download),
            "ef": r.ef, "restart_S": r.restart_S, "restart_start": r.restart_start,
        },
        "metrics": {"qa_every": r.qa_every},
        "output": {"dir": cfg.out_dir},
    }


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML: {exc}") from None
    return config_from_dict(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
