"""Command line entry point.

    fedef run CONFIG [--seed N] [--out DIR]
    fedef speedup CONFIG (--n 4,8,16,32 | --m 4,8,16,32) [--seed N] [--out DIR]
    fedef measure-qa --dist gaussian --s 2,10,100 --compressor topk:0.1 --trials 1000
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .compressors import CompressorSpec, deviation_bound, measure_deviation
from .config import ExperimentConfig, dump_config, load_config
from .engine import RunConfig, run_experiment
from .errors import ConfigurationError, DivergenceError, FedEFError, UndefinedRatioError
from .metrics import fmt_float, measure_q_a, write_csv, write_summary_json
from .param_space import GroupLayout, mean_of
from .problems import GradientDistribution, synth_client_gradients

log = logging.getLogger("fedef")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("list must not be empty")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("list must not be empty")
    return vals


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _execute(run: RunConfig, out_dir: Path, tag: str = "") -> dict:
    records, summary = run_experiment(run)
    write_csv(records, out_dir / f"metrics{tag}.csv")
    write_summary_json(summary, out_dir / f"summary{tag}.json")
    return summary


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg.out_dir)
    summary = _execute(cfg.run, out)
    out.joinpath("config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    print(f"{cfg.run.T} rounds  grad_norm_sq={summary['final_grad_norm_sq']:.6g}  "
          f"loss={summary['final_train_loss']:.6g}  bits_up={summary['bits_up_total']}  -> {out}")
    return 0


def speedup_configs(run: RunConfig, n_list: list[int] | None = None,
                    m_list: list[int] | None = None) -> list[tuple[str, RunConfig]]:
    """One config per setting with ``eta = 0.1 sqrt(n or m)`` and ``eta_l = 0.1``."""
    out = []
    for n in n_list or []:
        hp = replace(run.hp, eta=0.1 * math.sqrt(n), eta_l=0.1)
        out.append((f"_n{n}", replace(run, problem=replace(run.problem, n=n), m=None, hp=hp)))
    for m in m_list or []:
        hp = replace(run.hp, eta=0.1 * math.sqrt(m), eta_l=0.1)
        out.append((f"_m{m}", replace(run, m=m, hp=hp)))
    return out


def cmd_speedup(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    settings = speedup_configs(cfg.run, args.n, args.m)
    out = Path(cfg.out_dir)
    for tag, run in settings:
        summary = _execute(run, out, tag)
        print(f"{tag[1:]:>6}  eta={run.hp.eta:.4g}  final grad_norm_sq={summary['final_grad_norm_sq']:.6g}")
    return 0


QA_HEADER = ("s", "mean_q_a_sq", "max_q_a_sq", "q_c_sq_bound", "mean_q_c_sq_empirical", "trials")


def measure_qa_table(dist: GradientDistribution, s_list: list[float], spec: CompressorSpec, trials: int,
                     rng: np.random.Generator, n: int = 5, d: int = 1100) -> list[dict]:
    """Mean / max discrepancy per heterogeneity level, with the q_C^2 references.

    ``mean_q_c_sq_empirical`` compresses the average instead of averaging the
    compressions, which is what the q_C^2 bound controls.
    """
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    layout = GroupLayout.single(d)
    rows = []
    for s in s_list:
        qa, qc = [], []
        for _ in range(trials):
            grads = synth_client_gradients(dist, n, d, s, rng, layout)
            try:
                qa.append(measure_q_a(grads, spec, rng))
                qc.append(measure_deviation(spec, mean_of(grads), rng))
            except UndefinedRatioError:
                continue
        rows.append({
            "s": s,
            "mean_q_a_sq": float(np.mean(qa)),
            "max_q_a_sq": float(np.max(qa)),
            "q_c_sq_bound": deviation_bound(spec, layout),
            "mean_q_c_sq_empirical": float(np.mean(qc)),
            "trials": len(qa),
        })
    return rows


def cmd_measure_qa(args) -> int:
    try:
        spec = CompressorSpec.parse(args.compressor)
    except ValueError as exc:
        raise ConfigurationError(f"--compressor: {exc}") from None
    dist = GradientDistribution(args.dist, args.scale)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    rows = measure_qa_table(dist, args.s, spec, args.trials, rng, n=args.clients, d=args.dim)
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"qa_{args.dist}_{str(spec).replace(':', '-')}.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QA_HEADER)
        for r in rows:
            w.writerow([fmt_float(r["s"]), fmt_float(r["mean_q_a_sq"]), fmt_float(r["max_q_a_sq"]),
                        "" if r["q_c_sq_bound"] is None else fmt_float(r["q_c_sq_bound"]),
                        fmt_float(r["mean_q_c_sq_empirical"]), r["trials"]])
    for r in rows:
        bound = "n/a" if r["q_c_sq_bound"] is None else f"{r['q_c_sq_bound']:.4f}"
        print(f"s={r['s']:<6g} mean q_A^2={r['mean_q_a_sq']:.4f}  max={r['max_q_a_sq']:.4f}  q_C^2 bound={bound}")
    print(f"-> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedef", description="Compressed federated learning with error feedback")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment from a config file")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("speedup", help="sweep n (full participation) or m (partial participation)")
    s.add_argument("config")
    grp = s.add_mutually_exclusive_group(required=True)
    grp.add_argument("--n", type=_int_list)
    grp.add_argument("--m", type=_int_list)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_speedup)

    q = sub.add_parser("measure-qa", help="compression discrepancy on synthetic heterogeneous gradients")
    q.add_argument("--dist", choices=("gaussian", "laplace"), default="gaussian")
    q.add_argument("--s", type=_float_list, default=[2.0, 10.0, 100.0])
    q.add_argument("--compressor", default="topk:0.1")
    q.add_argument("--trials", type=int, default=1000)
    q.add_argument("--scale", type=float, default=0.01, help="gamma (gaussian) or lambda (laplace)")
    q.add_argument("--clients", type=int, default=5)
    q.add_argument("--dim", type=int, default=1100)
    q.add_argument("--seed", type=int)
    q.add_argument("--out")
    q.set_defaults(func=cmd_measure_qa)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FedEFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
