"""Command-line entry point: ``mow train | compare | verify-theorem | sample``."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import struct
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autoencoder import decode, encode, init_params
from .checkpoint import CheckpointError, atomic_write, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import DataQueue, IdxError, load_idx, philox
from .flow import FlowProblem, convergence_study
from .optimizer import NumericalError, run_training

log = logging.getLogger("mow")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_THEOREM_FAIL = 4

SUMMARY_HEADER = ("k", "eta", "seed", "status", "final_step", "test_rec_error", "test_distance",
                  "selection_metric", "train_cost")


def cmd_train(config_path, resume: str | None = None) -> int:
    cfg = load_config(config_path)
    train, test = cfg.data.load()
    digest = cfg.digest()
    state = queue = None
    if resume:
        ckpt = load_checkpoint(resume)
        if ckpt.digest != digest:
            raise ConfigError(f"checkpoint {resume} was written under a different configuration")
        if ckpt.spec != cfg.spec:
            raise ConfigError("checkpoint network does not match the configured model")
        state = ckpt.state
        queue = ckpt.restore_queue(DataQueue(train, cfg.mow.seed))
    result = run_training(cfg.mow, cfg.spec, train, test, state=state, queue=queue)
    out = cfg.output_dir
    atomic_write(out / "metrics.csv", result.log.to_csv())
    save_checkpoint(out / "checkpoint.mow", cfg.spec, result.state, result.queue, digest)
    if result.log.rows:
        last = result.log.last()
        print(f"step {last.step}: test_rec_error={last.test_rec_error:.6g} "
              f"test_distance={last.test_distance:.6g} selection={last.selection_metric:.6g}")
    else:
        print("no steps run; wrote initial checkpoint")
    return EXIT_OK


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def select_best(rows: list[dict]) -> dict[int, dict]:
    """Lowest selection metric per k among finished runs; ties keep (eta, seed) order."""
    best: dict[int, dict] = {}
    for row in sorted(rows, key=lambda r: (int(r["k"]), -float(r["eta"]), int(r["seed"]))):
        if row["status"] != "ok":
            continue
        metric = float(row["selection_metric"])
        if not math.isfinite(metric):
            continue
        k = int(row["k"])
        if k not in best or metric < float(best[k]["selection_metric"]):
            best[k] = row
    return best


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_compare(config_path, k_list=None, etas=None, seeds=None, steps=None) -> int:
    cfg = load_config(config_path)
    train, test = cfg.data.load()
    k_list = tuple(k_list or cfg.k_list)
    etas = tuple(etas or cfg.etas)
    seed_list = [cfg.mow.seed + i for i in range(seeds or cfg.seeds)]
    if any(not 1 <= k <= cfg.mow.n for k in k_list):
        raise ConfigError(f"k values must lie in [1, {cfg.mow.n}]")
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs").mkdir(exist_ok=True)

    rows = []
    summary_path = out / "compare_runs.csv"
    with open(summary_path, "w", newline="") as fh:
        fh.write(",".join(SUMMARY_HEADER) + "\n")
        for k in k_list:
            for eta in etas:
                for seed in seed_list:
                    mow = replace(cfg.mow, k=k, eta=eta, seed=seed, steps=steps if steps is not None else cfg.mow.steps)
                    row = {"k": k, "eta": eta, "seed": seed}
                    try:
                        result = run_training(mow, cfg.spec, train, test)
                    except NumericalError as exc:
                        log.warning("k=%d eta=%g seed=%d diverged: %s", k, eta, seed, exc)
                        row |= {"status": "diverged", "final_step": exc.state.l, "test_rec_error": math.nan,
                                "test_distance": math.nan, "selection_metric": math.nan, "train_cost": math.nan}
                    else:
                        atomic_write(out / "runs" / f"k{k}_eta{eta:g}_seed{seed}.csv", result.log.to_csv())
                        last = result.log.last() if result.log.rows else None
                        row |= {"status": "ok", "final_step": result.state.l,
                                "test_rec_error": last.test_rec_error if last else math.nan,
                                "test_distance": last.test_distance if last else math.nan,
                                "selection_metric": last.selection_metric if last else math.nan,
                                "train_cost": last.train_cost if last else math.nan}
                    rows.append(row)
                    fh.write(",".join(_fmt(row[c]) for c in SUMMARY_HEADER) + "\n")
                    fh.flush()
                    print(" ".join(f"{c}={_fmt(row[c])}" for c in SUMMARY_HEADER), flush=True)

    best = select_best([{c: _fmt(r[c]) for c in SUMMARY_HEADER} for r in rows])
    buf = io.StringIO()
    buf.write(",".join(SUMMARY_HEADER) + "\n")
    for k in sorted(best):
        buf.write(",".join(best[k][c] for c in SUMMARY_HEADER) + "\n")
    atomic_write(out / "compare_best.csv", buf.getvalue())
    print("best per k:")
    print(buf.getvalue(), end="")
    return EXIT_OK


def flow_problem_from_config(cfg: RunConfig) -> FlowProblem:
    """The flow study always uses raw-sum costs (see :mod:`mow.flow`)."""
    train, _ = cfg.data.load()
    cost = replace(cfg.mow.cost, k_scaling="none")
    etas = sorted(cfg.etas)
    dt = cfg.flow_dt if cfg.flow_dt is not None else etas[0] / 10
    return FlowProblem(train, cfg.spec, cost, init_params(cfg.spec, philox(cfg.mow.seed, 0)),
                       n=cfg.mow.n, k=cfg.mow.k, horizon=cfg.horizon, oracle_samples=cfg.oracle_samples,
                       flow_dt=dt, integrator=cfg.integrator)


def cmd_verify_theorem(config_path) -> int:
    cfg = load_config(config_path)
    if len(cfg.etas) < 3:
        raise ConfigError("verify-theorem needs at least three etas")
    try:
        problem = flow_problem_from_config(cfg)
        report = convergence_study(problem, cfg.etas, cfg.seeds)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    atomic_write(cfg.output_dir / "theorem.csv", report.to_csv())
    print(report.table())
    for line in report.diagnostics:
        print(line)
    print(report.verdict())
    return EXIT_OK if report.passed else EXIT_THEOREM_FAIL


def write_samples(path, samples: np.ndarray, index: list[tuple]) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    count, dim = samples.shape
    atomic_write(path, struct.pack("<II", count, dim) + samples.astype("<f8").tobytes())
    buf = io.StringIO()
    buf.write("row,kind,source,alpha\n")
    for i, (kind, source, alpha) in enumerate(index):
        buf.write(f"{i},{kind},{source},{alpha!r}\n")
    atomic_write(Path(str(path) + ".csv"), buf.getvalue())


def read_samples(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    count, dim = struct.unpack("<II", raw[:8])
    return np.frombuffer(raw[8:], "<f8").reshape(count, dim).copy()


def sample_outputs(theta: ad.ParamVector, spec, mode: str, count: int, rng: np.random.Generator,
                   data: np.ndarray | None = None, steps: int = 8) -> tuple[np.ndarray, list[tuple]]:
    if mode == "prior":
        z = rng.standard_normal((count, spec.latent_dim))
        return decode(theta, spec, z), [("prior", -1, 0.0)] * count
    if data is None:
        raise ConfigError(f"mode {mode} needs a dataset")
    if mode == "reconstruct":
        idx = np.minimum((rng.random(count) * len(data)).astype(np.int64), len(data) - 1)
        x = data[idx]
        xhat = decode(theta, spec, encode(theta, spec, x))
        out = np.empty((2 * count, x.shape[1]))
        out[0::2], out[1::2] = x, xhat
        index = []
        for i in idx:
            index += [("input", int(i), 0.0), ("recon", int(i), 0.0)]
        return out, index
    if mode == "interpolate":
        outs, index = [], []
        alphas = np.linspace(0.0, 1.0, steps)
        for _ in range(count):
            a, b = np.minimum((rng.random(2) * len(data)).astype(np.int64), len(data) - 1)
            za, zb = encode(theta, spec, data[[a, b]])
            z = (1 - alphas)[:, None] * za + alphas[:, None] * zb
            outs.append(decode(theta, spec, z))
            index += [("interp", f"{a}-{b}", float(t)) for t in alphas]
        return np.concatenate(outs), index
    raise ConfigError(f"unknown sample mode {mode!r}")


def cmd_sample(checkpoint_path, count: int, mode: str, out, config_path=None, idx_path=None,
               seed: int = 0) -> int:
    ckpt = load_checkpoint(checkpoint_path)
    data = None
    if idx_path:
        data = load_idx(idx_path).examples
    elif config_path:
        data = load_config(config_path).data.load()[1].examples
    samples, index = sample_outputs(ckpt.state.theta, ckpt.spec, mode, count, philox(seed, 4), data)
    write_samples(out, samples, index)
    print(f"wrote {samples.shape[0]} x {samples.shape[1]} samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("config")
    t.add_argument("--resume", help="checkpoint to continue from")

    c = sub.add_parser("compare", help="grid over k x eta x seed")
    c.add_argument("config")
    c.add_argument("--k", dest="k_list", help="comma-separated k values")
    c.add_argument("--etas", help="comma-separated learning rates")
    c.add_argument("--seeds", type=int)
    c.add_argument("--steps", type=int)

    v = sub.add_parser("verify-theorem", help="gradient-flow convergence study")
    v.add_argument("config")

    s = sub.add_parser("sample", help="decode prior samples, reconstructions or interpolations")
    s.add_argument("checkpoint")
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--mode", choices=("prior", "reconstruct", "interpolate"), default="prior")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="config whose test set feeds reconstruct/interpolate")
    s.add_argument("--idx", help="IDX image file feeding reconstruct/interpolate")
    s.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config, args.resume)
        if args.command == "compare":
            k_list = [int(v) for v in args.k_list.split(",")] if args.k_list else None
            etas = [float(v) for v in args.etas.split(",")] if args.etas else None
            return cmd_compare(args.config, k_list, etas, args.seeds, args.steps)
        if args.command == "verify-theorem":
            return cmd_verify_theorem(args.config)
        return cmd_sample(args.checkpoint, args.count, args.mode, args.out, args.config, args.idx, args.seed)
    except (ConfigError, CheckpointError, IdxError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ad.NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
