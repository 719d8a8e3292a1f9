"""Command line: generate-data, train, sample, evaluate, inspect.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 file format error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .architecture import build_split_flow
from .autodiff import NonFiniteError
from .config import ConfigError, RunConfig, desk_config, load_config
from .energy import ChainTarget
from .evaluation import draw_samples, evaluate, write_report
from .io import (
    FormatError,
    load_checkpoint,
    read_trajectory,
    save_checkpoint,
    save_forcefield,
    save_topology,
    write_trajectory,
)
from .mcmc import Domain, SamplerError, metropolis
from .systems import minimum_state
from .training import TrainingDivergence, run_schedule

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_FORMAT = 4

log = logging.getLogger("splitbg")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.training.seed = args.seed
        cfg.evaluation.seed = args.seed
    if args.out is not None:
        cfg.output = str(Path(args.out).resolve())
    return cfg


def _out(cfg: RunConfig) -> Path:
    out = cfg.resolve(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_path(cfg: RunConfig) -> Path:
    _out(cfg)
    return cfg.dataset_path()


def _target(cfg: RunConfig) -> ChainTarget:
    topo, ref, ff = cfg.build_system()
    return ChainTarget(topo, ref, ff, cfg.temperature)


def split_dataset(frames: np.ndarray, heldout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, held-out) split."""
    order = np.random.default_rng([seed, 3]).permutation(len(frames))
    n_held = int(round(heldout_fraction * len(frames)))
    return frames[order[n_held:]], frames[order[:n_held]]


def _load_data(cfg: RunConfig, target: ChainTarget) -> tuple[np.ndarray, np.ndarray]:
    frames, counts = read_trajectory(_dataset_path(cfg))
    if tuple(counts) != target.topology.counts:
        raise ConfigError(f"dataset layout {counts} does not match the topology {target.topology.counts}")
    return split_dataset(frames, cfg.heldout_fraction, cfg.data.seed)


def cmd_generate_data(cfg: RunConfig) -> int:
    cfg.validate()
    target = _target(cfg)
    out = _out(cfg)
    d = cfg.data
    rng = np.random.default_rng(d.seed)
    x0 = np.tile(minimum_state(target.topology, target.reference), (d.chains, 1))
    res = metropolis(target.reduced_energy, x0, d.n_frames, rng, Domain.for_topology(target.topology),
                     burn_in=d.burn_in, thin=d.thin, step_size=d.step_size)
    path = _dataset_path(cfg)
    write_trajectory(path, res.frames, target.topology.counts)
    save_topology(out / "topology.json", target.topology, target.reference)
    save_forcefield(out / "forcefield.json", target.forcefield)
    print(f"wrote {path}: {res.summary()}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, resume: str | None = None, dry_run: bool = False) -> int:
    cfg.validate(need_dataset=not dry_run)
    target = _target(cfg)
    if resume:
        flow, extra = load_checkpoint(resume)
        start = int(extra.get("stage", 0))
    else:
        flow = build_split_flow(target.topology, cfg.architecture, cfg.training.seed)
        start = 0
    if dry_run:
        print(json.dumps(flow.describe(), sort_keys=True))
        return EXIT_OK
    train, _ = _load_data(cfg, target)
    if not resume:
        flow.fit_statistics(train)
    out = _out(cfg)
    result = run_schedule(flow, train, target, cfg.training, out_dir=out, start_stage=start,
                          save=save_checkpoint)
    name = "metrics.csv" if start == 0 else f"metrics_from_stage{start + 1}.csv"
    (out / name).write_text(result.csv_text())
    print(f"wrote {out / name} and {len(result.checkpoints)} checkpoints")
    return EXIT_OK


def cmd_sample(cfg: RunConfig, checkpoint: str, n: int, seed: int) -> int:
    flow, _ = load_checkpoint(checkpoint)
    target = _target(cfg)
    if flow.dim != target.dim:
        raise FormatError("checkpoint does not match the configured system")
    out = _out(cfg)
    x, log_q = draw_samples(flow, n, np.random.default_rng(seed))
    write_trajectory(out / "samples.bgic", x, target.topology.counts)
    energy = target.energy(x) if len(x) else np.zeros(0)
    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["log_prob", "energy_kcal_mol"])
        for a, b in zip(log_q, energy):
            w.writerow([f"{a:.17g}", f"{b:.17g}"])
    print(f"wrote {n} samples to {out / 'samples.bgic'}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, checkpoint: str) -> int:
    cfg.validate(need_dataset=True)
    flow, _ = load_checkpoint(checkpoint)
    target = _target(cfg)
    _, held = _load_data(cfg, target)
    report = evaluate(flow, held, target, cfg.evaluation)
    paths = write_report(report, _out(cfg) / "evaluation")
    dd, e = report["delta_d"], report["energy_below_median"]
    print(f"delta_D {dd['mean']:.4f} +- {dd['sd']:.4f} A, energy {e['mean']:.3f} +- {e['sd']:.3f} "
          f"kcal/mol, NLL {report['heldout_nll']:.4f}, ESS {report['ess']:.3f}%")
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_inspect(cfg: RunConfig, path: str | None) -> int:
    if path is None:
        topo, _, ff = cfg.build_system()
        print(cfg.dumps())
        print(f"atoms={topo.n_atoms} residues={topo.n_residues} counts={topo.counts} "
              f"lj_pairs={len(ff.lj_pairs)}")
        return EXIT_OK
    head = Path(path).read_bytes()[:4]
    if head == b"BGFW":
        flow, extra = load_checkpoint(path)
        print(json.dumps({**flow.describe(), **extra}, sort_keys=True))
    elif head == b"BGIC":
        frames, counts = read_trajectory(path)
        print(f"frames={len(frames)} counts={counts}")
    else:
        raise FormatError(f"{path}: unrecognised file (magic {head!r})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitbg", description="Split-flow Boltzmann generators on toy chains")
    p.add_argument("--config", help="run configuration (JSON)")
    p.add_argument("--seed", type=int, help="overrides every seed in the config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", help="sample a reference trajectory by Metropolis MCMC")
    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("--resume", help="continue after the stage stored in this checkpoint")
    t.add_argument("--dry-run", action="store_true", help="validate and print the parameter count")
    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("-n", type=int, default=1000)
    e = sub.add_parser("evaluate", help="evaluation report for a checkpoint")
    e.add_argument("checkpoint")
    i = sub.add_parser("inspect", help="summarise the config or a checkpoint/trajectory file")
    i.add_argument("path", nargs="?")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(args.threads)
    try:
        cfg = _config(args)
        if args.command == "generate-data":
            return cmd_generate_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume, args.dry_run)
        if args.command == "sample":
            return cmd_sample(cfg, args.checkpoint, args.n, cfg.training.seed)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint)
        return cmd_inspect(cfg, args.path)
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SamplerError as exc:
        print(f"sampler failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TrainingDivergence, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
