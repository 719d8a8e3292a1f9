"""Evaluation report: distance distortion, energies, held-out NLL, ESS and RMSF."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geometry import distance_distortion_from_vectors, rmsf
from .training import importance_weights

SAMPLE_CHUNK = 1000


@dataclass
class EvaluationConfig:
    n_samples: int = 4000
    batch_size: int = 1000
    hist_bins: int = 60
    n_features: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 1 or self.batch_size < 1 or self.hist_bins < 1:
            raise ValueError("evaluation sizes must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def mean_sd(v) -> dict:
    v = np.asarray(v, dtype=np.float64)
    return {"mean": float(v.mean()) if len(v) else float("nan"),
            "sd": float(v.std(ddof=1)) if len(v) > 1 else 0.0, "n": int(len(v))}


def below_median(energies: np.ndarray) -> np.ndarray:
    """Energies at or below the median of the whole set."""
    energies = np.asarray(energies, dtype=np.float64)
    return energies[energies <= np.median(energies)]


def histogram_edges(reference: np.ndarray, bins: int) -> np.ndarray:
    """Fixed edges spanning the central 99.8% of the reference energies."""
    lo, hi = np.quantile(reference, [0.001, 0.999])
    pad = 0.25 * (hi - lo) + 1e-9
    return np.linspace(lo - pad, hi + pad, bins + 1)


def draw_samples(flow, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Samples and their log q in chunks of SAMPLE_CHUNK (deterministic order)."""
    xs, lqs = [], []
    for start in range(0, n, SAMPLE_CHUNK):
        x, lq = flow.sample(min(SAMPLE_CHUNK, n - start), rng)
        xs.append(x.value)
        lqs.append(lq.value)
    if not xs:
        return np.zeros((0, flow.dim)), np.zeros(0)
    return np.concatenate(xs), np.concatenate(lqs)


def batched_distortion(dq: np.ndarray, dp: np.ndarray, batch: int) -> np.ndarray:
    """Paired distance distortion per batch of ``batch`` samples."""
    n = min(len(dq), len(dp)) // batch
    if n == 0:
        raise ValueError(f"need at least {batch} samples and reference frames for a distortion batch")
    return np.array([distance_distortion_from_vectors(dq[i * batch:(i + 1) * batch],
                                                      dp[i * batch:(i + 1) * batch]) for i in range(n)])


def evaluate(flow, reference: np.ndarray, target, config: EvaluationConfig,
             samples: tuple[np.ndarray, np.ndarray] | None = None) -> dict:
    """Compare flow samples with held-out reference states of a chain target."""
    config.validate()
    reference = np.asarray(reference, dtype=np.float64)
    if len(reference) < config.batch_size:
        raise ValueError(f"reference set has {len(reference)} frames, fewer than the batch size "
                         f"{config.batch_size}")
    rng = np.random.default_rng([config.seed, 7])
    x, log_q = samples if samples is not None else draw_samples(flow, config.n_samples, rng)
    topo = target.topology
    energy = np.concatenate([target.energy(x[i:i + SAMPLE_CHUNK]) for i in range(0, len(x), SAMPLE_CHUNK)])
    ref_energy = np.concatenate([target.energy(reference[i:i + SAMPLE_CHUNK])
                                 for i in range(0, len(reference), SAMPLE_CHUNK)])
    dq = np.concatenate([target.backbone_distances(x[i:i + SAMPLE_CHUNK])
                         for i in range(0, len(x), SAMPLE_CHUNK)])
    order = rng.permutation(len(reference))
    dp = np.concatenate([target.backbone_distances(reference[order[i:i + SAMPLE_CHUNK]])
                         for i in range(0, len(reference), SAMPLE_CHUNK)])
    dd = batched_distortion(dq, dp, config.batch_size)

    nll = np.concatenate([-flow.log_prob(reference[i:i + SAMPLE_CHUNK]).value
                          for i in range(0, len(reference), SAMPLE_CHUNK)])
    iw = importance_weights(-energy / target.kT - log_q)

    n_rmsf = min(len(x), len(reference), 2000)
    rmsf_q = rmsf(target.cartesian(x[:n_rmsf]), topo)
    rmsf_p = rmsf(target.cartesian(reference[order[:n_rmsf]]), topo)

    edges = histogram_edges(ref_energy, config.hist_bins)
    hist_q, _ = np.histogram(energy, edges)
    hist_p, _ = np.histogram(ref_energy, edges)
    return {
        "delta_d": mean_sd(dd),
        "energy_below_median": mean_sd(below_median(energy)),
        "median_energy": float(np.median(energy)),
        "reference_energy_below_median": mean_sd(below_median(ref_energy)),
        "heldout_nll": float(nll.mean()),
        "ess": iw.ess,
        "ess_degenerate": iw.degenerate,
        "rmsf_samples": rmsf_q.tolist(),
        "rmsf_reference": rmsf_p.tolist(),
        "histogram": {"edges": edges.tolist(), "samples": hist_q.tolist(), "reference": hist_p.tolist()},
        "n_samples": int(len(x)),
        "n_reference": int(len(reference)),
        "features": x[:config.n_features],
    }


def _f(v: float) -> str:
    return f"{float(v):.10g}"


def write_report(report: dict, out_dir) -> list[Path]:
    """report.json, rmsf.csv, energy_hist.csv and features.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = {k: v for k, v in report.items() if k != "features"}
    paths = [out / "report.json", out / "rmsf.csv", out / "energy_hist.csv", out / "features.csv"]
    paths[0].write_text(json.dumps(body, indent=1, sort_keys=True))
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["residue", "rmsf_samples", "rmsf_reference"])
        for i, (a, b) in enumerate(zip(report["rmsf_samples"], report["rmsf_reference"])):
            w.writerow([i, _f(a), _f(b)])
    h = report["histogram"]
    with open(paths[2], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "samples", "reference"])
        for lo, hi, a, b in zip(h["edges"][:-1], h["edges"][1:], h["samples"], h["reference"]):
            w.writerow([_f(lo), _f(hi), a, b])
    feats = np.asarray(report["features"])
    with open(paths[3], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(feats.shape[1] if feats.ndim == 2 else 0)])
        for row in feats:
            w.writerow([_f(v) for v in row])
    return paths
