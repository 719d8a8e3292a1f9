"""Losses, optimiser and the staged training schedule.

Three loss terms are combined per stage: maximum likelihood on data (NLL),
a Gaussian 2-Wasserstein distance between distance-vector moments of flow
samples and of the data (W2), and the reverse KL written through the reduced
energy of flow samples (KL).
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)

ENERGY_CLIP = 1e4
W2_REGULARIZATION = 1e-6
SYMMETRY_TOL = 1e-10

METRIC_COLUMNS = ["epoch", "stage", "nll", "w2", "kl", "median_energy", "ess", "lr", "wall_seconds"]


class TrainingDivergence(RuntimeError):
    def __init__(self, stage: int, epoch: int, terms: dict):
        self.stage, self.epoch, self.terms = stage, epoch, terms
        shown = ", ".join(f"{k}={v}" for k, v in terms.items())
        super().__init__(f"non-finite loss in stage {stage}, epoch {epoch}: {shown}")


# ---------------------------------------------------------------------------
# losses


def nll_loss(flow, batch, rng=None) -> Tensor:
    """-mean log q(x) over a data batch."""
    x = ad.as_tensor(batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return -flow.log_prob(x, rng).mean()


@dataclass
class KLInfo:
    n_clipped: int
    energies: np.ndarray   # reduced energies before clipping
    samples: Tensor
    log_q: np.ndarray


def kl_loss(flow, target, n: int, rng: np.random.Generator, clip: float = ENERGY_CLIP,
            dropout_rng=None, z: np.ndarray | None = None) -> tuple[Tensor, KLInfo]:
    """Reparameterised estimate of E_z[u(f(z))/kT - log|det J_f(z)|].

    Reduced energies above ``clip`` are replaced by the constant ``clip``, so
    clipped samples contribute no energy gradient.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    if z is None:
        z = flow.base.sample(n, rng)
    x, logdet = flow.forward(Tensor(z), dropout_rng)
    u = target.reduced_energy(x)
    loss, n_clipped = _kl_term(u, logdet, clip)
    log_q = flow.base.log_prob(z).value - logdet.value
    return loss, KLInfo(n_clipped, u.value.copy(), x, log_q)


def _kl_term(u: Tensor, logdet: Tensor, clip: float) -> tuple[Tensor, int]:
    clipped = u.value > clip
    n = int(clipped.sum())
    if n:
        log.info("KL energy clip active on %d of %d samples", n, len(clipped))
    return (ad.where(clipped, clip, u) - logdet).mean(), n


def psd_sqrt(S) -> Tensor:
    """Symmetric square root through the eigendecomposition, eigenvalues clamped at 0."""
    S = ad.as_tensor(S)
    sv = S.value
    if sv.shape[-1] != sv.shape[-2]:
        raise ValueError("psd_sqrt needs a square matrix")
    if np.max(np.abs(sv - np.swapaxes(sv, -1, -2))) > SYMMETRY_TOL * max(1.0, np.max(np.abs(sv))):
        raise ValueError("psd_sqrt needs a symmetric matrix")
    lam, vec = ad.eigh(S)
    pos = lam.value > 0
    root = ad.where(pos, ad.sqrt(ad.where(pos, lam, 1.0)), 0.0)
    return (vec * ad.reshape(root, root.shape[:-1] + (1, root.shape[-1]))) @ ad.swap_last(vec)


def _trace_sqrt(M) -> Tensor:
    lam, _ = ad.eigh(M)
    pos = lam.value > 0
    return ad.where(pos, ad.sqrt(ad.where(pos, lam, 1.0)), 0.0).sum(axis=-1)


def gaussian_w2(mu_q, cov_q, mu_p, cov_p, reg: float = W2_REGULARIZATION) -> Tensor:
    """Squared 2-Wasserstein distance between two Gaussians.

    ``|mu_q - mu_p|^2 + tr(C_q) + tr(C_p) - 2 tr((C_p^1/2 C_q C_p^1/2)^1/2)``
    with ``reg * I`` added to both covariances.
    """
    mu_q, cov_q = ad.as_tensor(mu_q), ad.as_tensor(cov_q)
    mu_p, cov_p = ad.as_tensor(mu_p), ad.as_tensor(cov_p)
    d = cov_q.shape[-1]
    eye = reg * np.eye(d)
    cq = cov_q + eye
    cp = cov_p + eye
    rp = psd_sqrt(cp)
    inner = rp @ cq @ rp
    inner = 0.5 * (inner + ad.swap_last(inner))
    diff = mu_q - mu_p
    return ad.square(diff).sum(axis=-1) + ad.trace(cq) + ad.trace(cp) - 2.0 * _trace_sqrt(inner)


def batch_moments(v) -> tuple[Tensor, Tensor]:
    """Mean and unbiased covariance over the leading axis."""
    v = ad.as_tensor(v)
    n = v.shape[0]
    if n < 2:
        raise ValueError("need at least two samples for a covariance")
    mu = v.mean(axis=0)
    c = v - mu
    cov = (ad.swap_last(c) @ c) / (n - 1)
    return mu, 0.5 * (cov + ad.swap_last(cov))


@dataclass
class MomentEstimates:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist(), "n": self.n}


def streaming_moments(chunks) -> MomentEstimates:
    """Mean and 1/(n-1) covariance from an iterable of (m, P) blocks (pairwise merge)."""
    n = 0
    mean = None
    m2 = None
    for block in chunks:
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or len(block) == 0:
            continue
        nb = len(block)
        mb = block.mean(axis=0)
        cb = block - mb
        m2b = cb.T @ cb
        if mean is None:
            n, mean, m2 = nb, mb, m2b
            continue
        delta = mb - mean
        tot = n + nb
        mean = mean + delta * (nb / tot)
        m2 = m2 + m2b + np.outer(delta, delta) * (n * nb / tot)
        n = tot
    if n < 2:
        raise ValueError("need at least two frames for reference moments")
    cov = m2 / (n - 1)
    return MomentEstimates(mean, 0.5 * (cov + cov.T), n)


def fit_reference_moments(dataset: np.ndarray, features: Callable[[np.ndarray], np.ndarray],
                          chunk: int = 1024) -> MomentEstimates:
    """Moments of ``features(frame)`` over a dataset of reduced states."""
    dataset = np.asarray(dataset, dtype=np.float64)
    if len(dataset) < 2:
        raise ValueError("need at least two frames for reference moments")
    return streaming_moments(features(dataset[i:i + chunk]) for i in range(0, len(dataset), chunk))


def w2_loss(q_features, moments: MomentEstimates) -> Tensor:
    """Gaussian W2 between batch moments of ``q_features`` and fixed reference moments."""
    mu_q, cov_q = batch_moments(q_features)
    if mu_q.shape[-1] != len(moments.mean):
        raise ValueError("feature dimension does not match the reference moments")
    return gaussian_w2(mu_q, cov_q, moments.mean, moments.cov)


# ---------------------------------------------------------------------------
# importance weights


@dataclass
class ImportanceResult:
    weights: np.ndarray
    ess: float
    degenerate: bool


def importance_weights(log_w) -> ImportanceResult:
    """Self-normalised weights and ESS in percent, 100 (sum w)^2 / (n sum w^2)."""
    log_w = np.asarray(log_w, dtype=np.float64)
    n = len(log_w)
    if n == 0:
        return ImportanceResult(np.zeros(0), 0.0, True)
    finite = np.isfinite(log_w) & (log_w > -np.inf)
    if not finite.any():
        return ImportanceResult(np.zeros(n), 0.0, True)
    lw = np.where(finite, log_w, -np.inf)
    m = lw[finite].max()
    u = np.exp(lw - m)
    s = u.sum()
    # unnormalised form keeps uniform weights at exactly 100
    ess = 100.0 * s * s / (n * np.sum(u * u))
    return ImportanceResult(u / s, float(ess), False)


def importance_metrics(samples, log_q, target) -> ImportanceResult:
    """log w = -u(x)/kT - log q(x)."""
    samples = np.asarray(samples, dtype=np.float64)
    log_q = np.asarray(log_q, dtype=np.float64)
    if len(samples) != len(log_q):
        raise ValueError("samples and log_q differ in length")
    if len(samples) == 0:
        return importance_weights(np.zeros(0))
    with np.errstate(over="ignore", invalid="ignore"):
        u = np.asarray(target.reduced_energy(samples), dtype=np.float64)
    return importance_weights(-u - log_q)


# ---------------------------------------------------------------------------
# optimiser and scheduler


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float = 2e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            upd = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.value = p.value - self.lr * (upd + self.wd * p.value)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without relative improvement."""

    def __init__(self, optimizer: AdamW, patience: int = 5, factor: float = 0.1,
                 threshold: float = 1e-4, min_lr: float = 0.0):
        self.opt = optimizer
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = np.inf
        self.bad = 0

    def step(self, metric: float) -> None:
        if not np.isfinite(self.best) or metric < self.best - self.threshold * abs(self.best):
            self.best = metric
            self.bad = 0
            return
        self.bad += 1
        if self.bad > self.patience:
            self.opt.lr = max(self.opt.lr * self.factor, self.min_lr)
            self.bad = 0


# ---------------------------------------------------------------------------
# schedule


@dataclass
class Stage:
    name: str
    epochs: int
    nll: bool = True
    w2: bool = False
    kl: bool = False
    lr_scale: float = 1.0  # stage learning rate is config.lr * lr_scale


def default_stages(scale: float = 1.0) -> list[Stage]:
    """NLL; NLL+W2; NLL+W2+KL; NLL+KL with 200/50/20/10 epochs times ``scale``.

    Later stages start at a tenth of the base learning rate, where the plateau
    scheduler leaves a converged first stage.
    """
    e = [max(int(round(n * scale)), 0) for n in (200, 50, 20, 10)]
    return [Stage("nll", e[0]), Stage("nll_w2", e[1], w2=True, lr_scale=0.1),
            Stage("nll_w2_kl", e[2], w2=True, kl=True, lr_scale=0.1),
            Stage("nll_kl", e[3], kl=True, lr_scale=0.1)]


@dataclass
class TrainConfig:
    lr: float = 2e-3
    weight_decay: float = 1e-4
    patience: int = 5
    factor: float = 0.1
    batch_size: int = 256
    w_nll: float = 1.0
    w_w2: float = 0.1
    w_kl: float = 0.01
    anneal_fraction: float = 0.1
    energy_clip: float = ENERGY_CLIP
    grad_clip: float | None = None
    eval_samples: int = 512
    seed: int = 0
    stages: list[Stage] = field(default_factory=lambda: default_stages(0.1))

    def validate(self) -> None:
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive and weight decay non-negative")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if min(self.w_nll, self.w_w2, self.w_kl) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.anneal_fraction <= 1:
            raise ValueError("anneal fraction must lie in [0, 1]")
        for s in self.stages:
            if s.epochs < 0:
                raise ValueError("stage epochs must be non-negative")
            if s.lr_scale <= 0:
                raise ValueError("stage lr_scale must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown training keys {sorted(unknown)}")
        if "stages" in d:
            stages = []
            for s in d["stages"]:
                bad = set(s) - set(Stage.__dataclass_fields__)
                if bad:
                    raise KeyError(f"unknown stage keys {sorted(bad)}")
                stages.append(Stage(**s))
            d["stages"] = stages
        return cls(**d)


def _ramp(step: int, total: int, fraction: float) -> float:
    if fraction <= 0:
        return 1.0
    n = max(int(np.ceil(fraction * total)), 1)
    return min((step + 1) / n, 1.0)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.10g}"


@dataclass
class TrainResult:
    metrics: list[dict]
    checkpoints: list[Path]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.metrics:
            w.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
        return buf.getvalue()


def _features(target) -> Callable:
    if hasattr(target, "backbone_distances"):
        return target.backbone_distances
    return lambda x: x


def epoch_evaluation(flow, target, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """(median sample energy, ESS %) from ``n`` fresh flow samples."""
    if n <= 0:
        return float("nan"), float("nan")
    x, logq = flow.sample(n, rng)
    energy = np.asarray(target.energy(x.value), dtype=np.float64)
    res = importance_weights(-energy / target.kT - logq.value)
    return float(np.median(energy)), res.ess


def run_schedule(flow, dataset: np.ndarray, target, config: TrainConfig,
                 moments: MomentEstimates | None = None, out_dir=None, start_stage: int = 0,
                 wall_clock: bool = False, save: Callable | None = None) -> TrainResult:
    """Train ``flow`` in place through the configured stages.

    Stage ``k`` (0-based) uses an RNG stream derived from ``(seed, k)``, so a
    run resumed at ``start_stage`` reproduces the uninterrupted run. After each
    stage ``save(path, flow)`` writes ``stage{k+1}.ckpt`` into ``out_dir``.
    """
    import time

    config.validate()
    data = np.asarray(dataset, dtype=np.float64)
    features = _features(target)
    needs_w2 = any(s.w2 and s.epochs > 0 for s in config.stages[start_stage:])
    if needs_w2 and moments is None:
        moments = fit_reference_moments(data, features)
    params = flow.parameters()
    metrics: list[dict] = []
    ckpts: list[Path] = []
    out = Path(out_dir) if out_dir is not None else None
    epoch_counter = sum(s.epochs for s in config.stages[:start_stage])
    t0 = time.perf_counter()
    bs = config.batch_size

    for k in range(start_stage, len(config.stages)):
        stage = config.stages[k]
        rng = np.random.default_rng([config.seed, k])
        eval_rng = np.random.default_rng([config.seed, k, 1])
        # fresh optimiser state per stage, so resuming at a stage boundary is exact
        opt = AdamW(params, config.lr * stage.lr_scale, weight_decay=config.weight_decay)
        sched = PlateauScheduler(opt, config.patience, config.factor)
        n_batches = max(len(data) // bs, 1)
        total_steps = stage.epochs * n_batches
        step = 0
        for epoch in range(stage.epochs):
            order = rng.permutation(len(data))
            sums = {"nll": 0.0, "w2": 0.0, "kl": 0.0, "loss": 0.0}
            for b in range(n_batches):
                idx = order[b * bs:(b + 1) * bs]
                ramp = _ramp(step, total_steps, config.anneal_fraction)
                terms = {}
                with Tape() as tape:
                    loss = Tensor(0.0)
                    try:
                        if stage.nll:
                            nll = nll_loss(flow, data[idx], rng)
                            terms["nll"] = nll
                            loss = loss + config.w_nll * nll
                        if stage.w2 or stage.kl:
                            z = flow.base.sample(len(idx), rng)
                            x, logdet = flow.forward(Tensor(z), rng)
                            if stage.w2:
                                w2 = w2_loss(features(x), moments)
                                terms["w2"] = w2
                                loss = loss + (config.w_w2 * ramp) * w2
                            if stage.kl:
                                kl, _ = _kl_term(target.reduced_energy(x), logdet, config.energy_clip)
                                terms["kl"] = kl
                                loss = loss + (config.w_kl * ramp) * kl
                    except NonFiniteError as exc:
                        raise TrainingDivergence(k + 1, epoch, {"error": str(exc)}) from exc
                    vals = {n: float(t.value) for n, t in terms.items()}
                    if not np.isfinite(float(loss.value)):
                        raise TrainingDivergence(k + 1, epoch, vals)
                    grads = tape.gradient(loss, params) if loss._tape is tape else [
                        np.zeros_like(p.value) for p in params]
                if config.grad_clip is not None:
                    gn = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
                    if gn > config.grad_clip:
                        grads = [g * (config.grad_clip / gn) for g in grads]
                opt.step(grads)
                for n_, v in vals.items():
                    sums[n_] += v
                sums["loss"] += float(loss.value)
                step += 1
            sched.step(sums["loss"] / n_batches)
            median_e, ess = epoch_evaluation(flow, target, config.eval_samples, eval_rng)
            row = {"epoch": epoch_counter, "stage": k + 1,
                   "nll": sums["nll"] / n_batches if stage.nll else None,
                   "w2": sums["w2"] / n_batches if stage.w2 else None,
                   "kl": sums["kl"] / n_batches if stage.kl else None,
                   "median_energy": median_e, "ess": ess, "lr": opt.lr,
                   "wall_seconds": time.perf_counter() - t0 if wall_clock else None}
            metrics.append(row)
            log.info("stage %d epoch %d: %s", k + 1, epoch_counter,
                     ", ".join(f"{c}={_fmt(row[c])}" for c in METRIC_COLUMNS[2:8]))
            epoch_counter += 1
        if out is not None and save is not None:
            path = out / f"stage{k + 1}.ckpt"
            save(path, flow, {"stage": k + 1})
            ckpts.append(path)
    return TrainResult(metrics, ckpts)
