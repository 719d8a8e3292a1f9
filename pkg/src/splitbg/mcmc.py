"""Vectorised random-walk Metropolis for generating reference ensembles."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import Topology, wrap

THETA_MARGIN = 0.02


class SamplerError(RuntimeError):
    pass


@dataclass
class Domain:
    """Which coordinates are periodic and the open box for the rest."""

    periodic: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def unbounded(cls, dim: int) -> "Domain":
        return cls(np.zeros(dim, bool), np.full(dim, -np.inf), np.full(dim, np.inf))

    @classmethod
    def for_topology(cls, topology: Topology, margin: float = THETA_MARGIN) -> "Domain":
        n_theta, n_bb, n_sc = topology.counts
        d = n_theta + n_bb + n_sc
        periodic = np.zeros(d, bool)
        periodic[n_theta:] = True
        lower = np.full(d, -np.inf)
        upper = np.full(d, np.inf)
        lower[:n_theta] = margin
        upper[:n_theta] = np.pi - margin
        return cls(periodic, lower, upper)

    def project(self, x: np.ndarray) -> np.ndarray:
        out = x.copy()
        out[..., self.periodic] = wrap(out[..., self.periodic])
        return out

    def inside(self, x: np.ndarray) -> np.ndarray:
        return np.all((x > self.lower) & (x < self.upper), axis=-1)


@dataclass
class MCMCResult:
    frames: np.ndarray
    acceptance: float
    step_size: float
    autocorr_time: float
    energies: np.ndarray

    def summary(self) -> str:
        return (f"frames={len(self.frames)} acceptance={self.acceptance:.3f} "
                f"step={self.step_size:.4g} tau_int={self.autocorr_time:.1f}")


def integrated_autocorr_time(trace: np.ndarray, c: float = 5.0) -> float:
    """Integrated autocorrelation time of a (steps, chains) trace.

    FFT autocorrelation averaged over chains, summed with Sokal's automatic
    window ``M >= c tau``.
    """
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim == 1:
        trace = trace[:, None]
    n = trace.shape[0]
    if n < 4:
        return float("nan")
    y = trace - trace.mean(axis=0)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(y, n=size, axis=0)
    acf = np.fft.irfft(f * np.conj(f), n=size, axis=0)[:n].mean(axis=1)
    if acf[0] <= 0:
        return 1.0
    acf = acf / acf[0]
    taus = 2.0 * np.cumsum(acf) - 1.0
    window = np.arange(n) >= c * taus
    m = int(np.argmax(window)) if np.any(window) else n - 1
    return float(max(taus[m], 1.0))


def metropolis(
    reduced_energy: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    n_frames: int,
    rng: np.random.Generator,
    domain: Domain | None = None,
    burn_in: int = 50_000,
    thin: int = 10,
    step_size: float = 0.05,
    scales: np.ndarray | None = None,
    target_acceptance: float = 0.3,
    adapt_every: int = 50,
    min_acceptance: float = 0.01,
) -> MCMCResult:
    """Sample exp(-u) with parallel random-walk chains.

    ``x0`` is (chains, dim). The isotropic step size adapts during burn-in
    only, so the production run is a proper Markov chain. Frames are
    collected every ``thin`` steps from all chains (chain index fastest) and
    truncated to exactly ``n_frames``.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    if x.ndim == 1:
        x = x[None]
    n_chains, dim = x.shape
    domain = domain or Domain.unbounded(dim)
    scales = np.ones(dim) if scales is None else np.asarray(scales, dtype=np.float64)
    if n_frames < 0 or thin < 1 or burn_in < 0:
        raise ValueError("n_frames >= 0, thin >= 1 and burn_in >= 0 required")
    if not np.all(domain.inside(x)):
        raise SamplerError("initial states lie outside the domain")
    u = np.asarray(reduced_energy(x), dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise SamplerError("non-finite energy at the initial states")
    log_step = np.log(step_size)

    def step(x, u, s):
        prop = domain.project(x + s * scales * rng.standard_normal(x.shape))
        ok = domain.inside(prop)
        up = np.full(n_chains, np.inf)
        if np.any(ok):
            up[ok] = reduced_energy(prop[ok])
        accept = ok & np.isfinite(up) & (np.log(rng.random(n_chains)) < u - up)
        x = np.where(accept[:, None], prop, x)
        u = np.where(accept, up, u)
        return x, u, accept

    window = 0
    for t in range(burn_in):
        x, u, acc = step(x, u, np.exp(log_step))
        window += int(acc.sum())
        if (t + 1) % adapt_every == 0:
            rate = window / (adapt_every * n_chains)
            gain = 1.0 / np.sqrt(1.0 + (t + 1) / adapt_every / 10.0)
            log_step += gain * (rate - target_acceptance) * 2.0
            window = 0

    s = float(np.exp(log_step))
    n_steps = -(-n_frames // n_chains) * thin
    frames = np.empty((n_steps // thin, n_chains, dim))
    trace = np.empty((n_steps // thin, n_chains))
    accepted = 0
    for t in range(n_steps):
        x, u, acc = step(x, u, s)
        accepted += int(acc.sum())
        if (t + 1) % thin == 0:
            frames[t // thin] = x
            trace[t // thin] = u
    acceptance = accepted / max(n_steps * n_chains, 1)
    if n_steps and acceptance < min_acceptance:
        raise SamplerError(f"acceptance rate {acceptance:.4f} is below {min_acceptance}; "
                           "reduce the step size or the temperature of the starting states")
    flat = frames.reshape(-1, dim)[:n_frames]
    tau = integrated_autocorr_time(trace) if len(trace) >= 4 else float("nan")
    return MCMCResult(flat, acceptance, s, tau, trace.reshape(-1)[:n_frames])
