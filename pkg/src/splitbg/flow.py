"""Coupling flows over mixed interval/circle coordinates.

The pieces here are deliberately small: a parameter container
(:class:`Module`), per-coordinate base distributions, a fixed affine
normaliser and the spline coupling layer. :mod:`splitbg.architecture` wires
them into the split backbone/side-chain model.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .geometry import Topology, wrap
from .splines import circular_rqs, n_raw_params, rqs

INTERVAL = 0
CIRCLE = 1

GAUSSIAN = "gaussian"
UNIFORM = "uniform"
VONMISES = "vonmises"

LOG_2PI = float(np.log(2.0 * np.pi))


class DomainError(ValueError):
    pass


class Module:
    """Minimal parameter container.

    Parameters are discovered from attributes in assignment order, which
    fixes the canonical order used by checkpoints.
    """

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Parameter):
                        out.append((f"{name}.{i}", item))
        return out

    def parameters(self) -> list[Parameter]:
        seen: set[int] = set()
        out = []
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


# ---------------------------------------------------------------------------
# coordinate layout


@dataclass
class CoordinateLayout:
    """Per-coordinate bookkeeping shared by every layer of a flow.

    ``kinds`` marks interval or circle coordinates, ``residues`` and ``slots``
    place each coordinate inside a residue token, and ``lower``/``upper`` give
    the physical domain of interval coordinates.
    """

    kinds: np.ndarray
    residues: np.ndarray
    slots: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_backbone: int

    def __post_init__(self):
        self.kinds = np.asarray(self.kinds, dtype=int)
        self.residues = np.asarray(self.residues, dtype=int)
        self.slots = np.asarray(self.slots, dtype=int)
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        n = len(self.kinds)
        if not (len(self.residues) == len(self.slots) == len(self.lower) == len(self.upper) == n):
            raise ValueError("layout arrays differ in length")
        if not 0 <= self.n_backbone <= n:
            raise ValueError("n_backbone out of range")

    @property
    def dim(self) -> int:
        return len(self.kinds)

    @property
    def n_tokens(self) -> int:
        return int(self.residues.max()) + 1 if self.dim else 0

    def subset(self, idx) -> "CoordinateLayout":
        idx = np.asarray(idx, dtype=int)
        return CoordinateLayout(self.kinds[idx], self.residues[idx], _slots(self.residues[idx]),
                                self.lower[idx], self.upper[idx], min(self.n_backbone, len(idx)))

    @classmethod
    def from_topology(cls, topology: Topology) -> "CoordinateLayout":
        n_theta, n_bb, n_sc = topology.counts
        kinds = np.array([INTERVAL] * n_theta + [CIRCLE] * (n_bb + n_sc))
        res = topology.coordinate_residues()
        lower = np.where(kinds == INTERVAL, 0.0, -np.pi)
        upper = np.full(len(kinds), np.pi)
        return cls(kinds, res, _slots(res), lower, upper, n_theta + n_bb)

    @classmethod
    def euclidean(cls, dim: int) -> "CoordinateLayout":
        """``dim`` unbounded interval coordinates, one token each."""
        r = np.arange(dim)
        return cls(np.zeros(dim, int), r, np.zeros(dim, int), np.full(dim, -np.inf),
                   np.full(dim, np.inf), dim)

    @classmethod
    def torus(cls, dim: int) -> "CoordinateLayout":
        r = np.arange(dim)
        return cls(np.ones(dim, int), r, np.zeros(dim, int), np.full(dim, -np.pi),
                   np.full(dim, np.pi), dim)

    def check(self, x: np.ndarray) -> None:
        iv = self.kinds == INTERVAL
        vals = x[..., iv]
        if np.any(vals <= self.lower[iv]) or np.any(vals >= self.upper[iv]):
            raise DomainError("interval coordinate outside its domain")
        if not np.all(np.isfinite(x)):
            raise DomainError("non-finite coordinates")

    def to_json(self) -> dict:
        return {"kinds": self.kinds.tolist(), "residues": self.residues.tolist(),
                "lower": [_enc(v) for v in self.lower], "upper": [_enc(v) for v in self.upper],
                "n_backbone": int(self.n_backbone)}

    @classmethod
    def from_json(cls, d: dict) -> "CoordinateLayout":
        res = np.array(d["residues"], dtype=int)
        return cls(d["kinds"], res, _slots(res), [_dec(v) for v in d["lower"]],
                   [_dec(v) for v in d["upper"]], d["n_backbone"])


def _slots(residues: np.ndarray) -> np.ndarray:
    slots = np.zeros(len(residues), dtype=int)
    count: dict[int, int] = {}
    for i, r in enumerate(residues):
        slots[i] = count.get(int(r), 0)
        count[int(r)] = slots[i] + 1
    return slots


def _enc(v: float):
    return v if np.isfinite(v) else ("inf" if v > 0 else "-inf")


def _dec(v) -> float:
    return float(v)


# ---------------------------------------------------------------------------
# base distributions


def log_i0(kappa):
    """log I_0(kappa) via the exponentially scaled Bessel function."""
    kappa = np.asarray(kappa, dtype=np.float64)
    return np.log(special.i0e(kappa)) + kappa


class BaseDistribution:
    """Independent per-coordinate base: Gaussian, uniform circle or von Mises."""

    def __init__(self, kinds: list[str], loc=None, kappa=None):
        self.kinds = list(kinds)
        bad = set(self.kinds) - {GAUSSIAN, UNIFORM, VONMISES}
        if bad:
            raise ValueError(f"unknown base distributions {sorted(bad)}")
        d = len(self.kinds)
        self.loc = np.zeros(d) if loc is None else np.asarray(loc, dtype=np.float64)
        self.kappa = np.ones(d) if kappa is None else np.asarray(kappa, dtype=np.float64)
        if np.any(self.kappa <= 0):
            raise ValueError("von Mises concentration must be positive")
        k = np.array(self.kinds)
        self._g = np.flatnonzero(k == GAUSSIAN)
        self._u = np.flatnonzero(k == UNIFORM)
        self._v = np.flatnonzero(k == VONMISES)

    @property
    def dim(self) -> int:
        return len(self.kinds)

    def log_prob(self, z) -> Tensor:
        """Sum of per-coordinate log-densities, shape (batch,)."""
        z = ad.as_tensor(z)
        total = Tensor(np.zeros(z.shape[:-1]))
        if len(self._g):
            zg = ad.take(z, self._g, axis=-1)
            total = total + (-0.5 * ad.square(zg) - 0.5 * LOG_2PI).sum(axis=-1)
        if len(self._u):
            zu = z.value[..., self._u]
            if np.any(zu < -np.pi) or np.any(zu >= np.pi):
                raise DomainError("uniform base coordinate outside [-pi, pi)")
            total = total - len(self._u) * LOG_2PI
        if len(self._v):
            zv = ad.take(z, self._v, axis=-1)
            k = self.kappa[self._v]
            norm = LOG_2PI + log_i0(k)
            total = total + (k * ad.cos(zv - self.loc[self._v]) - norm).sum(axis=-1)
        return total

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = np.empty((n, self.dim))
        # draw in a fixed column order so the stream is reproducible
        for j, kind in enumerate(self.kinds):
            if kind == GAUSSIAN:
                z[:, j] = rng.standard_normal(n)
            elif kind == UNIFORM:
                z[:, j] = rng.uniform(-np.pi, np.pi, n)
            else:
                z[:, j] = wrap(rng.vonmises(self.loc[j], self.kappa[j], n))
        return z

    def to_json(self) -> dict:
        return {"kinds": self.kinds, "loc": self.loc.tolist(), "kappa": self.kappa.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "BaseDistribution":
        return cls(d["kinds"], d["loc"], d["kappa"])


def fit_vonmises_kappa(angles: np.ndarray) -> np.ndarray:
    """Maximum-likelihood concentration per column (Best-Fisher approximation)."""
    angles = np.atleast_2d(angles)
    c = np.cos(angles).mean(axis=0)
    s = np.sin(angles).mean(axis=0)
    r = np.clip(np.hypot(c, s), 1e-6, 1 - 1e-9)
    k = np.where(r < 0.53, 2 * r + r ** 3 + 5 * r ** 5 / 6,
                 np.where(r < 0.85, -0.4 + 1.39 * r + 0.43 / (1 - r), 1 / (r ** 3 - 4 * r ** 2 + 3 * r)))
    return np.maximum(k, 1e-3)


# ---------------------------------------------------------------------------
# fixed normaliser


class Normalizer:
    """Fixed per-coordinate map from physical to flow coordinates.

    Interval coordinates are standardised, circle coordinates are rotated by
    their circular mean. ``forward`` maps physical to flow space.
    """

    def __init__(self, layout: CoordinateLayout, shift=None, scale=None):
        self.layout = layout
        d = layout.dim
        self.shift = np.zeros(d) if shift is None else np.asarray(shift, dtype=np.float64)
        self.scale = np.ones(d) if scale is None else np.asarray(scale, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ValueError("normaliser scales must be positive")
        self.scale[layout.kinds == CIRCLE] = 1.0
        self._circ = layout.kinds == CIRCLE

    @classmethod
    def fit(cls, layout: CoordinateLayout, data: np.ndarray) -> "Normalizer":
        data = np.asarray(data, dtype=np.float64)
        shift = data.mean(axis=0)
        scale = data.std(axis=0)
        scale = np.where(scale > 1e-8, scale, 1.0)
        c = layout.kinds == CIRCLE
        shift[c] = np.arctan2(np.sin(data[:, c]).mean(axis=0), np.cos(data[:, c]).mean(axis=0))
        return cls(layout, shift, scale)

    def logdet(self) -> float:
        """log |du/dx| of the forward map, per sample."""
        return float(-np.sum(np.log(self.scale)))

    def forward(self, x):
        x = ad.as_tensor(x)
        u = (x - self.shift) / self.scale
        if self._circ.any():
            u = _wrap_columns(u, self._circ)
        return u

    def inverse(self, u):
        u = ad.as_tensor(u)
        x = u * self.scale + self.shift
        if self._circ.any():
            x = _wrap_columns(x, self._circ)
        return x

    def to_json(self) -> dict:
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}


def _wrap_columns(t: Tensor, mask: np.ndarray) -> Tensor:
    # wrapping subtracts a piecewise-constant multiple of 2 pi: gradient 1
    k = np.where(mask, np.floor((t.value + np.pi) / (2.0 * np.pi)), 0.0)
    return t - 2.0 * np.pi * k


def circle_augment(angles) -> np.ndarray:
    """(cos, sin) feature pairs, flattened to length 2n."""
    a = np.asarray(angles, dtype=np.float64)
    return np.stack([np.cos(a), np.sin(a)], axis=-1).reshape(a.shape[:-1] + (2 * a.shape[-1],))


# ---------------------------------------------------------------------------
# coupling


class CouplingLayer(Module):
    """Transforms coordinates ``transformed`` conditioned on ``identity``.

    ``conditioner(x, mask, rng)`` must return raw spline parameters of shape
    (batch, len(transformed), 3K+1).
    """

    def __init__(self, layout: CoordinateLayout, identity, transformed, conditioner,
                 bins: int = 8, bound: float = 5.0):
        self.conditioner = conditioner
        self.identity = np.asarray(identity, dtype=int)
        self.transformed = np.asarray(transformed, dtype=int)
        a, b = set(self.identity.tolist()), set(self.transformed.tolist())
        if a & b or a | b != set(range(layout.dim)):
            raise ValueError("coupling halves must partition the coordinates")
        self.layout = layout
        self.bins = bins
        self.bound = bound
        kinds = layout.kinds[self.transformed]
        self._circ = np.flatnonzero(kinds == CIRCLE)
        self._intv = np.flatnonzero(kinds == INTERVAL)
        self._cond_mask = np.zeros(layout.dim, bool)
        self._cond_mask[self.identity] = True
        # position of every coordinate inside [transformed_interval, transformed_circle, identity]
        order = np.concatenate([self.transformed[self._intv], self.transformed[self._circ], self.identity])
        self._unperm = np.argsort(order)

    def _raw(self, x: Tensor, rng) -> Tensor:
        raw = self.conditioner(x, self._cond_mask, rng)
        want = (x.shape[0], len(self.transformed), n_raw_params(self.bins))
        if raw.shape != want:
            raise ValueError(f"conditioner returned {raw.shape}, expected {want}")
        return raw

    def _apply(self, x, inverse: bool, rng=None):
        x = ad.as_tensor(x)
        raw = self._raw(x, rng)
        parts, logdet = [], Tensor(np.zeros(x.shape[0]))
        if len(self._intv):
            cols = self.transformed[self._intv]
            y, ld = rqs(ad.take(x, cols, axis=-1), ad.take(raw, self._intv, axis=1),
                        self.bins, self.bound, inverse=inverse)
            parts.append(y)
            logdet = logdet + ld.sum(axis=-1)
        if len(self._circ):
            cols = self.transformed[self._circ]
            y, ld = circular_rqs(ad.take(x, cols, axis=-1), ad.take(raw, self._circ, axis=1),
                                 self.bins, inverse=inverse)
            parts.append(y)
            logdet = logdet + ld.sum(axis=-1)
        if len(self.identity):
            parts.append(ad.take(x, self.identity, axis=-1))
        out = ad.take(ad.concat(parts, axis=-1), self._unperm, axis=-1)
        return out, logdet

    def forward(self, x, rng=None):
        """(y, log|dy/dx|)."""
        return self._apply(x, False, rng)

    def inverse(self, y, rng=None):
        """(x, log|dx/dy|)."""
        return self._apply(y, True, rng)


class FlowStack(Module):
    """Sequence of coupling layers."""

    def __init__(self, layers: list[CouplingLayer]):
        self.layers = list(layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[CouplingLayer]:
        return iter(self.layers)

    def forward(self, z, rng=None):
        z = ad.as_tensor(z)
        total = Tensor(np.zeros(z.shape[0]))
        for layer in self.layers:
            z, ld = layer.forward(z, rng)
            total = total + ld
        return z, total

    def inverse(self, x, rng=None):
        x = ad.as_tensor(x)
        total = Tensor(np.zeros(x.shape[0]))
        for layer in reversed(self.layers):
            x, ld = layer.inverse(x, rng)
            total = total + ld
        return x, total


def coverage(stack: FlowStack, dim: int) -> np.ndarray:
    """Boolean mask of coordinates transformed by at least one layer."""
    hit = np.zeros(dim, bool)
    for layer in stack:
        hit[layer.transformed] = True
    return hit


def mask_schedule(dim: int, n_layers: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """(identity, transformed) index pairs for a stack.

    Consecutive layers use complementary halves of the same ordering; a fresh
    seeded permutation of the ordering is drawn after every pair.
    """
    out = []
    order = np.arange(dim)
    half = dim // 2
    for layer in range(n_layers):
        if layer % 2 == 0:
            out.append((np.sort(order[:half]), np.sort(order[half:])))
        else:
            out.append((np.sort(order[half:]), np.sort(order[:half])))
            order = order[rng.permutation(dim)]
    return out
