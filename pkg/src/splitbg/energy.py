"""Analytic toy force fields and Boltzmann targets.

Energies are in kcal/mol. Every function accepts either numpy arrays (and
returns numpy) or tensors (and stays differentiable).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (
    Reconstructor,
    ReferenceGeometry,
    Topology,
    backbone_distance_vector,
)

BOLTZMANN_KCAL = 0.0019872041  # kcal/mol/K
LJ_CLAMP_RADIUS = 0.1  # Angstrom


def kT(temperature: float) -> float:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return BOLTZMANN_KCAL * temperature


@dataclass
class ToyForceField:
    """Harmonic bonds and angles, cosine torsions and Lennard-Jones pairs.

    Bond energy is ``k_b (d - d0)^2`` and angle energy ``k_theta (t - t0)^2``.
    Each torsion row is one cosine term ``amp (1 + cos(n phi - phase))``.
    """

    bonds: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))
    bond_k: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bond_d0: np.ndarray = field(default_factory=lambda: np.zeros(0))
    angles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), int))
    angle_k: np.ndarray = field(default_factory=lambda: np.zeros(0))
    angle_t0: np.ndarray = field(default_factory=lambda: np.zeros(0))
    torsions: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), int))
    torsion_amp: np.ndarray = field(default_factory=lambda: np.zeros(0))
    torsion_n: np.ndarray = field(default_factory=lambda: np.zeros(0))
    torsion_phase: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lj_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))
    lj_eps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lj_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("bonds", "angles", "torsions", "lj_pairs"):
            width = {"bonds": 2, "angles": 3, "torsions": 4, "lj_pairs": 2}[name]
            setattr(self, name, np.asarray(getattr(self, name), dtype=int).reshape(-1, width))
        for name in ("bond_k", "bond_d0", "angle_k", "angle_t0", "torsion_amp", "torsion_n",
                     "torsion_phase", "lj_eps", "lj_sigma"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        self.validate()

    def validate(self) -> None:
        if np.any(self.bond_k <= 0) or np.any(self.angle_k <= 0):
            raise ValueError("force constants must be positive")
        if np.any(self.lj_eps <= 0) or np.any(self.lj_sigma <= 0):
            raise ValueError("Lennard-Jones parameters must be positive")
        bonded = {frozenset(map(int, b)) for b in self.bonds}
        neighbours: dict[int, set[int]] = {}
        for i, j in self.bonds:
            neighbours.setdefault(int(i), set()).add(int(j))
            neighbours.setdefault(int(j), set()).add(int(i))
        for i, j in self.lj_pairs:
            i, j = int(i), int(j)
            if i == j or frozenset((i, j)) in bonded:
                raise ValueError(f"LJ pair ({i}, {j}) is a bonded pair")
            if neighbours.get(i, set()) & neighbours.get(j, set()):
                raise ValueError(f"LJ pair ({i}, {j}) is a 1-3 pair")

    @staticmethod
    def excluded_pairs(bonds, n_atoms: int) -> set[tuple[int, int]]:
        """All 1-2 and 1-3 pairs of a bond graph."""
        neighbours = [set() for _ in range(n_atoms)]
        for i, j in bonds:
            neighbours[i].add(j)
            neighbours[j].add(i)
        out = set()
        for i in range(n_atoms):
            for j in neighbours[i]:
                out.add((min(i, j), max(i, j)))
                for k in neighbours[j]:
                    if k != i:
                        out.add((min(i, k), max(i, k)))
        return out


def _take(x, idx):
    return ad.take(x, idx, axis=-2)


def _lj(r, eps, sigma):
    rc = LJ_CLAMP_RADIUS
    inside = r.value >= rc
    r_safe = ad.where(inside, r, rc)
    sr6 = (sigma / r_safe) ** 6
    e_far = 4.0 * eps * (sr6 * sr6 - sr6)
    s6 = sigma ** 6
    s12 = s6 * s6
    e0 = 4.0 * eps * (s12 / rc ** 12 - s6 / rc ** 6)
    e1 = 4.0 * eps * (-12.0 * s12 / rc ** 13 + 6.0 * s6 / rc ** 7)
    e2 = 4.0 * eps * (156.0 * s12 / rc ** 14 - 42.0 * s6 / rc ** 8)
    dr = r - rc
    e_near = e0 + e1 * dr + 0.5 * e2 * dr * dr
    return ad.where(inside, e_far, e_near)


def energy_terms(cart, ff: ToyForceField) -> dict[str, Tensor]:
    """Per-term energies summed over their interactions, shape (...,)."""
    x = ad.as_tensor(cart)
    lead = x.shape[:-2]
    out = {}
    zero = Tensor(np.zeros(lead))
    if len(ff.bonds):
        d = ad.norm(_take(x, ff.bonds[:, 1]) - _take(x, ff.bonds[:, 0]))
        out["bond"] = (ff.bond_k * ad.square(d - ff.bond_d0)).sum(axis=-1)
    else:
        out["bond"] = zero
    if len(ff.angles):
        a, b, c = (_take(x, ff.angles[:, k]) for k in range(3))
        u, v = a - b, c - b
        t = ad.atan2(ad.norm(ad.cross(u, v)), ad.dot(u, v))
        out["angle"] = (ff.angle_k * ad.square(t - ff.angle_t0)).sum(axis=-1)
    else:
        out["angle"] = zero
    if len(ff.torsions):
        p = [_take(x, ff.torsions[:, k]) for k in range(4)]
        b1, b2, b3 = p[1] - p[0], p[2] - p[1], p[3] - p[2]
        n1, n2 = ad.cross(b1, b2), ad.cross(b2, b3)
        phi = ad.atan2(ad.norm(b2) * ad.dot(b1, n2), ad.dot(n1, n2))
        e = ff.torsion_amp * (1.0 + ad.cos(phi * ff.torsion_n - ff.torsion_phase))
        out["torsion"] = e.sum(axis=-1)
    else:
        out["torsion"] = zero
    if len(ff.lj_pairs):
        r = ad.norm(_take(x, ff.lj_pairs[:, 1]) - _take(x, ff.lj_pairs[:, 0]))
        out["lj"] = _lj(r, ff.lj_eps, ff.lj_sigma).sum(axis=-1)
    else:
        out["lj"] = zero
    return out


def potential_energy(cart, ff: ToyForceField):
    """Total potential energy in kcal/mol for coordinates (..., N, 3)."""
    terms = energy_terms(cart, ff)
    total = terms["bond"] + terms["angle"] + terms["torsion"] + terms["lj"]
    return total if isinstance(cart, Tensor) else total.value


class ChainTarget:
    """Boltzmann target over reduced internal coordinates of a chain molecule."""

    def __init__(self, topology: Topology, reference: ReferenceGeometry,
                 forcefield: ToyForceField, temperature: float = 300.0):
        self.topology = topology
        self.reference = reference
        self.forcefield = forcefield
        self.temperature = float(temperature)
        self.kT = kT(temperature)
        self.reconstruct = Reconstructor(topology, reference)

    @property
    def dim(self) -> int:
        return self.topology.n_free

    def cartesian(self, x):
        out = self.reconstruct(x)
        return out if isinstance(x, Tensor) else out.value

    def energy(self, x):
        """Potential energy (kcal/mol) of reduced states."""
        cart = self.reconstruct(x)
        e = potential_energy(cart, self.forcefield)
        return e if isinstance(x, Tensor) else e.value

    def reduced_energy(self, x):
        """u(x) / kT."""
        return self.energy(x) / self.kT

    def backbone_distances(self, x):
        cart = self.reconstruct(x)
        d = backbone_distance_vector(cart, self.topology)
        return d if isinstance(x, Tensor) else d.value


class DoubleWellTarget:
    """log p(x) = -(a (x1^2 - 1)^2 + b x2^2) up to normalisation."""

    dim = 2
    kT = 1.0

    def __init__(self, a: float = 2.0, b: float = 0.5):
        self.a = float(a)
        self.b = float(b)

    def log_density(self, x):
        x = ad.as_tensor(x)
        x1, x2 = x[..., 0], x[..., 1]
        out = -(self.a * ad.square(ad.square(x1) - 1.0) + self.b * ad.square(x2))
        return out

    def reduced_energy(self, x):
        out = -self.log_density(x)
        return out if isinstance(x, Tensor) else out.value

    def energy(self, x):
        return self.reduced_energy(x)

    def log_normalizer(self, n: int = 2001, lim: float = 6.0) -> float:
        """log of the integral of exp(log_density), by 2-D trapezoid quadrature."""
        g = np.linspace(-lim, lim, n)
        X1, X2 = np.meshgrid(g, g, indexing="ij")
        vals = np.exp(-(self.a * (X1 ** 2 - 1) ** 2 + self.b * X2 ** 2))
        return float(np.log(np.trapezoid(np.trapezoid(vals, g, axis=1), g)))


def double_well_target(x, a: float = 2.0, b: float = 0.5):
    """Unnormalised log-density of the double well."""
    out = DoubleWellTarget(a, b).log_density(x)
    return out if isinstance(x, Tensor) else out.value
