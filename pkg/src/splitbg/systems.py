"""Synthetic chain molecules used for testing and training at desk scale.

Each residue carries three backbone beads (N, CA, C) and two side-chain beads
(CB, CG). The free coordinates are the backbone bond angles and dihedrals and
one rotatable side-chain dihedral (N-CA-CB-CG) per residue.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energy import ChainTarget, ToyForceField
from .geometry import (
    FROZEN,
    PHI_BB,
    PHI_SC,
    THETA_BB,
    Atom,
    ReferenceGeometry,
    Topology,
)

# equilibrium bond lengths (Angstrom)
BOND = {("N", "CA"): 1.46, ("CA", "C"): 1.52, ("C", "N"): 1.33, ("CA", "CB"): 1.53, ("CB", "CG"): 1.52}
# equilibrium bond angles (radians), keyed by (atom, vertex, other)
ANGLE = {
    ("C", "CA", "N"): np.deg2rad(111.0),
    ("N", "C", "CA"): np.deg2rad(116.0),
    ("CA", "N", "C"): np.deg2rad(122.0),
    ("CB", "CA", "C"): np.deg2rad(110.0),
    ("CG", "CB", "CA"): np.deg2rad(114.0),
}
CB_IMPROPER = np.deg2rad(-122.0)
# helix-like backbone minima
PHI_MIN = np.deg2rad(-60.0)
PSI_MIN = np.deg2rad(-45.0)

LJ = {"N": (0.10, 2.9), "CA": (0.10, 3.0), "C": (0.10, 3.0), "CB": (0.15, 3.4), "CG": (0.30, 3.8)}
ELEMENT = {"N": "N", "CA": "C", "C": "C", "CB": "C", "CG": "C"}


@dataclass
class ToySystem:
    topology: Topology
    reference: ReferenceGeometry
    forcefield: ToyForceField
    temperature: float = 300.0

    def target(self) -> ChainTarget:
        return ChainTarget(self.topology, self.reference, self.forcefield, self.temperature)

    def ground_state(self) -> np.ndarray:
        """Reduced state with every free coordinate at its force-field minimum."""
        return minimum_state(self.topology, self.reference)


def toy_chain_topology(n_residues: int) -> tuple[Topology, ReferenceGeometry]:
    if n_residues < 1:
        raise ValueError("need at least one residue")
    atoms: list[Atom] = []
    zmat: list[tuple[int, int, int]] = []
    bonds: list[float] = []
    angles: list[float] = []
    dihedrals: list[float] = []
    angle_roles: list[str] = []
    dihedral_roles: list[str] = []
    index: dict[tuple[int, str], int] = {}

    def add(res, name, refs, role_angle=FROZEN, role_dih=FROZEN, dih=0.0):
        i = len(atoms)
        atoms.append(Atom(name, ELEMENT[name], res, name in ("N", "CA", "C")))
        index[(res, name)] = i
        refs = tuple(refs) + (-1,) * (3 - len(refs))
        zmat.append(refs)
        if i >= 1:
            bonds.append(BOND[_bond_key(atoms[refs[0]].name, name)])
        if i >= 2:
            angles.append(ANGLE[(name, atoms[refs[0]].name, atoms[refs[1]].name)])
            angle_roles.append(role_angle)
        if i >= 3:
            dihedrals.append(dih)
            dihedral_roles.append(role_dih)

    for r in range(n_residues):
        if r == 0:
            add(0, "N", ())
            add(0, "CA", (index[(0, "N")],))
            add(0, "C", (index[(0, "CA")], index[(0, "N")]), THETA_BB)
        else:
            p = r - 1
            add(r, "N", (index[(p, "C")], index[(p, "CA")], index[(p, "N")]), THETA_BB, PHI_BB, PSI_MIN)
            add(r, "CA", (index[(r, "N")], index[(p, "C")], index[(p, "CA")]), THETA_BB, PHI_BB, np.pi)
            add(r, "C", (index[(r, "CA")], index[(r, "N")], index[(p, "C")]), THETA_BB, PHI_BB, PHI_MIN)
        ca, c, n = index[(r, "CA")], index[(r, "C")], index[(r, "N")]
        add(r, "CB", (ca, c, n), FROZEN, FROZEN, CB_IMPROPER)
        add(r, "CG", (index[(r, "CB")], ca, n), FROZEN, PHI_SC, np.pi)

    topo = Topology(atoms, zmat, angle_roles, dihedral_roles)
    ref = ReferenceGeometry(np.array(bonds), np.array(angles), np.array(dihedrals))
    ref.check(topo)
    return topo, ref


def _bond_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if (a, b) in BOND else (b, a)


def minimum_state(topology: Topology, reference: ReferenceGeometry) -> np.ndarray:
    """Free coordinates taken from the reference (the force-field minima for toy chains)."""
    th = reference.angles[topology.free_angle_atoms() - 2]
    pb = reference.dihedrals[topology.free_dihedral_atoms(PHI_BB) - 3]
    ps = reference.dihedrals[topology.free_dihedral_atoms(PHI_SC) - 3]
    return np.concatenate([th, pb, ps])


def toy_chain_forcefield(topology: Topology, reference: ReferenceGeometry,
                         k_bond: float = 300.0, k_angle_bb: float = 40.0, k_angle: float = 60.0,
                         backbone_torsion: float = 2.0, omega_torsion: float = 10.0,
                         sidechain_torsion: float = 1.0, lj_scale: float = 1.0) -> ToyForceField:
    n = topology.n_atoms
    names = [a.name for a in topology.atoms]
    bonds = np.array(topology.bonds())
    bond_d0 = reference.bonds.copy()

    angles, angle_t0, angle_k = [], [], []
    for i in range(2, n):
        a1, a2, _ = topology.zmatrix[i]
        angles.append((i, a1, a2))
        angle_t0.append(reference.angles[i - 2])
        angle_k.append(k_angle_bb if topology.angle_roles[i - 2] == THETA_BB else k_angle)

    torsions, amp, mult, phase = [], [], [], []
    for i in range(3, n):
        a1, a2, a3 = topology.zmatrix[i]
        role = topology.dihedral_roles[i - 3]
        target = reference.dihedrals[i - 3]
        if role == PHI_BB:
            stiff = omega_torsion if names[i] == "CA" else backbone_torsion
            # amp (1 + cos(phi - (target - pi))) has its minimum at target
            torsions.append((a3, a2, a1, i)); amp.append(stiff); mult.append(1.0)
            phase.append(target - np.pi)
        elif role == PHI_SC:
            # three staggered rotamers, one of them at the reference value
            torsions.append((a3, a2, a1, i)); amp.append(sidechain_torsion); mult.append(3.0)
            phase.append(3.0 * target - np.pi)

    excluded = ToyForceField.excluded_pairs(bonds, n)
    pairs, eps, sigma = [], [], []
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) in excluded:
                continue
            ei, si = LJ[names[i]]
            ej, sj = LJ[names[j]]
            pairs.append((i, j))
            eps.append(lj_scale * np.sqrt(ei * ej))
            sigma.append(0.5 * (si + sj))

    return ToyForceField(
        bonds=bonds, bond_k=np.full(len(bonds), k_bond), bond_d0=bond_d0,
        angles=np.array(angles), angle_k=np.array(angle_k), angle_t0=np.array(angle_t0),
        torsions=np.array(torsions).reshape(-1, 4), torsion_amp=np.array(amp),
        torsion_n=np.array(mult), torsion_phase=np.array(phase),
        lj_pairs=np.array(pairs).reshape(-1, 2), lj_eps=np.array(eps), lj_sigma=np.array(sigma),
    )


def toy_chain(n_residues: int, temperature: float = 300.0, **ff_kwargs) -> ToySystem:
    """Topology, frozen reference values and force field for an ``n_residues`` chain."""
    topo, ref = toy_chain_topology(n_residues)
    ff = toy_chain_forcefield(topo, ref, **ff_kwargs)
    return ToySystem(topo, ref, ff, temperature)
