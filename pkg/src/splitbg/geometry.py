"""Reduced internal coordinates of chain molecules.

A :class:`Topology` holds the atoms, a z-matrix and a role for every bond
angle and dihedral. Free coordinates form the reduced state
``[theta_bb, phi_bb, phi_sc]``; everything else is frozen at the values in a
:class:`ReferenceGeometry`.

Dihedral signs follow the IUPAC convention: looking from the second atom to
the third, a clockwise rotation of the far bond is positive.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FROZEN = "frozen"
THETA_BB = "theta_bb"
PHI_BB = "phi_bb"
PHI_SC = "phi_sc"
FREE_ROLES = (THETA_BB, PHI_BB, PHI_SC)

BACKBONE_NAMES = ("N", "CA", "C")


class DegenerateGeometryError(ValueError):
    pass


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Atom:
    name: str
    element: str
    residue: int
    backbone: bool


@dataclass
class Topology:
    """Molecular graph plus z-matrix.

    ``zmatrix[i]`` is ``(a1, a2, a3)`` for atom ``i``: the bond length is
    ``|x_i - x_a1|``, the bond angle is ``angle(x_i, x_a1, x_a2)`` and the
    dihedral is ``dihedral(x_a3, x_a2, x_a1, x_i)``. Unused references are -1.
    ``angle_roles[k]`` belongs to atom ``k + 2`` and ``dihedral_roles[k]`` to
    atom ``k + 3``. Bond lengths are always frozen.
    """

    atoms: list[Atom]
    zmatrix: list[tuple[int, int, int]]
    angle_roles: list[str]
    dihedral_roles: list[str]
    rigid_groups: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        self.zmatrix = [tuple(int(a) for a in row) for row in self.zmatrix]
        self.rigid_groups = [list(g) for g in self.rigid_groups]
        self.validate()

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_residues(self) -> int:
        return max(a.residue for a in self.atoms) + 1 if self.atoms else 0

    def validate(self) -> None:
        n = self.n_atoms
        if n < 3:
            raise TopologyError("need at least three atoms")
        if len(self.zmatrix) != n:
            raise TopologyError("one z-matrix row per atom required")
        if len(self.angle_roles) != n - 2 or len(self.dihedral_roles) != n - 3:
            raise TopologyError("role counts do not match the atom count")
        for i, row in enumerate(self.zmatrix):
            need = min(i, 3)
            refs = row[:need]
            if any(r < 0 or r >= i for r in refs):
                raise TopologyError(f"atom {i} references an atom not yet placed: {row}")
            if len(set(refs)) != len(refs):
                raise TopologyError(f"atom {i} has repeated references: {row}")
        if self.zmatrix[1][0] != 0:
            raise TopologyError("atom 1 must be bonded to atom 0")
        for k, role in enumerate(self.angle_roles):
            if role not in (FROZEN, THETA_BB):
                raise TopologyError(f"invalid angle role {role!r}")
            i = k + 2
            if role == THETA_BB and not all(self.atoms[j].backbone for j in (i, *self.zmatrix[i][:2])):
                raise TopologyError(f"backbone angle on non-backbone atoms at atom {i}")
        for k, role in enumerate(self.dihedral_roles):
            if role not in (FROZEN, PHI_BB, PHI_SC):
                raise TopologyError(f"invalid dihedral role {role!r}")
            i = k + 3
            if role == PHI_BB and not all(self.atoms[j].backbone for j in (i, *self.zmatrix[i])):
                raise TopologyError(f"backbone dihedral on non-backbone atoms at atom {i}")
        for group in self.rigid_groups:
            members = set(group)
            for i in group:
                row = self.zmatrix[i]
                if i >= 2 and {i, row[0], row[1]} <= members and self.angle_roles[i - 2] != FROZEN:
                    raise TopologyError(f"angle of atom {i} is inside a rigid group but free")
                if i >= 3 and {i, *row} <= members and self.dihedral_roles[i - 3] != FROZEN:
                    raise TopologyError(f"dihedral of atom {i} is inside a rigid group but free")

    # reduced-coordinate bookkeeping

    def free_angle_atoms(self) -> np.ndarray:
        return np.array([k + 2 for k, r in enumerate(self.angle_roles) if r == THETA_BB], dtype=int)

    def free_dihedral_atoms(self, role: str) -> np.ndarray:
        return np.array([k + 3 for k, r in enumerate(self.dihedral_roles) if r == role], dtype=int)

    @property
    def counts(self) -> tuple[int, int, int]:
        return (len(self.free_angle_atoms()), len(self.free_dihedral_atoms(PHI_BB)),
                len(self.free_dihedral_atoms(PHI_SC)))

    @property
    def n_free(self) -> int:
        return sum(self.counts)

    def coordinate_atoms(self) -> np.ndarray:
        """Atom index owning each reduced coordinate, in canonical order."""
        return np.concatenate([self.free_angle_atoms(), self.free_dihedral_atoms(PHI_BB),
                               self.free_dihedral_atoms(PHI_SC)]).astype(int)

    def coordinate_residues(self) -> np.ndarray:
        return np.array([self.atoms[i].residue for i in self.coordinate_atoms()], dtype=int)

    def backbone_atoms(self) -> np.ndarray:
        return np.array([i for i, a in enumerate(self.atoms) if a.backbone], dtype=int)

    def ca_atoms(self) -> np.ndarray:
        """One C-alpha index per residue (by name)."""
        out = []
        for r in range(self.n_residues):
            idx = [i for i, a in enumerate(self.atoms) if a.residue == r and a.name == "CA"]
            if len(idx) != 1:
                raise TopologyError(f"residue {r} needs exactly one CA atom")
            out.append(idx[0])
        return np.array(out, dtype=int)

    def bonds(self) -> list[tuple[int, int]]:
        return [(self.zmatrix[i][0], i) for i in range(1, self.n_atoms)]


@dataclass
class InternalCoordinates:
    """Full internal coordinate record; leading axes are batch axes."""

    bonds: np.ndarray       # (..., N-1), bond of atom k+1
    angles: np.ndarray      # (..., N-2), angle of atom k+2
    dihedrals: np.ndarray   # (..., N-3), dihedral of atom k+3


@dataclass
class InternalState:
    """Reduced coordinates x = [theta_bb, phi_bb, phi_sc]."""

    theta_bb: np.ndarray
    phi_bb: np.ndarray
    phi_sc: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.theta_bb, self.phi_bb, self.phi_sc], axis=-1)

    @classmethod
    def from_vector(cls, x, topology: Topology) -> "InternalState":
        x = np.asarray(x, dtype=np.float64)
        a, b, c = topology.counts
        if x.shape[-1] != a + b + c:
            raise TopologyError(f"expected {a + b + c} reduced coordinates, got {x.shape[-1]}")
        return cls(x[..., :a], x[..., a:a + b], x[..., a + b:])


@dataclass
class ReferenceGeometry:
    """Values used for every frozen coordinate (Angstrom / radians)."""

    bonds: np.ndarray
    angles: np.ndarray
    dihedrals: np.ndarray

    def __post_init__(self):
        self.bonds = np.asarray(self.bonds, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        self.dihedrals = np.asarray(self.dihedrals, dtype=np.float64)
        if np.any(self.bonds <= 0):
            raise DegenerateGeometryError("reference bond lengths must be positive")

    def check(self, topology: Topology) -> None:
        n = topology.n_atoms
        if (self.bonds.shape != (n - 1,) or self.angles.shape != (n - 2,)
                or self.dihedrals.shape != (n - 3,)):
            raise TopologyError("reference geometry does not match the topology")
        frozen = [k for k, r in enumerate(topology.angle_roles) if r == FROZEN]
        bad = np.isclose(self.angles[frozen], 0.0) | np.isclose(self.angles[frozen], np.pi)
        if np.any(bad):
            raise DegenerateGeometryError("frozen bond angle at 0 or pi gives a degenerate frame")

    @classmethod
    def from_internal(cls, ic: InternalCoordinates) -> "ReferenceGeometry":
        """Means over a batch of records; dihedrals use the circular mean."""
        bonds = ic.bonds.reshape(-1, ic.bonds.shape[-1]).mean(axis=0)
        angles = ic.angles.reshape(-1, ic.angles.shape[-1]).mean(axis=0)
        d = ic.dihedrals.reshape(-1, ic.dihedrals.shape[-1])
        dihedrals = np.arctan2(np.sin(d).mean(axis=0), np.cos(d).mean(axis=0))
        return cls(bonds, angles, wrap(dihedrals))

    @classmethod
    def from_cartesian(cls, topology: Topology, frames: np.ndarray) -> "ReferenceGeometry":
        return cls.from_internal(cartesian_to_internal(topology, frames))


def wrap(a):
    """Wrap angles into [-pi, pi)."""
    return np.mod(np.asarray(a) + np.pi, 2.0 * np.pi) - np.pi


# ---------------------------------------------------------------------------
# measurement (works on numpy arrays or tensors)


def _out(value: Tensor, *inputs):
    # numpy in, numpy out; any tensor input keeps the result on the tape
    return value if any(isinstance(t, Tensor) for t in inputs) else value.value


def bond_length(a, b):
    return _out(ad.norm(ad.as_tensor(b) - a), a, b)


def bond_angle(a, b, c):
    """Angle at ``b`` between ``a`` and ``c``."""
    u = ad.as_tensor(a) - b
    v = ad.as_tensor(c) - b
    return _out(ad.atan2(ad.norm(ad.cross(u, v)), ad.dot(u, v)), a, b, c)


def dihedral(a, b, c, d):
    """IUPAC dihedral of the chain a-b-c-d, in (-pi, pi]."""
    b1 = ad.as_tensor(b) - a
    b2 = ad.as_tensor(c) - b
    b3 = ad.as_tensor(d) - c
    n1 = ad.cross(b1, b2)
    n2 = ad.cross(b2, b3)
    y = ad.norm(b2) * ad.dot(b1, n2)
    x = ad.dot(n1, n2)
    return _out(ad.atan2(y, x), a, b, c, d)


def _unit_cross_norm(a, b, c) -> np.ndarray:
    u = np.asarray(b) - np.asarray(a)
    v = np.asarray(c) - np.asarray(b)
    return np.linalg.norm(np.cross(u, v), axis=-1) / (
        np.linalg.norm(u, axis=-1) * np.linalg.norm(v, axis=-1))


def cartesian_to_internal(topology: Topology, cart) -> InternalCoordinates:
    """Measure every bond length, bond angle and dihedral of ``cart`` (..., N, 3)."""
    x = np.asarray(cart, dtype=np.float64)
    n = topology.n_atoms
    if x.shape[-2:] != (n, 3):
        raise TopologyError(f"expected (..., {n}, 3) coordinates, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DegenerateGeometryError("non-finite coordinates")
    z = np.array([(r + (-1, -1, -1))[:3] for r in topology.zmatrix])
    idx = np.arange(n)
    a1, a2, a3 = z[:, 0], z[:, 1], z[:, 2]

    r = x[..., idx[1:], :] - x[..., a1[1:], :]
    bonds = np.linalg.norm(r, axis=-1)
    if np.any(bonds < 1e-8):
        raise DegenerateGeometryError("coincident bonded atoms")

    i2 = idx[2:]
    u = x[..., i2, :] - x[..., a1[2:], :]
    v = x[..., a2[2:], :] - x[..., a1[2:], :]
    angles = np.arctan2(np.linalg.norm(np.cross(u, v), axis=-1), np.sum(u * v, axis=-1))

    i3 = idx[3:]
    pa, pb, pc, pd = (x[..., a3[3:], :], x[..., a2[3:], :], x[..., a1[3:], :], x[..., i3, :])
    if np.any(_unit_cross_norm(pa, pb, pc) < 1e-8) or np.any(_unit_cross_norm(pb, pc, pd) < 1e-8):
        raise DegenerateGeometryError("collinear atoms make a dihedral undefined")
    b1, b2, b3 = pb - pa, pc - pb, pd - pc
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    y = np.linalg.norm(b2, axis=-1) * np.sum(b1 * n2, axis=-1)
    dihedrals = wrap(np.arctan2(y, np.sum(n1 * n2, axis=-1)))
    return InternalCoordinates(bonds, angles, dihedrals)


def reduce(ic: InternalCoordinates, topology: Topology,
           reference: ReferenceGeometry | None = None) -> InternalState:
    """Extract the free coordinates in canonical order."""
    n = topology.n_atoms
    if ic.angles.shape[-1] != n - 2 or ic.dihedrals.shape[-1] != n - 3:
        raise TopologyError("internal record does not match the topology")
    if reference is not None:
        reference.check(topology)
    return InternalState(
        theta_bb=ic.angles[..., topology.free_angle_atoms() - 2],
        phi_bb=wrap(ic.dihedrals[..., topology.free_dihedral_atoms(PHI_BB) - 3]),
        phi_sc=wrap(ic.dihedrals[..., topology.free_dihedral_atoms(PHI_SC) - 3]),
    )


def expand(state: InternalState, topology: Topology, reference: ReferenceGeometry) -> InternalCoordinates:
    """Full internal record from a reduced state plus frozen reference values."""
    x = state.to_vector()
    lead = x.shape[:-1]
    bonds = np.broadcast_to(reference.bonds, lead + reference.bonds.shape).copy()
    angles = np.broadcast_to(reference.angles, lead + reference.angles.shape).copy()
    dihedrals = np.broadcast_to(reference.dihedrals, lead + reference.dihedrals.shape).copy()
    angles[..., topology.free_angle_atoms() - 2] = state.theta_bb
    dihedrals[..., topology.free_dihedral_atoms(PHI_BB) - 3] = state.phi_bb
    dihedrals[..., topology.free_dihedral_atoms(PHI_SC) - 3] = state.phi_sc
    return InternalCoordinates(bonds, angles, dihedrals)


# ---------------------------------------------------------------------------
# reconstruction


class Reconstructor:
    """Differentiable NeRF placement of all atoms from reduced coordinates.

    Atom 0 sits at the origin, atom 1 on +x and atom 2 in the xy-plane.
    """

    def __init__(self, topology: Topology, reference: ReferenceGeometry):
        reference.check(topology)
        self.topology = topology
        self.reference = reference
        n = topology.n_atoms
        d = topology.n_free
        ang_free = topology.free_angle_atoms() - 2
        dih_free = np.concatenate([topology.free_dihedral_atoms(PHI_BB),
                                   topology.free_dihedral_atoms(PHI_SC)]) - 3
        # index maps into concat([free (d), frozen constants])
        self._angle_src = np.arange(n - 2) + d
        self._angle_src[ang_free] = np.arange(len(ang_free))
        self._dih_src = np.arange(n - 3) + d + (n - 2)
        self._dih_src[dih_free] = len(ang_free) + np.arange(len(dih_free))
        self._consts = np.concatenate([reference.angles, reference.dihedrals])
        self._zm = topology.zmatrix

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        lead = x.shape[:-1]
        flat = x.reshape((-1, x.shape[-1])) if x.ndim != 2 else x
        B = flat.shape[0]
        n = self.topology.n_atoms
        consts = Tensor(np.broadcast_to(self._consts, (B, self._consts.size)))
        allv = ad.concat([flat, consts], axis=1)
        theta = ad.take(allv, self._angle_src, axis=1)   # (B, n-2)
        phi = ad.take(allv, self._dih_src, axis=1)       # (B, n-3)
        bonds = self.reference.bonds
        ct, st = ad.cos(theta), ad.sin(theta)
        cp, sp = ad.cos(phi), ad.sin(phi)
        # local-frame offsets for atoms 3.. : (-d cos t, d sin t cos p, d sin t sin p)
        c1 = ct[:, 1:] * (-bonds[2:])
        c2 = st[:, 1:] * cp * bonds[2:]
        c3 = st[:, 1:] * sp * bonds[2:]

        zero = np.zeros((B, 3))
        pos: list[Tensor] = [Tensor(zero)]
        e1 = np.zeros((B, 3))
        e1[:, 0] = bonds[0]
        pos.append(Tensor(e1))
        a1 = self._zm[2][0]
        # atoms 0 and 1 lie on the x axis, so the in-plane normal is +y
        ux = -1.0 if a1 == 1 else 1.0
        p2 = ad.stack([ct[:, 0] * (bonds[1] * ux), st[:, 0] * bonds[1], Tensor(np.zeros(B))], axis=1)
        pos.append(pos[a1] + p2)

        for i in range(3, n):
            r1, r2, r3 = self._zm[i]
            A, Bp, C = pos[r3], pos[r2], pos[r1]
            bc = C - Bp
            bc = bc / ad.norm(bc, keepdims=True)
            nv = ad.cross(Bp - A, bc)
            nv = nv / ad.norm(nv, keepdims=True)
            m = ad.cross(nv, bc)
            k = i - 3
            D = C + bc * c1[:, k:k + 1] + m * c2[:, k:k + 1] + nv * c3[:, k:k + 1]
            pos.append(D)
        out = ad.stack(pos, axis=1)  # (B, n, 3)
        if x.ndim != 2:
            out = out.reshape(lead + (n, 3))
        return out


def internal_to_cartesian(topology: Topology, reference: ReferenceGeometry, state) -> np.ndarray:
    """Cartesian coordinates (..., N, 3) for a reduced state or state vector."""
    x = state.to_vector() if isinstance(state, InternalState) else np.asarray(state, dtype=np.float64)
    single = x.ndim == 1
    out = Reconstructor(topology, reference)(Tensor(np.atleast_2d(x))).value
    return out[0] if single else out


# ---------------------------------------------------------------------------
# distance matrices and structural metrics


def backbone_pairs(topology: Topology) -> tuple[np.ndarray, np.ndarray]:
    bb = topology.backbone_atoms()
    i, j = np.triu_indices(len(bb), k=1)
    return bb[i], bb[j]


def backbone_distance_vector(cart, topology: Topology):
    """Upper-triangle backbone distances in lexicographic pair order.

    Numpy in, numpy out; tensors stay tensors.
    """
    i, j = backbone_pairs(topology)
    if isinstance(cart, Tensor):
        diff = ad.take(cart, j, axis=-2) - ad.take(cart, i, axis=-2)
        return ad.norm(diff)
    cart = np.asarray(cart, dtype=np.float64)
    return np.linalg.norm(cart[..., j, :] - cart[..., i, :], axis=-1)


def distance_distortion(samples_q, samples_p, topology: Topology, mode: str = "paired") -> float:
    """Mean absolute backbone distance difference between two ensembles.

    ``paired`` compares the i-th sample of each batch; ``all_pairs`` averages
    over every (q, p) combination.
    """
    dq = backbone_distance_vector(samples_q, topology)
    dp = backbone_distance_vector(samples_p, topology)
    return distance_distortion_from_vectors(dq, dp, mode)


def distance_distortion_from_vectors(dq: np.ndarray, dp: np.ndarray, mode: str = "paired") -> float:
    dq = np.atleast_2d(dq)
    dp = np.atleast_2d(dp)
    if len(dq) == 0 or len(dp) == 0:
        raise ValueError("empty batch")
    if mode == "paired":
        if len(dq) != len(dp):
            raise ValueError("paired mode needs equal batch sizes")
        return float(np.mean(np.abs(dq - dp)))
    if mode == "all_pairs":
        total = 0.0
        for row in dq:
            total += np.abs(row[None, :] - dp).mean(axis=1).sum()
        return float(total / (len(dq) * len(dp)))
    raise ValueError(f"unknown pairing mode {mode!r}")


def kabsch(mobile: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R and translation t minimising |mobile @ R.T + t - target|."""
    mc = mobile.mean(axis=0)
    tc = target.mean(axis=0)
    H = (mobile - mc).T @ (target - tc)
    U, _, Vt = np.linalg.svd(H)
    s = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, s])
    R = Vt.T @ D @ U.T
    return R, tc - mc @ R.T


def superpose(mobile: np.ndarray, target: np.ndarray) -> np.ndarray:
    R, t = kabsch(mobile, target)
    return mobile @ R.T + t


def rmsd_aligned(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("structures need the same atom count")
    moved = superpose(a, b)
    return float(np.sqrt(np.mean(np.sum((moved - b) ** 2, axis=-1))))


def align_to_mean(frames: np.ndarray, iterations: int = 2) -> np.ndarray:
    """Superpose every frame onto the ensemble mean, refining the mean."""
    frames = np.asarray(frames, dtype=np.float64)
    ref = frames[0]
    aligned = np.array([superpose(f, ref) for f in frames])
    for _ in range(iterations):
        ref = aligned.mean(axis=0)
        aligned = np.array([superpose(f, ref) for f in aligned])
    return aligned


def rmsf(frames, topology: Topology, align: bool = True) -> np.ndarray:
    """Per-residue C-alpha fluctuation around the batch-mean position."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or len(frames) == 0:
        raise ValueError("need a non-empty batch of structures")
    if align:
        frames = align_to_mean(frames)
    ca = frames[:, topology.ca_atoms(), :]
    dev = ca - ca.mean(axis=0)
    return np.sqrt(np.mean(np.sum(dev * dev, axis=-1), axis=0))
