"""File formats: JSON topology/force field, BGIC trajectories, BGFW checkpoints.

Binary files start with a 4-byte magic and a little-endian uint32 version.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .architecture import SplitFlow, SplitFlowConfig
from .energy import ToyForceField
from .flow import BaseDistribution, CoordinateLayout, Normalizer
from .geometry import Atom, ReferenceGeometry, Topology

TRAJ_MAGIC = b"BGIC"
TRAJ_VERSION = 1
CKPT_MAGIC = b"BGFW"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# topology and force field (JSON)


def topology_to_json(topology: Topology, reference: ReferenceGeometry | None = None) -> dict:
    d = {
        "atoms": [{"name": a.name, "element": a.element, "residue": a.residue, "backbone": a.backbone}
                  for a in topology.atoms],
        "zmatrix": [list(r) for r in topology.zmatrix],
        "angle_roles": list(topology.angle_roles),
        "dihedral_roles": list(topology.dihedral_roles),
        "rigid_groups": [list(g) for g in topology.rigid_groups],
    }
    if reference is not None:
        d["reference"] = {"bonds": reference.bonds.tolist(), "angles": reference.angles.tolist(),
                          "dihedrals": reference.dihedrals.tolist()}
    return d


def topology_from_json(d: dict) -> tuple[Topology, ReferenceGeometry | None]:
    allowed = {"atoms", "zmatrix", "angle_roles", "dihedral_roles", "rigid_groups", "reference"}
    if set(d) - allowed:
        raise FormatError(f"unknown topology keys {sorted(set(d) - allowed)}")
    atoms = [Atom(a["name"], a["element"], int(a["residue"]), bool(a["backbone"])) for a in d["atoms"]]
    topo = Topology(atoms, [tuple(r) for r in d["zmatrix"]], d["angle_roles"], d["dihedral_roles"],
                    d.get("rigid_groups", []))
    ref = None
    if "reference" in d:
        r = d["reference"]
        ref = ReferenceGeometry(r["bonds"], r["angles"], r["dihedrals"])
        ref.check(topo)
    return topo, ref


def save_topology(path, topology: Topology, reference: ReferenceGeometry | None = None) -> None:
    Path(path).write_text(json.dumps(topology_to_json(topology, reference), indent=1))


def load_topology(path) -> tuple[Topology, ReferenceGeometry | None]:
    return topology_from_json(json.loads(Path(path).read_text()))


_FF_FIELDS = ("bonds", "bond_k", "bond_d0", "angles", "angle_k", "angle_t0", "torsions", "torsion_amp",
              "torsion_n", "torsion_phase", "lj_pairs", "lj_eps", "lj_sigma")


def forcefield_to_json(ff: ToyForceField) -> dict:
    return {k: getattr(ff, k).tolist() for k in _FF_FIELDS}


def forcefield_from_json(d: dict) -> ToyForceField:
    if set(d) - set(_FF_FIELDS):
        raise FormatError(f"unknown force-field keys {sorted(set(d) - set(_FF_FIELDS))}")
    return ToyForceField(**{k: d[k] for k in _FF_FIELDS if k in d})


def save_forcefield(path, ff: ToyForceField) -> None:
    Path(path).write_text(json.dumps(forcefield_to_json(ff), indent=1))


def load_forcefield(path) -> ToyForceField:
    return forcefield_from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# BGIC trajectories


def _check_header(raw: bytes, magic: bytes, version: int, what: str) -> None:
    if len(raw) < 8 or raw[:4] != magic:
        raise FormatError(f"not a {what} file (bad magic)")
    (v,) = struct.unpack("<I", raw[4:8])
    if v != version:
        raise FormatError(f"{what} version {v} is not supported (expected {version})")


def write_trajectory(path, frames: np.ndarray, counts: tuple[int, int, int]) -> None:
    """Frames of reduced coordinates, shape (n_frames, n_coords)."""
    frames = np.asarray(frames, dtype="<f8")
    if frames.ndim != 2 or frames.shape[1] != sum(counts):
        raise FormatError("frames must be (n_frames, sum(counts))")
    header = TRAJ_MAGIC + struct.pack("<IQQ3Q", TRAJ_VERSION, frames.shape[0], frames.shape[1], *counts)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(frames.tobytes())


def read_trajectory(path) -> tuple[np.ndarray, tuple[int, int, int]]:
    raw = Path(path).read_bytes()
    _check_header(raw, TRAJ_MAGIC, TRAJ_VERSION, "trajectory")
    size = struct.calcsize("<IQQ3Q")
    _, n, d, a, b, c = struct.unpack("<IQQ3Q", raw[4:4 + size])
    body = raw[4 + size:]
    if len(body) != n * d * 8 or a + b + c != d:
        raise FormatError("trajectory body does not match its header")
    return np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64), (a, b, c)


# ---------------------------------------------------------------------------
# BGFW checkpoints


def flow_header(flow: SplitFlow, extra: dict | None = None) -> dict:
    return {
        "architecture": flow.config.to_json(),
        "seed": flow.seed,
        "layout": flow.layout.to_json(),
        "normalizer": flow.normalizer.to_json(),
        "base": flow.base.to_json(),
        "parameters": [[name, list(p.shape)] for name, p in flow.named_parameters()],
        "extra": extra or {},
    }


def save_checkpoint(path, flow: SplitFlow, extra: dict | None = None) -> None:
    header = json.dumps(flow_header(flow, extra), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for _, p in flow.named_parameters():
            fh.write(np.asarray(p.value, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, list[np.ndarray]]:
    raw = Path(path).read_bytes()
    _check_header(raw, CKPT_MAGIC, CKPT_VERSION, "checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError("corrupt checkpoint header") from exc
    pos = 16 + hlen
    arrays = []
    for _, shape in header["parameters"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = raw[pos:pos + 8 * n]
        if len(chunk) != 8 * n:
            raise FormatError("truncated checkpoint")
        arrays.append(np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64))
        pos += 8 * n
    if pos != len(raw):
        raise FormatError("trailing bytes in checkpoint")
    return header, arrays


def load_checkpoint(path) -> tuple[SplitFlow, dict]:
    header, arrays = read_checkpoint(path)
    cfg = SplitFlowConfig.from_json(header["architecture"])
    layout = CoordinateLayout.from_json(header["layout"])
    norm = Normalizer(layout, header["normalizer"]["shift"], header["normalizer"]["scale"])
    base = BaseDistribution.from_json(header["base"])
    flow = SplitFlow(layout, cfg, header["seed"], norm, base)
    names = [n for n, _ in flow.named_parameters()]
    if names != [n for n, _ in header["parameters"]]:
        raise FormatError("checkpoint parameters do not match the architecture")
    flow.set_parameter_arrays(arrays)
    return flow, header.get("extra", {})
