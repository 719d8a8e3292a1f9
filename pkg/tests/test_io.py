from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from conftest import random_states, randomize, small_config
from splitbg.architecture import build_split_flow
from splitbg.energy import potential_energy
from splitbg.geometry import internal_to_cartesian
from splitbg.io import (
    FormatError,
    load_checkpoint,
    load_forcefield,
    load_topology,
    read_checkpoint,
    read_trajectory,
    save_checkpoint,
    save_forcefield,
    save_topology,
    write_trajectory,
)
from splitbg.systems import toy_chain


@pytest.fixture(scope="module")
def system():
    return toy_chain(2)


def test_topology_and_forcefield_round_trip(tmp_path, system):
    save_topology(tmp_path / "t.json", system.topology, system.reference)
    save_forcefield(tmp_path / "f.json", system.forcefield)
    topo, ref = load_topology(tmp_path / "t.json")
    ff = load_forcefield(tmp_path / "f.json")
    assert topo == system.topology
    x = system.ground_state()
    a = potential_energy(internal_to_cartesian(topo, ref, x), ff)
    b = potential_energy(internal_to_cartesian(system.topology, system.reference, x), system.forcefield)
    assert a == b
    d = json.loads((tmp_path / "f.json").read_text())
    d["dielectric"] = 1.0
    (tmp_path / "g.json").write_text(json.dumps(d))
    with pytest.raises(FormatError):
        load_forcefield(tmp_path / "g.json")


def test_topology_without_reference(tmp_path, system):
    save_topology(tmp_path / "t.json", system.topology)
    topo, ref = load_topology(tmp_path / "t.json")
    assert ref is None and topo.counts == (4, 3, 2)


def test_trajectory_round_trip_and_header(tmp_path, system):
    frames = random_states(build_split_flow(system.topology, small_config()).layout, 7, np.random.default_rng(0))
    path = tmp_path / "x.bgic"
    write_trajectory(path, frames, system.topology.counts)
    back, counts = read_trajectory(path)
    assert np.array_equal(back, frames) and counts == (4, 3, 2)
    raw = path.read_bytes()
    assert raw[:4] == b"BGIC"
    assert struct.unpack("<IQQ3Q", raw[4:4 + struct.calcsize("<IQQ3Q")]) == (1, 7, 9, 4, 3, 2)
    assert len(raw) == 4 + struct.calcsize("<IQQ3Q") + 7 * 9 * 8


def test_trajectory_errors(tmp_path):
    with pytest.raises(FormatError):
        write_trajectory(tmp_path / "a", np.zeros((2, 3)), (1, 1, 2))
    write_trajectory(tmp_path / "a", np.zeros((2, 3)), (1, 1, 1))
    raw = bytearray((tmp_path / "a").read_bytes())
    (tmp_path / "b").write_bytes(bytes(raw[:-8]))
    with pytest.raises(FormatError):
        read_trajectory(tmp_path / "b")
    bad = bytearray(raw)
    bad[4:8] = struct.pack("<I", 2)
    (tmp_path / "c").write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="version"):
        read_trajectory(tmp_path / "c")
    (tmp_path / "d").write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(FormatError, match="magic"):
        read_trajectory(tmp_path / "d")


def test_checkpoint_round_trip(tmp_path, system):
    flow = build_split_flow(system.topology, small_config(2, 1), 4)
    randomize(flow, 4, head_scale=0.2)
    flow.fit_statistics(random_states(flow.layout, 100, np.random.default_rng(1)))
    save_checkpoint(tmp_path / "a.ckpt", flow, {"stage": 2})
    back, extra = load_checkpoint(tmp_path / "a.ckpt")
    assert extra == {"stage": 2}
    x = random_states(flow.layout, 5, np.random.default_rng(2))
    assert np.array_equal(flow.log_prob(x).value, back.log_prob(x).value)
    save_checkpoint(tmp_path / "b.ckpt", back, {"stage": 2})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    header, arrays = read_checkpoint(tmp_path / "a.ckpt")
    assert list(header) == sorted(header)
    assert len(arrays) == len(flow.parameters())


def test_checkpoint_errors(tmp_path, system):
    flow = build_split_flow(system.topology, small_config(1, 1), 0)
    save_checkpoint(tmp_path / "a.ckpt", flow)
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-16])
    with pytest.raises(FormatError, match="truncated"):
        read_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(raw + b"\0" * 8)
    with pytest.raises(FormatError, match="trailing"):
        read_checkpoint(tmp_path / "x.ckpt")
    (tmp_path / "v.ckpt").write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(tmp_path / "v.ckpt")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16:16 + hlen])
    header["parameters"][0][0] = "renamed"
    body = json.dumps(header, sort_keys=True).encode()
    (tmp_path / "n.ckpt").write_bytes(raw[:8] + struct.pack("<Q", len(body)) + body + raw[16 + hlen:])
    with pytest.raises(FormatError, match="match"):
        load_checkpoint(tmp_path / "n.ckpt")
