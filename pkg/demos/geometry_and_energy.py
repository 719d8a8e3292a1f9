"""
Reduced internal coordinates of a toy chain
===========================================

Build the eight-residue toy chain, move between reduced coordinates and
Cartesian positions, and look at its force-field energy.
"""
import numpy as np

from splitbg.geometry import cartesian_to_internal, internal_to_cartesian, reduce, rmsd_aligned, wrap
from splitbg.systems import toy_chain

# the chain: five atoms per residue (N, CA, C and two side-chain beads)
system = toy_chain(8)
topo, ref = system.topology, system.reference
n_theta, n_phi_bb, n_phi_sc = topo.counts
print(f"{topo.n_atoms} atoms, reduced state = {n_theta} angles + {n_phi_bb} backbone "
      f"+ {n_phi_sc} side-chain dihedrals")

# the force-field minimum, and a random perturbation of it
x0 = system.ground_state()
rng = np.random.default_rng(0)
x = x0 + rng.normal(0.0, 0.1, (5, len(x0)))
x[:, n_theta:] = wrap(x[:, n_theta:])

# reduced -> Cartesian -> reduced is the identity
cart = internal_to_cartesian(topo, ref, x)
back = reduce(cartesian_to_internal(topo, cart), topo, ref).to_vector()
print("round-trip error (rad):", np.abs(wrap(back - x)).max())

# energies in kcal/mol; the ground state sits at the bottom
target = system.target()
print("ground-state energy:", target.energy(x0[None])[0])
print("perturbed energies:", np.round(target.energy(x), 3))
print("kT at 300 K:", target.kT)

# structural comparison after optimal superposition
print("RMSD to the ground state (A):",
      np.round([rmsd_aligned(c, internal_to_cartesian(topo, ref, x0[None])[0]) for c in cart], 4))
