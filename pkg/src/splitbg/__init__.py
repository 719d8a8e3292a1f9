"""Split normalizing flows over reduced internal coordinates of chain molecules."""
from .architecture import SplitFlow, SplitFlowConfig, build_split_flow
from .energy import ChainTarget, DoubleWellTarget, ToyForceField, potential_energy
from .geometry import (
    InternalState,
    ReferenceGeometry,
    Topology,
    cartesian_to_internal,
    distance_distortion,
    internal_to_cartesian,
    reduce,
    rmsd_aligned,
    rmsf,
)
from .systems import toy_chain
from .training import TrainConfig, gaussian_w2, importance_weights, run_schedule

__version__ = "0.1.0"
