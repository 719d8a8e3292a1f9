"""Split flow: a backbone stack followed by a joint stack over all coordinates.

Sampling draws backbone latents, pushes them through the backbone stack,
appends side-chain latents and pushes the result through the joint stack.
Densities follow the reverse path.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditioner import GAUConditioner, GAUConfig, PositionTable
from .flow import (
    CIRCLE,
    GAUSSIAN,
    UNIFORM,
    VONMISES,
    BaseDistribution,
    CoordinateLayout,
    CouplingLayer,
    FlowStack,
    Module,
    Normalizer,
    coverage,
    fit_vonmises_kappa,
    mask_schedule,
)
from .geometry import Topology


@dataclass
class SplitFlowConfig:
    n_backbone_blocks: int = 8
    n_joint_blocks: int = 4
    bins: int = 8
    interval_bound: float = 5.0
    interval_base: str = GAUSSIAN
    circle_base: str = VONMISES
    conditioner: GAUConfig = field(default_factory=GAUConfig)

    def validate(self) -> None:
        if self.n_backbone_blocks < 0 or self.n_joint_blocks < 0:
            raise ValueError("block counts must be non-negative")
        if self.bins < 1:
            raise ValueError("need at least one spline bin")
        if self.interval_bound <= 0:
            raise ValueError("interval bound must be positive")
        if self.interval_base != GAUSSIAN:
            raise ValueError("interval coordinates use a Gaussian base")
        if self.circle_base not in (UNIFORM, VONMISES):
            raise ValueError("circle coordinates use a uniform or von Mises base")
        self.conditioner.validate()

    def to_json(self) -> dict:
        d = asdict(self)
        d["conditioner"] = self.conditioner.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SplitFlowConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown architecture keys {sorted(unknown)}")
        cond = d.pop("conditioner", {})
        gknown = set(GAUConfig.__dataclass_fields__)
        if set(cond) - gknown:
            raise KeyError(f"unknown conditioner keys {sorted(set(cond) - gknown)}")
        return cls(conditioner=GAUConfig(**cond), **d)


PAPER_CONFIG = SplitFlowConfig(n_backbone_blocks=48, n_joint_blocks=10, bins=8)


def _build_stack(layout: CoordinateLayout, n_layers: int, cfg: SplitFlowConfig,
                 positions: PositionTable, rng: np.random.Generator) -> FlowStack:
    layers = []
    for identity, transformed in mask_schedule(layout.dim, n_layers, rng):
        cond = GAUConditioner(layout, transformed, cfg.conditioner, positions, cfg.bins, rng)
        layers.append(CouplingLayer(layout, identity, transformed, cond, cfg.bins, cfg.interval_bound))
    return FlowStack(layers)


class SplitFlow(Module):
    """Bijection between base latents and reduced coordinates.

    ``forward`` maps latents to physical coordinates, ``inverse`` goes back.
    Both return per-sample log-determinants of the map they apply.
    """

    def __init__(self, layout: CoordinateLayout, config: SplitFlowConfig, seed: int = 0,
                 normalizer: Normalizer | None = None, base: BaseDistribution | None = None):
        config.validate()
        self.layout = layout
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.positions = PositionTable(config.conditioner.max_tokens, config.conditioner.model_dim, rng)
        nb = layout.n_backbone
        self.bb_index = np.arange(nb)
        self.backbone = _build_stack(layout.subset(self.bb_index), config.n_backbone_blocks,
                                     config, self.positions, rng)
        self.joint = _build_stack(layout, config.n_joint_blocks, config, self.positions, rng)
        self.normalizer = normalizer or Normalizer(layout)
        if base is None:
            kinds = [config.circle_base if k == CIRCLE else config.interval_base for k in layout.kinds]
            base = BaseDistribution(kinds)
        self.base = base

    @property
    def dim(self) -> int:
        return self.layout.dim

    def fit_statistics(self, data: np.ndarray) -> None:
        """Fit the normaliser and von Mises concentrations to a training set."""
        self.normalizer = Normalizer.fit(self.layout, data)
        u = self.normalizer.forward(np.asarray(data, dtype=np.float64)).value
        kinds = list(self.base.kinds)
        kappa = np.ones(self.dim)
        vm = np.array([k == VONMISES for k in kinds])
        if vm.any():
            kappa[vm] = fit_vonmises_kappa(u[:, vm])
        self.base = BaseDistribution(kinds, np.zeros(self.dim), kappa)

    def coverage(self) -> tuple[np.ndarray, np.ndarray]:
        nb = self.layout.n_backbone
        return coverage(self.backbone, nb), coverage(self.joint, self.dim)

    # latent <-> flow space (no normaliser)

    def forward_latent(self, z, rng=None) -> tuple[Tensor, Tensor]:
        z = ad.as_tensor(z)
        nb = self.layout.n_backbone
        zb = z[:, :nb] if nb < self.dim else z
        yb, ld_b = self.backbone.forward(zb, rng)
        y = ad.concat([yb, z[:, nb:]], axis=1) if nb < self.dim else yb
        y, ld_j = self.joint.forward(y, rng)
        return y, ld_b + ld_j

    def inverse_latent(self, y, rng=None) -> tuple[Tensor, Tensor]:
        y = ad.as_tensor(y)
        nb = self.layout.n_backbone
        w, ld_j = self.joint.inverse(y, rng)
        wb = w[:, :nb] if nb < self.dim else w
        zb, ld_b = self.backbone.inverse(wb, rng)
        z = ad.concat([zb, w[:, nb:]], axis=1) if nb < self.dim else zb
        return z, ld_j + ld_b

    # latent <-> physical coordinates

    def forward(self, z, rng=None) -> tuple[Tensor, Tensor]:
        """x = f(z) and log|det df/dz|."""
        y, ld = self.forward_latent(z, rng)
        x = self.normalizer.inverse(y)
        return x, ld - self.normalizer.logdet()

    def inverse(self, x, rng=None) -> tuple[Tensor, Tensor]:
        """z = f^-1(x) and log|det df^-1/dx|."""
        x = ad.as_tensor(x)
        y = self.normalizer.forward(x)
        z, ld = self.inverse_latent(y, rng)
        return z, ld + self.normalizer.logdet()

    def log_prob(self, x, rng=None) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 1:
            x = x.reshape((1, -1))
        self.layout.check(x.value)
        z, ld = self.inverse(x, rng)
        return self.base.log_prob(z) + ld

    def sample(self, n: int, rng: np.random.Generator, dropout_rng=None) -> tuple[Tensor, Tensor]:
        """Draw ``n`` samples; returns (x, log q(x))."""
        z = self.base.sample(n, rng)
        if n == 0:
            return Tensor(np.zeros((0, self.dim))), Tensor(np.zeros(0))
        x, ld = self.forward(Tensor(z), dropout_rng)
        logq = self.base.log_prob(z) - ld
        return x, logq

    def parameter_arrays(self) -> list[np.ndarray]:
        return [p.value for p in self.parameters()]

    def set_parameter_arrays(self, arrays) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} parameter tensors, got {len(arrays)}")
        for p, a in zip(params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"parameter shape mismatch {a.shape} vs {p.shape}")
            p.value = a.copy()

    def describe(self) -> dict:
        cb, cj = self.coverage()
        return {"dim": self.dim, "n_backbone": int(self.layout.n_backbone),
                "backbone_blocks": len(self.backbone), "joint_blocks": len(self.joint),
                "parameters": self.n_parameters(), "backbone_coverage": bool(cb.all()),
                "joint_coverage": bool(cj.all())}


def build_split_flow(topology: Topology | CoordinateLayout, config: SplitFlowConfig | None = None,
                     seed: int = 0) -> SplitFlow:
    """Identity-initialised split flow for a topology (or an explicit layout)."""
    config = config or SplitFlowConfig()
    layout = topology if isinstance(topology, CoordinateLayout) else CoordinateLayout.from_topology(topology)
    if layout.dim == 0:
        raise ValueError("topology has no free coordinates")
    if layout.n_tokens > config.conditioner.max_tokens:
        raise ValueError("more residues than the position table covers")
    return SplitFlow(layout, config, seed)
