"""Low-rank adapter experts with noisy soft routing.

Each adapted linear layer carries one always-active universal expert plus T
gated specific experts. The gate mixes specific-expert outputs with softmax
weights computed from the layer input; during training a learned,
softplus-scaled Gaussian noise term perturbs the gate logits to keep expert
utilization from collapsing. The combined low-rank delta is scaled by
alpha / rank and added onto the base layer's output, so zero-initialized B
matrices make every adapter an exact no-op.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .rng import RngContext

logger = logging.getLogger(__name__)

__all__ = [
    "AdapterSpec",
    "LoraExpert",
    "RoutingGate",
    "MoEAdapterLayer",
    "build_adapter_layer",
    "build_adapter_set",
    "gate_weights",
    "moe_forward",
    "utilization_stats",
    "trainable_parameters",
    "adapter_parameter_count",
    "set_requires_grad",
]


@dataclass
class AdapterSpec:
    """Hyperparameters shared by every adapter layer in a set."""

    n_specific: int = 3
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    placement: str = "ffn"  # "ffn" or "all"
    noise_enabled: bool = True

    def __post_init__(self):
        if self.n_specific < 0:
            raise ValueError("n_specific must be >= 0")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.placement not in ("ffn", "all"):
            raise ValueError(f"unknown placement {self.placement!r}")


@dataclass
class LoraExpert:
    """Rank-r factorized delta for one linear layer: x -> B (A x_dropped)."""

    a: T.Tensor  # (rank, d_in)
    b: T.Tensor  # (d_out, rank)
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05


@dataclass
class RoutingGate:
    """Softmax gate over specific experts with optional learned noise."""

    wg: T.Tensor  # (d_in, T)
    wn: T.Tensor  # (d_in, T)
    n_specific: int = 3
    noise_enabled: bool = True


@dataclass
class MoEAdapterLayer:
    """Universal expert + T gated specific experts attached to one base linear layer."""

    site: str
    universal: LoraExpert
    specific: List[LoraExpert]
    gate: RoutingGate
    rank: int
    alpha: float
    dropout: float


def _new_expert(d_in: int, d_out: int, spec: AdapterSpec, rng: RngContext) -> LoraExpert:
    # B starts at zero so a fresh expert contributes exactly nothing.
    a = T.randn(rng, (spec.rank, d_in), std=1.0 / np.sqrt(d_in), requires_grad=True)
    b = T.zeros((d_out, spec.rank), requires_grad=True)
    return LoraExpert(a=a, b=b, rank=spec.rank, alpha=spec.alpha, dropout=spec.dropout)


def build_adapter_layer(site: str, d_in: int, d_out: int, spec: AdapterSpec, rng: RngContext) -> MoEAdapterLayer:
    universal = _new_expert(d_in, d_out, spec, rng.fork(f"{site}:universal"))
    specific = [_new_expert(d_in, d_out, spec, rng.fork(f"{site}:specific{j}")) for j in range(spec.n_specific)]
    gate_rng = rng.fork(f"{site}:gate")
    gate = RoutingGate(
        wg=T.randn(gate_rng, (d_in, spec.n_specific), std=0.02, requires_grad=True),
        wn=T.randn(gate_rng, (d_in, spec.n_specific), std=0.02, requires_grad=True),
        n_specific=spec.n_specific,
        noise_enabled=spec.noise_enabled,
    )
    return MoEAdapterLayer(
        site=site,
        universal=universal,
        specific=specific,
        gate=gate,
        rank=spec.rank,
        alpha=spec.alpha,
        dropout=spec.dropout,
    )


def build_adapter_set(
    sites: Dict[str, Tuple[int, int]], spec: AdapterSpec, rng: RngContext
) -> Dict[str, MoEAdapterLayer]:
    """One adapter layer per named site; ``sites`` maps name -> (d_in, d_out)."""
    return {name: build_adapter_layer(name, d_in, d_out, spec, rng) for name, (d_in, d_out) in sites.items()}


def _gate_matrix(
    gate: RoutingGate, x: T.Tensor, train_mode: bool, rng: Optional[RngContext]
) -> T.Tensor:
    """Gate weights for a batch of row vectors x: (n, d_in) -> (n, T)."""
    if x.shape[-1] != gate.wg.shape[0]:
        raise T.ShapeError(f"gate: input dim {x.shape[-1]} != gate dim {gate.wg.shape[0]}")
    logits = T.matmul(x, gate.wg)
    if train_mode and gate.noise_enabled:
        if rng is None:
            raise ValueError("gate noise requires an RngContext in train mode")
        noise = T.sample_standard_normal(rng, logits.shape)
        logits = T.add(logits, T.mul(noise, T.softplus(T.matmul(x, gate.wn))))
    return T.softmax(logits, axis=-1)


def gate_weights(
    gate: RoutingGate, x, train_mode: bool = False, rng: Optional[RngContext] = None
) -> T.Tensor:
    """Routing weights for a single hidden vector; length T, sums to 1."""
    xt = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float64))
    if xt.data.ndim != 1:
        raise T.ShapeError(f"gate_weights: expected a vector, got shape {xt.shape}")
    out = _gate_matrix(gate, T.reshape(xt, (1, -1)), train_mode, rng)
    return T.reshape(out, (-1,))


def _expert_apply(expert: LoraExpert, x: T.Tensor, train_mode: bool, rng: Optional[RngContext]) -> T.Tensor:
    h = x
    if train_mode and expert.dropout > 0.0:
        if rng is None:
            raise ValueError("expert dropout requires an RngContext in train mode")
        keep = 1.0 - expert.dropout
        mask = (rng.uniform(0.0, 1.0, x.shape) < keep).astype(np.float64) / keep
        h = T.mul(h, T.Tensor(mask))
    return T.matmul(T.matmul(h, T.transpose(expert.a)), T.transpose(expert.b))


def moe_forward(
    layer: MoEAdapterLayer,
    x: T.Tensor,
    base_output: T.Tensor,
    train_mode: bool = False,
    rng: Optional[RngContext] = None,
    gate_collector: Optional[list] = None,
) -> T.Tensor:
    """base_output + (alpha / rank) * (sum_j gate_j * specific_j(x) + universal(x)).

    Accepts a single vector or a (n, d_in) batch of row vectors; the gate
    routes each row independently. Draw order from ``rng`` is fixed (gate
    noise, then specific experts in index order, then the universal expert)
    so a seeded context reproduces the same forward bit for bit.
    """
    single = x.data.ndim == 1
    x2 = T.reshape(x, (1, -1)) if single else x
    base2 = T.reshape(base_output, (1, -1)) if single else base_output
    if x2.data.ndim != 2 or base2.data.ndim != 2 or x2.shape[0] != base2.shape[0]:
        raise T.ShapeError(f"moe_forward: incompatible shapes {x.shape} and {base_output.shape}")

    z: Optional[T.Tensor] = None
    if layer.specific:  # T=0 degenerates to a single always-on universal expert
        gates = _gate_matrix(layer.gate, x2, train_mode, rng)
        if gate_collector is not None:
            gate_collector.append((layer.site, gates.data.copy()))
        for j, expert in enumerate(layer.specific):
            weighted = T.row_scale(
                _expert_apply(expert, x2, train_mode, rng),
                T.reshape(T.narrow(gates, 1, j, 1), (-1,)),
            )
            z = weighted if z is None else T.add(z, weighted)
    universal_out = _expert_apply(layer.universal, x2, train_mode, rng)
    z = universal_out if z is None else T.add(z, universal_out)
    out = T.add(base2, T.scale(z, layer.alpha / layer.rank))
    return T.reshape(out, base_output.shape) if single else out


def utilization_stats(layer: MoEAdapterLayer, hidden_vectors) -> np.ndarray:
    """Mean noise-free gate weight per specific expert over a batch of vectors."""
    batch = np.asarray(hidden_vectors, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.size == 0 or batch.shape[0] == 0:
        raise ValueError("utilization_stats: empty batch")
    gates = _gate_matrix(layer.gate, T.Tensor(batch), train_mode=False, rng=None)
    return gates.data.mean(axis=0)


def trainable_parameters(layer: MoEAdapterLayer) -> Dict[str, T.Tensor]:
    """Every A/B factor plus both gate matrices; base weights are never included."""
    params: Dict[str, T.Tensor] = {}
    for j, expert in enumerate(layer.specific):
        params[f"{layer.site}.specific{j}.a"] = expert.a
        params[f"{layer.site}.specific{j}.b"] = expert.b
    params[f"{layer.site}.universal.a"] = layer.universal.a
    params[f"{layer.site}.universal.b"] = layer.universal.b
    params[f"{layer.site}.gate.wg"] = layer.gate.wg
    params[f"{layer.site}.gate.wn"] = layer.gate.wn
    return params


def adapter_parameter_count(d_in: int, d_out: int, spec: AdapterSpec) -> int:
    """Closed-form trainable-parameter count for one adapted layer."""
    return (spec.n_specific + 1) * spec.rank * (d_in + d_out) + 2 * d_in * spec.n_specific


def set_requires_grad(adapter_set: Dict[str, MoEAdapterLayer], flag: bool) -> None:
    for layer in adapter_set.values():
        for p in trainable_parameters(layer).values():
            p.requires_grad = flag
