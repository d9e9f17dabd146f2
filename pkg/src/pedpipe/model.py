"""Tiny decoder-only causal transformer.

Pre-norm blocks with exact-GELU feed-forward layers, learned absolute
positional embeddings, and (by default) an output head tied to the token
embedding. Feed-forward linear layers expose adapter hook points; a config
switch extends the hooks to the attention projections.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import adapters as A
from . import tensor as T
from .rng import RngContext

logger = logging.getLogger(__name__)

__all__ = [
    "ModelConfig",
    "TransformerWeights",
    "SequenceLengthError",
    "init_weights",
    "forward",
    "sequence_logprob",
    "generate",
]

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258


class SequenceLengthError(ValueError):
    """Input longer than the model's maximum sequence length."""


@dataclass
class ModelConfig:
    vocab_size: int = 259  # 256 bytes + PAD/BOS/EOS
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 256
    tie_embeddings: bool = True
    pad_id: int = PAD_ID
    bos_id: int = BOS_ID
    eos_id: int = EOS_ID

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def adapter_sites(self, placement: str = "ffn") -> Dict[str, Tuple[int, int]]:
        """Hookable linear layers: FFN projections, plus attention when placement='all'."""
        sites: Dict[str, Tuple[int, int]] = {}
        for i in range(self.n_layers):
            sites[f"layer{i}.ffn.up"] = (self.d_model, self.d_ff)
            sites[f"layer{i}.ffn.down"] = (self.d_ff, self.d_model)
            if placement == "all":
                for proj in ("q", "k", "v", "o"):
                    sites[f"layer{i}.attn.{proj}"] = (self.d_model, self.d_model)
        return sites


@dataclass
class TransformerWeights:
    """Named parameter tensors for one model instance."""

    config: ModelConfig
    tensors: Dict[str, T.Tensor]

    def parameters(self) -> Dict[str, T.Tensor]:
        return self.tensors

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def copy(self, requires_grad: bool = False) -> "TransformerWeights":
        """Deep copy; used for the frozen reference policy and best-checkpoint tracking."""
        tensors = {}
        for name, t in self.tensors.items():
            tensors[name] = T.Tensor(t.data.copy(), requires_grad=requires_grad)
        return TransformerWeights(config=replace(self.config), tensors=tensors)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_weights(config: ModelConfig, rng: RngContext, std: float = 0.02) -> TransformerWeights:
    r = rng.fork("model-init")
    d, h, v = config.d_model, config.d_ff, config.vocab_size
    tensors: Dict[str, T.Tensor] = {
        "tok_emb": T.randn(r.fork("tok_emb"), (v, d), std=std, requires_grad=True),
        "pos_emb": T.randn(r.fork("pos_emb"), (config.max_seq_len, d), std=std, requires_grad=True),
    }
    for i in range(config.n_layers):
        lr = r.fork(f"layer{i}")
        p = f"layer{i}."
        tensors[p + "ln1.gain"] = T.Tensor(np.ones(d), requires_grad=True)
        tensors[p + "ln1.bias"] = T.zeros(d, requires_grad=True)
        for proj in ("q", "k", "v", "o"):
            tensors[p + f"attn.{proj}"] = T.randn(lr.fork(proj), (d, d), std=std, requires_grad=True)
        tensors[p + "ln2.gain"] = T.Tensor(np.ones(d), requires_grad=True)
        tensors[p + "ln2.bias"] = T.zeros(d, requires_grad=True)
        tensors[p + "ffn.up.w"] = T.randn(lr.fork("ffn.up"), (d, h), std=std, requires_grad=True)
        tensors[p + "ffn.up.b"] = T.zeros(h, requires_grad=True)
        tensors[p + "ffn.down.w"] = T.randn(lr.fork("ffn.down"), (h, d), std=std, requires_grad=True)
        tensors[p + "ffn.down.b"] = T.zeros(d, requires_grad=True)
    tensors["final_ln.gain"] = T.Tensor(np.ones(d), requires_grad=True)
    tensors["final_ln.bias"] = T.zeros(d, requires_grad=True)
    if not config.tie_embeddings:
        tensors["head.w"] = T.randn(r.fork("head"), (d, v), std=std, requires_grad=True)
    return TransformerWeights(config=config, tensors=tensors)


def _hooked_linear(
    x: T.Tensor,
    w: T.Tensor,
    bias: Optional[T.Tensor],
    site: str,
    adapter_set,
    train_mode: bool,
    rng,
    gate_collector,
) -> T.Tensor:
    out = T.matmul(x, w)
    if bias is not None:
        out = T.add(out, bias)
    if adapter_set and site in adapter_set:
        out = A.moe_forward(adapter_set[site], x, out, train_mode=train_mode, rng=rng, gate_collector=gate_collector)
    return out


def forward(
    weights: TransformerWeights,
    tokens: Sequence[int],
    adapter_set: Optional[Dict[str, A.MoEAdapterLayer]] = None,
    train_mode: bool = False,
    rng: Optional[RngContext] = None,
    gate_collector: Optional[list] = None,
) -> T.Tensor:
    """Logits (len, vocab); position i attends only to positions <= i."""
    cfg = weights.config
    n = len(tokens)
    if n == 0:
        raise ValueError("forward: empty token sequence")
    if n > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    w = weights.tensors
    h = T.add(T.embedding_lookup(w["tok_emb"], tokens), T.narrow(w["pos_emb"], 0, 0, n))

    nh, hd = cfg.n_heads, cfg.head_dim
    causal = np.broadcast_to(np.triu(np.ones((n, n), dtype=bool), k=1), (nh, n, n))
    inv_sqrt_hd = 1.0 / np.sqrt(hd)

    for i in range(cfg.n_layers):
        p = f"layer{i}."
        x1 = T.layer_norm(h, w[p + "ln1.gain"], w[p + "ln1.bias"])

        def heads(name: str) -> T.Tensor:
            proj = _hooked_linear(
                x1, w[p + f"attn.{name}"], None, p + f"attn.{name}", adapter_set, train_mode, rng, gate_collector
            )
            return T.transpose(T.reshape(proj, (n, nh, hd)), (1, 0, 2))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), inv_sqrt_hd)
        att = T.softmax(T.masked_fill(scores, causal, -1e9), axis=-1)
        merged = T.reshape(T.transpose(T.matmul(att, v), (1, 0, 2)), (n, cfg.d_model))
        attn_out = _hooked_linear(
            merged, w[p + "attn.o"], None, p + "attn.o", adapter_set, train_mode, rng, gate_collector
        )
        h = T.add(h, attn_out)

        x2 = T.layer_norm(h, w[p + "ln2.gain"], w[p + "ln2.bias"])
        up = T.gelu(
            _hooked_linear(x2, w[p + "ffn.up.w"], w[p + "ffn.up.b"], p + "ffn.up", adapter_set, train_mode, rng, gate_collector)
        )
        down = _hooked_linear(
            up, w[p + "ffn.down.w"], w[p + "ffn.down.b"], p + "ffn.down", adapter_set, train_mode, rng, gate_collector
        )
        h = T.add(h, down)

    h = T.layer_norm(h, w["final_ln.gain"], w["final_ln.bias"])
    if cfg.tie_embeddings:
        return T.matmul(h, T.transpose(w["tok_emb"]))
    return T.matmul(h, w["head.w"])


def sequence_logprob(
    weights: TransformerWeights,
    prompt: Sequence[int],
    response: Sequence[int],
    adapter_set: Optional[Dict[str, A.MoEAdapterLayer]] = None,
    train_mode: bool = False,
    rng: Optional[RngContext] = None,
) -> T.Tensor:
    """Sum over response positions of log p(y_i | prompt, y_<i); a scalar tensor."""
    if len(response) == 0:
        raise ValueError("sequence_logprob: empty response")
    if len(prompt) == 0:
        raise ValueError("sequence_logprob: empty prompt")
    total = len(prompt) + len(response)
    if total > weights.config.max_seq_len:
        raise SequenceLengthError(f"prompt+response length {total} exceeds max_seq_len {weights.config.max_seq_len}")
    logits = forward(weights, list(prompt) + list(response), adapter_set, train_mode=train_mode, rng=rng)
    rows = T.narrow(logits, 0, len(prompt) - 1, len(response))
    return T.sum_all(T.picked_log_softmax(rows, list(response)))


def generate(
    weights: TransformerWeights,
    prompt: Sequence[int],
    max_new_tokens: int,
    strategy: str = "greedy",
    temperature: float = 1.0,
    top_k: Optional[int] = None,
    rng: Optional[RngContext] = None,
    adapter_set: Optional[Dict[str, A.MoEAdapterLayer]] = None,
) -> List[int]:
    """Autoregressive continuation; stops after EOS or the token budget.

    Returns only the newly generated ids (including the EOS when emitted).
    Greedy decoding is deterministic; sampling needs an RngContext.
    """
    if len(prompt) == 0:
        raise ValueError("generate: empty prompt")
    if strategy not in ("greedy", "sample"):
        raise ValueError(f"unknown decoding strategy {strategy!r}")
    if strategy == "sample" and rng is None:
        raise ValueError("sampling requires an RngContext")
    cfg = weights.config
    context = list(prompt)
    out: List[int] = []
    for _ in range(max_new_tokens):
        window = context[-cfg.max_seq_len :]
        logits = forward(weights, window, adapter_set).data[-1]
        if strategy == "greedy" or temperature <= 1e-8:
            next_id = int(np.argmax(logits))
        else:
            scaled = logits / temperature
            if top_k is not None and top_k < scaled.size:
                cutoff = np.sort(scaled)[-top_k]
                scaled = np.where(scaled < cutoff, -np.inf, scaled)
            scaled = scaled - scaled.max()
            probs = np.exp(scaled)
            probs /= probs.sum()
            next_id = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
            next_id = min(next_id, cfg.vocab_size - 1)
        out.append(next_id)
        context.append(next_id)
        if next_id == cfg.eos_id:
            break
    return out
