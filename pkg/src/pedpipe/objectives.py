"""Training objectives: next-token pre-training loss, prompt-masked SFT loss,
Bradley-Terry preference probability, and the preference-plus-regularizer
objective used for alignment.

Sequence log-probabilities are sums over response tokens, never
length-normalized, and the reference policy contributes constants only (its
tensors carry no gradient slots).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

from . import tensor as T
from .model import TransformerWeights, sequence_logprob, forward

__all__ = [
    "PreferenceRecord",
    "DfpoConfig",
    "DfpoLossParts",
    "cpt_loss",
    "sft_loss",
    "phi_regularizer",
    "bt_probability",
    "dfpo_loss",
]


@dataclass
class PreferenceRecord:
    """One (instruction, preferred response, low response) token triple."""

    instruction: List[int]
    chosen: List[int]
    rejected: List[int]
    record_id: str = ""
    tag: Optional[str] = None

    def validate(self) -> None:
        if not self.instruction:
            raise ValueError(f"preference record {self.record_id!r}: empty instruction")
        if not self.chosen or not self.rejected:
            raise ValueError(f"preference record {self.record_id!r}: empty response")
        if self.chosen == self.rejected:
            raise ValueError(f"preference record {self.record_id!r}: chosen == rejected")


@dataclass
class DfpoConfig:
    beta: float = 0.1
    mu: float = 1.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")


def cpt_loss(weights: TransformerWeights, sequences: Sequence[Sequence[int]], **fwd_kwargs) -> T.Tensor:
    """Mean next-token NLL over every predictable position in the batch."""
    if not sequences:
        raise ValueError("cpt_loss: empty batch")
    total: Optional[T.Tensor] = None
    count = 0
    for seq in sequences:
        if len(seq) < 2:
            raise ValueError(f"cpt_loss: sequence of length {len(seq)} has no predictable position")
        logits = forward(weights, seq, **fwd_kwargs)
        rows = T.narrow(logits, 0, 0, len(seq) - 1)
        picked = T.picked_log_softmax(rows, list(seq[1:]))
        seq_nll = T.neg(T.sum_all(picked))
        total = seq_nll if total is None else T.add(total, seq_nll)
        count += len(seq) - 1
    return T.scale(total, 1.0 / count)


def sft_loss(weights: TransformerWeights, prompt: Sequence[int], response: Sequence[int], **fwd_kwargs) -> T.Tensor:
    """Negative sum of response-token log-probs; prompt positions contribute nothing."""
    return T.neg(sequence_logprob(weights, prompt, response, **fwd_kwargs))


def phi_regularizer(weights: TransformerWeights, prompt: Sequence[int], response: Sequence[int], **fwd_kwargs) -> T.Tensor:
    """Preferred-response NLL regularizer; by construction identical to sft_loss."""
    return sft_loss(weights, prompt, response, **fwd_kwargs)


def bt_probability(reward_w: float, reward_l: float) -> float:
    """Probability the higher-reward side wins under the Bradley-Terry model."""
    d = float(reward_w) - float(reward_l)
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


@dataclass
class DfpoLossParts:
    """Total objective plus the logged components of one preference pair."""

    total: T.Tensor
    preference: T.Tensor  # -log sigma(beta * delta of log-ratios)
    phi: T.Tensor  # NLL of the preferred response under the policy
    margin: float  # beta * (log-ratio_w - log-ratio_l)
    policy_margin: float  # log pi_theta(y_w|x) - log pi_theta(y_l|x)


def dfpo_loss(
    policy: TransformerWeights,
    reference: TransformerWeights,
    record: PreferenceRecord,
    cfg: DfpoConfig,
    policy_adapters=None,
    train_mode: bool = False,
    rng=None,
) -> DfpoLossParts:
    """Preference term -log sigma(beta * [log-ratio_w - log-ratio_l]) plus mu * phi.

    The reference policy must be frozen; its log-probs enter as constants.
    """
    if policy.config.vocab_size != reference.config.vocab_size:
        raise ValueError(
            f"policy vocab {policy.config.vocab_size} != reference vocab {reference.config.vocab_size}"
        )
    record.validate()
    x, yw, yl = record.instruction, record.chosen, record.rejected
    fwd = dict(adapter_set=policy_adapters, train_mode=train_mode, rng=rng)
    lp_w = sequence_logprob(policy, x, yw, **fwd)
    lp_l = sequence_logprob(policy, x, yl, **fwd)
    ref_w = sequence_logprob(reference, x, yw)
    ref_l = sequence_logprob(reference, x, yl)

    delta = T.sub(T.sub(lp_w, ref_w), T.sub(lp_l, ref_l))
    preference = T.neg(T.log_sigmoid(T.scale(delta, cfg.beta)))
    phi = T.neg(lp_w)
    total = T.add(preference, T.scale(phi, cfg.mu)) if cfg.mu != 0.0 else preference
    return DfpoLossParts(
        total=total,
        preference=preference,
        phi=phi,
        margin=cfg.beta * float(delta.data),
        policy_margin=float(lp_w.data) - float(lp_l.data),
    )
