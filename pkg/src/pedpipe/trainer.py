"""Four-stage training pipeline: pre-training, full-parameter SFT, preference
optimization, and adapter-only SFT.

Every stage is deterministic under its seed, writes an append-only JSON Lines
training log, checkpoints through the PGPT format, and aborts (keeping the
last good weights) when a loss or gradient goes non-finite. Stage order is
gated through the pipeline state: preference optimization needs the SFT
checkpoint, adapter training needs the preference checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import adapters as A
from . import checkpoint as C
from . import tensor as T
from .datapipe import (
    ByteTokenizer,
    CompletionDoc,
    InstructionRecord,
    build_sft_example,
    split_and_dedup,
)
from .model import ModelConfig, TransformerWeights, init_weights
from .objectives import DfpoConfig, PreferenceRecord, cpt_loss, dfpo_loss, sft_loss
from .rng import RngContext

logger = logging.getLogger(__name__)

__all__ = [
    "StageConfig",
    "PipelineConfig",
    "PipelineState",
    "StageGatingError",
    "TrainingAborted",
    "FreezeViolationError",
    "TrainLogger",
    "lr_at_step",
    "paper_profile",
    "desk_profile",
    "run_cpt",
    "run_fsft",
    "run_dfpo",
    "run_psft",
    "run_pipeline",
    "checkpoint_save",
    "checkpoint_load",
    "mean_token_sft_loss",
    "preference_accuracy",
]

STAGES = ("cpt", "fsft", "dfpo", "psft")


class StageGatingError(RuntimeError):
    """A stage was requested before its prerequisite checkpoint exists."""


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; carries the last-good checkpoint path."""

    def __init__(self, message: str, checkpoint_path: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class FreezeViolationError(RuntimeError):
    """A gradient reached frozen base weights during adapter training."""


@dataclass
class StageConfig:
    """Hyperparameters for one stage; stage-specific blocks stay None elsewhere."""

    stage: str
    epochs: int
    learning_rate: float
    batch_size: int
    max_seq_len: int
    warmup_steps: int = 0
    eval_interval: int = 100
    seed: int = 42
    val_fraction: float = 0.1  # 0 disables the split: validate on the training set
    max_steps: Optional[int] = None  # exact step count, cycling epochs, when set
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    dfpo: Optional[DfpoConfig] = None
    adapter: Optional[A.AdapterSpec] = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "dfpo" and self.dfpo is None:
            self.dfpo = DfpoConfig()
        if self.stage == "psft" and self.adapter is None:
            self.adapter = A.AdapterSpec()

    @classmethod
    def defaults(cls, stage: str) -> "StageConfig":
        """Recorded full-scale defaults per stage."""
        table = {
            "cpt": cls(stage="cpt", epochs=1, learning_rate=1e-6, batch_size=128, max_seq_len=4096),
            "fsft": cls(stage="fsft", epochs=3, learning_rate=5e-5, batch_size=64, max_seq_len=2048,
                        warmup_steps=200, eval_interval=100),
            "dfpo": cls(stage="dfpo", epochs=5, learning_rate=1e-6, batch_size=64, max_seq_len=2048,
                        eval_interval=100, dfpo=DfpoConfig(beta=0.1, mu=1.0)),
            "psft": cls(stage="psft", epochs=3, learning_rate=1e-6, batch_size=32, max_seq_len=2048,
                        adapter=A.AdapterSpec(n_specific=3, rank=8, alpha=16.0, dropout=0.05)),
        }
        if stage not in table:
            raise ValueError(f"unknown stage {stage!r}")
        return table[stage]


@dataclass
class PipelineConfig:
    model: ModelConfig
    stages: Dict[str, StageConfig]
    seed: int = 42
    profile: str = "desk"

    def with_seed(self, seed: int) -> "PipelineConfig":
        stages = {name: replace(cfg, seed=seed) for name, cfg in self.stages.items()}
        return PipelineConfig(model=self.model, stages=stages, seed=seed, profile=self.profile)


def paper_profile() -> PipelineConfig:
    """Full-scale recorded hyperparameters on the small reference architecture."""
    return PipelineConfig(
        model=ModelConfig(),
        stages={stage: StageConfig.defaults(stage) for stage in STAGES},
        profile="paper",
    )


def desk_profile() -> PipelineConfig:
    """CPU-friendly preset: tiny model, short contexts, scaled-down batches,
    learning rates raised to make toy-corpus runs move."""
    model = ModelConfig(vocab_size=259, d_model=32, n_layers=2, n_heads=2, d_ff=64, max_seq_len=256)
    stages = {
        "cpt": StageConfig(stage="cpt", epochs=1, learning_rate=1e-3, batch_size=8, max_seq_len=256),
        "fsft": StageConfig(stage="fsft", epochs=3, learning_rate=1e-3, batch_size=4, max_seq_len=192,
                            warmup_steps=20, eval_interval=100),
        "dfpo": StageConfig(stage="dfpo", epochs=5, learning_rate=5e-4, batch_size=4, max_seq_len=192,
                            eval_interval=100, dfpo=DfpoConfig(beta=0.1, mu=1.0)),
        "psft": StageConfig(stage="psft", epochs=3, learning_rate=1e-2, batch_size=4, max_seq_len=192,
                            eval_interval=100,
                            adapter=A.AdapterSpec(n_specific=3, rank=8, alpha=16.0, dropout=0.05)),
    }
    return PipelineConfig(model=model, stages=stages, profile="desk")


@dataclass
class PipelineState:
    """What has run so far; persisted as JSON next to the checkpoints."""

    seed: int
    completed: List[str] = field(default_factory=list)
    checkpoints: Dict[str, str] = field(default_factory=dict)
    best_val: Dict[str, float] = field(default_factory=dict)

    def require(self, stage: str) -> Path:
        if stage not in self.checkpoints:
            raise StageGatingError(
                f"stage requires the {stage!r} checkpoint; run `train --stage {stage}` first"
            )
        return Path(self.checkpoints[stage])

    def save(self, out_dir: Path) -> None:
        path = Path(out_dir) / "pipeline_state.json"
        path.write_text(json.dumps(asdict(self), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, out_dir: Path) -> "PipelineState":
        path = Path(out_dir) / "pipeline_state.json"
        if not path.exists():
            return cls(seed=42)
        obj = json.loads(path.read_text(encoding="utf-8"))
        return cls(seed=obj["seed"], completed=obj["completed"],
                   checkpoints=obj["checkpoints"], best_val=obj["best_val"])


class TrainLogger:
    """Append-only JSON Lines training log."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        self.entries: List[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **entry) -> None:
        entry.setdefault("timestamp", time.time())
        self.entries.append(entry)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")


def lr_at_step(config: StageConfig, step: int) -> float:
    """Linear warmup from zero over warmup_steps, constant afterwards."""
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.learning_rate * step / config.warmup_steps
    return config.learning_rate


def _fingerprint(tensors: Dict[str, T.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name].data).tobytes())
    return h.hexdigest()


def _batches(n_items: int, config: StageConfig, rng: RngContext):
    """Yield index batches: epochs of shuffled data, or exactly max_steps batches."""
    step = 0
    epoch = 0
    while True:
        order = rng.fork(f"epoch{epoch}").permutation(n_items)
        for lo in range(0, n_items, config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                return
            yield [int(i) for i in order[lo : lo + config.batch_size]]
            step += 1
        epoch += 1
        if config.max_steps is None and epoch >= config.epochs:
            return
        if config.max_steps is not None and step >= config.max_steps:
            return


def _train_loop(
    stage: str,
    config: StageConfig,
    params: Dict[str, T.Tensor],
    zero_grads: Callable[[], None],
    n_items: int,
    loss_fn: Callable[[List[int], int], Tuple[T.Tensor, dict]],
    out_dir: Path,
    log: TrainLogger,
    save_snapshot: Callable[[Path], None],
    eval_fn: Optional[Callable[[], float]] = None,
    audit_fn: Optional[Callable[[], None]] = None,
    restore_best: Optional[Callable[[], None]] = None,
    track_best: Optional[Callable[[], None]] = None,
) -> None:
    """Shared optimizer loop; mutates params in place, leaves the best weights loaded."""
    state = T.AdamWState()
    rng = RngContext(config.seed).fork(f"{stage}-data")
    best_val = np.inf
    step = 0
    last_good: Dict[str, np.ndarray] = {}

    def abort(reason: str) -> TrainingAborted:
        if last_good:  # roll back to the last weights that produced a finite loss
            for name, p in params.items():
                p.data[...] = last_good[name]
        path = out_dir / f"{stage}.lastgood.pgpt"
        save_snapshot(path)
        log.write(event="abort", stage=stage, step=step, reason=reason)
        return TrainingAborted(f"{stage} aborted at step {step}: {reason}", checkpoint_path=path)

    def evaluate() -> None:
        nonlocal best_val
        if eval_fn is None:
            return
        val = eval_fn()
        log.write(event="eval", stage=stage, step=step, val_loss=val)
        if audit_fn is not None:
            audit_fn()
        if val < best_val:
            best_val = val
            if track_best is not None:
                track_best()

    for batch in _batches(n_items, config, rng):
        lr = lr_at_step(config, step)
        zero_grads()
        loss_t, components = loss_fn(batch, step)
        loss = float(loss_t.data)
        if not np.isfinite(loss):
            raise abort(f"non-finite loss {loss}")
        for name, p in params.items():
            last_good[name] = p.data.copy()
        T.backward(loss_t)
        try:
            T.adamw_step(params, state, lr=lr, betas=config.adam_betas,
                         eps=config.adam_eps, weight_decay=config.weight_decay)
        except T.NonFiniteGradientError as exc:
            raise abort(str(exc))
        log.write(event="step", stage=stage, step=step, loss=loss, lr=lr, components=components)
        step += 1
        if eval_fn is not None and config.eval_interval > 0 and step % config.eval_interval == 0:
            evaluate()

    if eval_fn is not None and (config.eval_interval <= 0 or step % config.eval_interval != 0):
        evaluate()
    if restore_best is not None and np.isfinite(best_val):
        restore_best()
        log.write(event="best", stage=stage, val_loss=best_val)


def _log_stage_config(log: TrainLogger, stage: str, config: StageConfig) -> None:
    log.write(
        event="config", stage=stage, epochs=config.epochs, learning_rate=config.learning_rate,
        batch_size=config.batch_size, max_seq_len=config.max_seq_len,
        warmup_steps=config.warmup_steps, eval_interval=config.eval_interval, seed=config.seed,
        adam_betas=list(config.adam_betas), adam_eps=config.adam_eps,
        weight_decay=config.weight_decay, max_steps=config.max_steps,
    )


# ---------------------------------------------------------------------------
# Stage: continuous pre-training


def _tokenize_docs(corpus: Sequence[CompletionDoc], max_seq_len: int) -> List[List[int]]:
    tok = ByteTokenizer()
    seqs = []
    for doc in corpus:
        ids = [tok.bos_id] + tok.encode(doc.text) + [tok.eos_id]
        seqs.append(ids[:max_seq_len])
    return seqs


def run_cpt(
    config: StageConfig,
    corpus: Sequence[CompletionDoc],
    model_config: ModelConfig,
    out_dir,
    log: Optional[TrainLogger] = None,
) -> Path:
    """Train a fresh model on the packed corpus; saves the final checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = log or TrainLogger(out_dir / "train_log.jsonl")
    _log_stage_config(log, "cpt", config)
    if not corpus:
        raise ValueError("run_cpt: empty corpus")
    weights = init_weights(model_config, RngContext(config.seed))
    seqs = _tokenize_docs(corpus, min(config.max_seq_len, model_config.max_seq_len))

    def loss_fn(batch: List[int], step: int):
        loss = cpt_loss(weights, [seqs[i] for i in batch])
        return loss, {}

    _train_loop(
        stage="cpt", config=config, params=weights.parameters(), zero_grads=weights.zero_grads,
        n_items=len(seqs), loss_fn=loss_fn, out_dir=out_dir, log=log,
        save_snapshot=lambda p: C.save_model(p, weights),
    )
    path = out_dir / "cpt.pgpt"
    C.save_model(path, weights)
    log.write(event="checkpoint", stage="cpt", path=str(path))
    return path


# ---------------------------------------------------------------------------
# Stage: full-parameter SFT


def _sft_examples(records: Sequence[InstructionRecord], max_seq_len: int) -> List[Tuple[List[int], List[int]]]:
    tok = ByteTokenizer()
    examples = []
    for rec in records:
        for turn_idx in rec.assistant_turn_indices():
            examples.append(build_sft_example(rec, turn_idx, tok, max_seq_len=max_seq_len))
    return examples


def _split_records(records: Sequence, config: StageConfig):
    if config.val_fraction <= 0.0:
        return list(records), list(records)
    return split_and_dedup(records, config.val_fraction, seed=config.seed)


def mean_token_sft_loss(weights: TransformerWeights, examples, adapter_set=None) -> float:
    """Total response NLL divided by total response tokens."""
    total, tokens = 0.0, 0
    for x, y in examples:
        total += float(sft_loss(weights, x, y, adapter_set=adapter_set).data)
        tokens += len(y)
    return total / max(tokens, 1)


def run_fsft(
    config: StageConfig,
    records: Sequence[InstructionRecord],
    init_checkpoint,
    out_dir,
    log: Optional[TrainLogger] = None,
) -> Path:
    """Full-parameter SFT with linear warmup and best-on-validation selection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = log or TrainLogger(out_dir / "train_log.jsonl")
    _log_stage_config(log, "fsft", config)
    weights = C.load_model(init_checkpoint, requires_grad=True)
    seq_cap = min(config.max_seq_len, weights.config.max_seq_len)
    train_records, val_records = _split_records(records, config)
    train_examples = _sft_examples(train_records, seq_cap)
    val_examples = _sft_examples(val_records, seq_cap)
    if not train_examples or not val_examples:
        raise ValueError("run_fsft: no usable examples")

    best: Dict[str, np.ndarray] = {}

    def loss_fn(batch: List[int], step: int):
        total: Optional[T.Tensor] = None
        for i in batch:
            x, y = train_examples[i]
            li = sft_loss(weights, x, y)
            total = li if total is None else T.add(total, li)
        return T.scale(total, 1.0 / len(batch)), {}

    _train_loop(
        stage="fsft", config=config, params=weights.parameters(), zero_grads=weights.zero_grads,
        n_items=len(train_examples), loss_fn=loss_fn, out_dir=out_dir, log=log,
        save_snapshot=lambda p: C.save_model(p, weights),
        eval_fn=lambda: mean_token_sft_loss(weights, val_examples),
        track_best=lambda: best.update({k: t.data.copy() for k, t in weights.tensors.items()}),
        restore_best=lambda: [t.data.__setitem__(..., best[k]) for k, t in weights.tensors.items()],
    )
    path = out_dir / "fsft.pgpt"
    C.save_model(path, weights)
    log.write(event="checkpoint", stage="fsft", path=str(path))
    return path


# ---------------------------------------------------------------------------
# Stage: preference optimization


def preference_accuracy(weights: TransformerWeights, records: Sequence[PreferenceRecord], adapter_set=None) -> float:
    """Fraction of pairs whose preferred response outscores the low one under the policy."""
    if not records:
        return 0.0
    wins = 0
    for rec in records:
        from .model import sequence_logprob

        lp_w = float(sequence_logprob(weights, rec.instruction, rec.chosen, adapter_set=adapter_set).data)
        lp_l = float(sequence_logprob(weights, rec.instruction, rec.rejected, adapter_set=adapter_set).data)
        wins += lp_w > lp_l
    return wins / len(records)


def run_dfpo(
    config: StageConfig,
    records: Sequence[PreferenceRecord],
    init_checkpoint,
    out_dir,
    log: Optional[TrainLogger] = None,
) -> Path:
    """Preference optimization against a frozen reference copy of the init weights."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = log or TrainLogger(out_dir / "train_log.jsonl")
    _log_stage_config(log, "dfpo", config)
    dcfg = config.dfpo or DfpoConfig()
    policy = C.load_model(init_checkpoint, requires_grad=True)
    reference = policy.copy(requires_grad=False)
    log.write(event="reference_fingerprint", stage="dfpo", when="start",
              sha256=_fingerprint(reference.tensors))
    for rec in records:
        rec.validate()
    train_records, val_records = _split_records(records, config)
    if not train_records or not val_records:
        raise ValueError("run_dfpo: no usable records")

    step0_acc = preference_accuracy(policy, train_records)
    log.write(event="preference_accuracy", stage="dfpo", step=0, accuracy=step0_acc)
    best: Dict[str, np.ndarray] = {}

    def loss_fn(batch: List[int], step: int):
        total: Optional[T.Tensor] = None
        margins, pref_sum, phi_sum, correct = [], 0.0, 0.0, 0
        for i in batch:
            parts = dfpo_loss(policy, reference, train_records[i], dcfg)
            total = parts.total if total is None else T.add(total, parts.total)
            margins.append(parts.margin)
            pref_sum += float(parts.preference.data)
            phi_sum += float(parts.phi.data)
            correct += parts.policy_margin > 0
        n = len(batch)
        components = {
            "preference": pref_sum / n,
            "phi": phi_sum / n,
            "margin": float(np.mean(margins)),
            "accuracy": correct / n,
        }
        return T.scale(total, 1.0 / n), components

    def val_loss() -> float:
        total = 0.0
        for rec in val_records:
            total += float(dfpo_loss(policy, reference, rec, dcfg).total.data)
        return total / len(val_records)

    _train_loop(
        stage="dfpo", config=config, params=policy.parameters(), zero_grads=policy.zero_grads,
        n_items=len(train_records), loss_fn=loss_fn, out_dir=out_dir, log=log,
        save_snapshot=lambda p: C.save_model(p, policy),
        eval_fn=val_loss,
        track_best=lambda: best.update({k: t.data.copy() for k, t in policy.tensors.items()}),
        restore_best=lambda: [t.data.__setitem__(..., best[k]) for k, t in policy.tensors.items()],
    )
    final_acc = preference_accuracy(policy, train_records)
    log.write(event="preference_accuracy", stage="dfpo", step=-1, accuracy=final_acc)
    log.write(event="reference_fingerprint", stage="dfpo", when="end",
              sha256=_fingerprint(reference.tensors))
    path = out_dir / "dfpo.pgpt"
    C.save_model(path, policy)
    log.write(event="checkpoint", stage="dfpo", path=str(path))
    return path


# ---------------------------------------------------------------------------
# Stage: parameter-efficient SFT (adapters only)


def run_psft(
    config: StageConfig,
    records: Sequence[InstructionRecord],
    init_checkpoint,
    out_dir,
    log: Optional[TrainLogger] = None,
) -> Path:
    """Adapter-only SFT over a frozen base; saves a separate adapter checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = log or TrainLogger(out_dir / "train_log.jsonl")
    _log_stage_config(log, "psft", config)
    spec = config.adapter or A.AdapterSpec()
    base = C.load_model(init_checkpoint, requires_grad=False)
    rng = RngContext(config.seed).fork("psft")
    adapter_set = A.build_adapter_set(base.config.adapter_sites(spec.placement), spec, rng.fork("init"))
    params: Dict[str, T.Tensor] = {}
    for layer in adapter_set.values():
        params.update(A.trainable_parameters(layer))
    n_adapter_params = sum(p.size for p in params.values())
    fraction = n_adapter_params / (n_adapter_params + base.parameter_count())
    log.write(event="trainable_parameters", stage="psft", adapter=n_adapter_params,
              base=base.parameter_count(), fraction=round(fraction, 4))

    seq_cap = min(config.max_seq_len, base.config.max_seq_len)
    train_records, val_records = _split_records(records, config)
    train_examples = _sft_examples(train_records, seq_cap)
    val_examples = _sft_examples(val_records, seq_cap)
    if not train_examples or not val_examples:
        raise ValueError("run_psft: no usable examples")

    def zero_grads():
        base.zero_grads()
        for p in params.values():
            p.grad = None

    def audit():
        dirty = [name for name, t in base.tensors.items() if t.grad is not None]
        if dirty:
            raise FreezeViolationError(f"gradient reached frozen base weights: {dirty[:3]}")

    best: Dict[str, np.ndarray] = {}

    def loss_fn(batch: List[int], step: int):
        step_rng = rng.fork(f"step{step}")
        total: Optional[T.Tensor] = None
        for i in batch:
            x, y = train_examples[i]
            li = sft_loss(weights=base, prompt=x, response=y, adapter_set=adapter_set,
                          train_mode=True, rng=step_rng)
            total = li if total is None else T.add(total, li)
        return T.scale(total, 1.0 / len(batch)), {}

    def save_adapters_snapshot(path: Path) -> None:
        C.save_adapters(path, adapter_set, spec)

    _train_loop(
        stage="psft", config=config, params=params, zero_grads=zero_grads,
        n_items=len(train_examples), loss_fn=loss_fn, out_dir=out_dir, log=log,
        save_snapshot=save_adapters_snapshot,
        eval_fn=lambda: mean_token_sft_loss(base, val_examples, adapter_set=adapter_set),
        audit_fn=audit,
        track_best=lambda: best.update({k: p.data.copy() for k, p in params.items()}),
        restore_best=lambda: [p.data.__setitem__(..., best[k]) for k, p in params.items()],
    )
    audit()
    path = out_dir / "psft-adapters.pgpt"
    C.save_adapters(path, adapter_set, spec)
    log.write(event="checkpoint", stage="psft", path=str(path))
    return path


# ---------------------------------------------------------------------------
# Whole pipeline


@dataclass
class PipelineData:
    cpt_corpus: Sequence[CompletionDoc]
    sft_records: Sequence[InstructionRecord]
    preference_records: Sequence[PreferenceRecord]
    psft_records: Sequence[InstructionRecord]


def run_pipeline(config: PipelineConfig, data: PipelineData, out_dir) -> PipelineState:
    """cpt -> fsft -> dfpo -> psft with stage gating and state persistence."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = PipelineState(seed=config.seed)
    log = TrainLogger(out_dir / "train_log.jsonl")

    cpt_path = run_cpt(config.stages["cpt"], data.cpt_corpus, config.model, out_dir, log)
    state.completed.append("cpt")
    state.checkpoints["cpt"] = str(cpt_path)
    state.save(out_dir)

    fsft_path = run_fsft(config.stages["fsft"], data.sft_records, state.require("cpt"), out_dir, log)
    state.completed.append("fsft")
    state.checkpoints["fsft"] = str(fsft_path)
    state.save(out_dir)

    dfpo_path = run_dfpo(config.stages["dfpo"], data.preference_records, state.require("fsft"), out_dir, log)
    state.completed.append("dfpo")
    state.checkpoints["dfpo"] = str(dfpo_path)
    state.save(out_dir)

    psft_path = run_psft(config.stages["psft"], data.psft_records, state.require("dfpo"), out_dir, log)
    state.completed.append("psft")
    state.checkpoints["psft"] = str(psft_path)
    for entry in log.entries:
        if entry.get("event") == "eval":
            stage = entry["stage"]
            state.best_val[stage] = min(state.best_val.get(stage, np.inf), entry["val_loss"])
    state.save(out_dir)
    return state


def checkpoint_save(path, weights: TransformerWeights) -> None:
    C.save_model(path, weights)


def checkpoint_load(path, requires_grad: bool = False) -> TransformerWeights:
    return C.load_model(path, requires_grad=requires_grad)
