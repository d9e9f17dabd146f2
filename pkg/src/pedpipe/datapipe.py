"""Byte-level tokenization, dataset records, corpus packing, and batching.

The tokenizer maps UTF-8 bytes to ids 0-255 and reserves PAD/BOS/EOS above
them, so any text (including CJK) round-trips losslessly. Dataset files are
JSON Lines; malformed lines are reported with their line number and either
abort (strict) or are skipped (lenient).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .model import BOS_ID, EOS_ID, PAD_ID
from .objectives import PreferenceRecord
from .rng import RngContext

logger = logging.getLogger(__name__)

__all__ = [
    "DataError",
    "TASK_TAGS",
    "ByteTokenizer",
    "InstructionRecord",
    "CompletionDoc",
    "render_completion",
    "render_sft_context",
    "build_sft_example",
    "pack_hybrid_corpus",
    "build_preference_batch",
    "PreferenceBatch",
    "split_and_dedup",
    "load_instruction_records",
    "load_preference_records",
    "load_plain_docs",
    "save_jsonl",
]

TASK_TAGS = ("MedKQ&A", "EviDiag", "TreRecom", "General", "Safety", "SelfCognition")

VOCAB_SIZE = 259

DEFAULT_COMPLETION_TEMPLATE = "{u}\n{a}"
SFT_USER_PREFIX = "User: "
SFT_ASSISTANT_PREFIX = "Assistant: "
SFT_TURN_SEPARATOR = "\n"


class DataError(ValueError):
    """Bad dataset content; carries file/line context in the message."""


class ByteTokenizer:
    """Raw UTF-8 bytes as token ids; specials PAD=256, BOS=257, EOS=258."""

    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID
    vocab_size = VOCAB_SIZE

    def encode(self, text: str) -> List[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        if any(i < 0 or i > 255 for i in ids):
            raise ValueError("decode: ids must be plain bytes (0-255), specials excluded")
        raw = bytes(ids)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            logger.warning("decode: invalid UTF-8, using replacement characters")
            return raw.decode("utf-8", errors="replace")


@dataclass
class InstructionRecord:
    """A dialogue: alternating user/assistant turns under one task tag."""

    record_id: str
    task: str
    turns: List[Tuple[str, str]]  # (role, text)

    def validate(self) -> None:
        if self.task not in TASK_TAGS:
            raise DataError(f"record {self.record_id!r}: unknown task tag {self.task!r}")
        if len(self.turns) < 2:
            raise DataError(f"record {self.record_id!r}: need at least one user+assistant exchange")
        for i, (role, text) in enumerate(self.turns):
            expected = "user" if i % 2 == 0 else "assistant"
            if role != expected:
                raise DataError(f"record {self.record_id!r}: turn {i} should be {expected!r}, got {role!r}")
            if not text:
                raise DataError(f"record {self.record_id!r}: empty text in turn {i}")

    def assistant_turn_indices(self) -> List[int]:
        return [i for i, (role, _) in enumerate(self.turns) if role == "assistant"]

    def full_text(self) -> str:
        return "\n".join(text for _, text in self.turns)


@dataclass
class CompletionDoc:
    """A plain-text training document for the pre-training stream."""

    text: str
    source: str = "plain"  # plain | converted-instruction | expanded

    def __post_init__(self):
        if not self.text:
            raise DataError("CompletionDoc: empty text")


def render_completion(record: InstructionRecord, template: str = DEFAULT_COMPLETION_TEMPLATE) -> str:
    """Flatten a dialogue into flowing text, one template application per exchange."""
    parts = []
    for i in range(0, len(record.turns) - 1, 2):
        parts.append(template.format(u=record.turns[i][1], a=record.turns[i + 1][1]))
    return "\n".join(parts)


def render_sft_context(record: InstructionRecord, turn_index: int) -> str:
    """Role-marked context through the user turn preceding ``turn_index``,
    ending with the assistant marker for the supervised turn."""
    if turn_index >= len(record.turns) or record.turns[turn_index][0] != "assistant":
        raise ValueError(f"record {record.record_id!r}: turn {turn_index} is not an assistant turn")
    pieces = []
    for role, text in record.turns[:turn_index]:
        prefix = SFT_USER_PREFIX if role == "user" else SFT_ASSISTANT_PREFIX
        pieces.append(prefix + text + SFT_TURN_SEPARATOR)
    pieces.append(SFT_ASSISTANT_PREFIX)
    return "".join(pieces)


def build_sft_example(
    record: InstructionRecord,
    turn_index: int,
    tokenizer: Optional[ByteTokenizer] = None,
    max_seq_len: Optional[int] = None,
) -> Tuple[List[int], List[int]]:
    """(x, y) ids for one assistant turn: x = BOS + rendered context, y = answer + EOS.

    Over-length examples lose tokens from the left of x (oldest context); the
    response is never truncated.
    """
    tok = tokenizer or ByteTokenizer()
    context = render_sft_context(record, turn_index)
    x = [tok.bos_id] + tok.encode(context)
    y = tok.encode(record.turns[turn_index][1]) + [tok.eos_id]
    if max_seq_len is not None and len(x) + len(y) > max_seq_len:
        budget = max_seq_len - len(y) - 1  # keep BOS
        if budget < 1:
            raise DataError(
                f"record {record.record_id!r}: response of {len(y)} tokens cannot fit max_seq_len {max_seq_len}"
            )
        logger.info(
            "record %r: truncating context from %d to %d tokens", record.record_id, len(x) - 1, budget
        )
        x = [tok.bos_id] + x[len(x) - budget :]
    return x, y


def pack_hybrid_corpus(
    instructions: Sequence[InstructionRecord],
    plain: Sequence[CompletionDoc],
    mix_ratio: float,
    template: str = DEFAULT_COMPLETION_TEMPLATE,
    seed: int = 0,
) -> List[CompletionDoc]:
    """Mix rendered instructions into the plain-text stream at ``mix_ratio``.

    Every instruction appears exactly once (when mix_ratio > 0); the number of
    plain docs is chosen so instructions make up about ``mix_ratio`` of the
    output. mix_ratio=0 yields a shuffle of the plain docs alone, mix_ratio=1
    rendered instructions alone. Deterministic under the seed.
    """
    if not 0.0 <= mix_ratio <= 1.0:
        raise ValueError(f"mix_ratio must be in [0, 1], got {mix_ratio}")
    if mix_ratio > 0 and not instructions:
        raise ValueError("pack_hybrid_corpus: no instruction records supplied")
    if mix_ratio < 1 and not plain:
        raise ValueError("pack_hybrid_corpus: no plain docs supplied")
    rng = RngContext(seed).fork("pack")
    if mix_ratio == 0.0:
        order = rng.permutation(len(plain))
        return [plain[i] for i in order]
    docs = [CompletionDoc(text=render_completion(r, template), source="converted-instruction")
            for r in instructions]
    if mix_ratio < 1.0:
        want_plain = int(round(len(docs) * (1.0 - mix_ratio) / mix_ratio))
        take = min(want_plain, len(plain))
        if take < want_plain:
            logger.info("pack_hybrid_corpus: only %d of %d requested plain docs available", take, want_plain)
        chosen = rng.choice(len(plain), size=take, replace=False) if take else []
        docs.extend(plain[i] for i in chosen)
    order = rng.permutation(len(docs))
    return [docs[i] for i in order]


@dataclass
class PreferenceBatch:
    """One shuffled batch of preference triples, padded to the per-batch max."""

    records: List[PreferenceRecord]
    prompt_ids: np.ndarray
    prompt_mask: np.ndarray
    chosen_ids: np.ndarray
    chosen_mask: np.ndarray
    rejected_ids: np.ndarray
    rejected_mask: np.ndarray


def _pad_block(seqs: List[List[int]]) -> Tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def build_preference_batch(
    records: Sequence[PreferenceRecord], batch_size: int, seed: int = 0
) -> List[PreferenceBatch]:
    """Shuffle valid records and slice them into padded batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    valid: List[PreferenceRecord] = []
    for rec in records:
        try:
            rec.validate()
        except ValueError as exc:
            logger.warning("build_preference_batch: rejected record: %s", exc)
            continue
        valid.append(rec)
    if not valid:
        raise DataError("build_preference_batch: no valid records")
    order = RngContext(seed).fork("pref-batch").permutation(len(valid))
    shuffled = [valid[i] for i in order]
    batches = []
    for lo in range(0, len(shuffled), batch_size):
        chunk = shuffled[lo : lo + batch_size]
        p_ids, p_mask = _pad_block([r.instruction for r in chunk])
        c_ids, c_mask = _pad_block([r.chosen for r in chunk])
        r_ids, r_mask = _pad_block([r.rejected for r in chunk])
        batches.append(
            PreferenceBatch(
                records=chunk,
                prompt_ids=p_ids, prompt_mask=p_mask,
                chosen_ids=c_ids, chosen_mask=c_mask,
                rejected_ids=r_ids, rejected_mask=r_mask,
            )
        )
    return batches


def split_and_dedup(records: Sequence, val_fraction: float, seed: int = 0, key=None):
    """Drop exact duplicates (keep first), shuffle, and split train/val."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    keyfn = key or _default_key
    seen = set()
    unique = []
    for rec in records:
        k = keyfn(rec)
        if k in seen:
            continue
        seen.add(k)
        unique.append(rec)
    order = RngContext(seed).fork("split").permutation(len(unique))
    shuffled = [unique[i] for i in order]
    n_val = int(round(val_fraction * len(shuffled)))
    if len(shuffled) > 1:
        n_val = min(max(n_val, 1), len(shuffled) - 1)
    else:
        n_val = 0
    return shuffled[n_val:], shuffled[:n_val]


def _default_key(rec) -> str:
    if isinstance(rec, InstructionRecord):
        return rec.full_text()
    if isinstance(rec, CompletionDoc):
        return rec.text
    if isinstance(rec, PreferenceRecord):
        return f"{rec.instruction}|{rec.chosen}|{rec.rejected}"
    return repr(rec)


# ---------------------------------------------------------------------------
# JSON Lines IO


def _iter_jsonl(path, strict: bool):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                msg = f"{path}:{lineno}: malformed JSON ({exc.msg})"
                if strict:
                    raise DataError(msg) from exc
                logger.warning("%s (skipped)", msg)


def load_instruction_records(path, strict: bool = True) -> List[InstructionRecord]:
    records = []
    for lineno, obj in _iter_jsonl(path, strict):
        try:
            turns = [(t["role"], t["text"]) for t in obj["turns"]]
            rec = InstructionRecord(record_id=str(obj["id"]), task=obj["task"], turns=turns)
            rec.validate()
        except (KeyError, TypeError, DataError) as exc:
            msg = f"{path}:{lineno}: bad instruction record ({exc})"
            if strict:
                raise DataError(msg) from exc
            logger.warning("%s (skipped)", msg)
            continue
        records.append(rec)
    return records


def load_preference_records(path, tokenizer: Optional[ByteTokenizer] = None, strict: bool = True) -> List[PreferenceRecord]:
    """Preference JSONL -> token-level records: the instruction is rendered as an
    SFT-style prompt, responses get a trailing EOS."""
    tok = tokenizer or ByteTokenizer()
    records = []
    for lineno, obj in _iter_jsonl(path, strict):
        try:
            prompt = [tok.bos_id] + tok.encode(
                SFT_USER_PREFIX + obj["instruction"] + SFT_TURN_SEPARATOR + SFT_ASSISTANT_PREFIX
            )
            rec = PreferenceRecord(
                instruction=prompt,
                chosen=tok.encode(obj["chosen"]) + [tok.eos_id],
                rejected=tok.encode(obj["rejected"]) + [tok.eos_id],
                record_id=str(obj["id"]),
                tag=obj.get("tag"),
            )
            rec.validate()
        except (KeyError, TypeError, ValueError) as exc:
            msg = f"{path}:{lineno}: bad preference record ({exc})"
            if strict:
                raise DataError(msg) from exc
            logger.warning("%s (skipped)", msg)
            continue
        records.append(rec)
    return records


def load_plain_docs(path, strict: bool = True) -> List[CompletionDoc]:
    docs = []
    for lineno, obj in _iter_jsonl(path, strict):
        try:
            docs.append(CompletionDoc(text=obj["text"], source=obj.get("source", "plain")))
        except (KeyError, TypeError, DataError) as exc:
            msg = f"{path}:{lineno}: bad document ({exc})"
            if strict:
                raise DataError(msg) from exc
            logger.warning("%s (skipped)", msg)
    return docs


def save_jsonl(path, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
