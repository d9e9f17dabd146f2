"""Corpus-construction workflows over a pluggable text-generation backend.

Four workflows: two-phase role-play instruction building (inquirer questions,
then expert answers), few-shot dialogue regularization, two-task progressive
instruction reconstruction, and knowledge expansion of structured records into
pre-training text. Prompt bodies live as editable text assets under
``prompts/``; every dispatched call is logged with its template id, token
counts, and latency, and a dry-run mode renders prompts without dispatching.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import string
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .datapipe import CompletionDoc, InstructionRecord, save_jsonl
from .rng import RngContext

logger = logging.getLogger(__name__)

__all__ = [
    "BackendError",
    "TemplateError",
    "SamplingParams",
    "GenerationBackend",
    "EchoBackend",
    "ReplayBackend",
    "RemoteBackend",
    "CallRecord",
    "PromptTemplate",
    "load_template",
    "prompt_hash",
    "SeedExamplePool",
    "sample_shots",
    "build_roleplay_instructions",
    "regularize_dialogue",
    "reconstruct_instruction",
    "knowledge_expand",
    "expand_records",
    "write_manifest",
    "map_concurrent",
]

TEMPLATE_IDS = (
    "inquirer",
    "expert_pediatrician",
    "regularizer",
    "reconstruct_task1",
    "reconstruct_task2",
    "knowledge_expand",
    "judge_pairwise",
)

API_KEY_ENV = "PEDPIPE_API_KEY"


class BackendError(RuntimeError):
    """Generation backend failed after exhausting its retries."""


class TemplateError(ValueError):
    """Unknown template id or unfilled placeholder."""


@dataclass
class SamplingParams:
    temperature: float = 0.7
    max_tokens: int = 512


class GenerationBackend:
    """Interface: complete(prompt, params) -> text."""

    name = "abstract"

    def complete(self, prompt: str, params: Optional[SamplingParams] = None) -> str:
        raise NotImplementedError


class EchoBackend(GenerationBackend):
    """Returns the prompt verbatim; used to check pipeline wiring in tests."""

    name = "echo"

    def complete(self, prompt: str, params: Optional[SamplingParams] = None) -> str:
        return prompt


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class ReplayBackend(GenerationBackend):
    """Deterministic fixture lookup keyed by prompt hash.

    Fixture files are JSON Lines of {"prompt_hash", "completion"}. In record
    mode the backend delegates to another backend and remembers its answers.
    """

    name = "replay"

    def __init__(self, completions: Optional[Dict[str, str]] = None,
                 record_from: Optional[GenerationBackend] = None):
        self.completions = dict(completions or {})
        self.record_from = record_from

    @classmethod
    def from_file(cls, path) -> "ReplayBackend":
        completions = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                completions[obj["prompt_hash"]] = obj["completion"]
        return cls(completions)

    def save(self, path) -> None:
        save_jsonl(path, ({"prompt_hash": h, "completion": c} for h, c in sorted(self.completions.items())))

    def add(self, prompt: str, completion: str) -> None:
        self.completions[prompt_hash(prompt)] = completion

    def complete(self, prompt: str, params: Optional[SamplingParams] = None) -> str:
        key = prompt_hash(prompt)
        if key in self.completions:
            return self.completions[key]
        if self.record_from is not None:
            completion = self.record_from.complete(prompt, params)
            self.completions[key] = completion
            return completion
        raise BackendError(f"replay backend has no fixture for prompt hash {key[:12]}...")


class RemoteBackend(GenerationBackend):
    """HTTP backend with retries, exponential backoff, and a call-rate limit.

    The API key comes only from the PEDPIPE_API_KEY environment variable; it
    is never read from config files. The endpoint receives a JSON POST with
    keys model/prompt/temperature/max_tokens and must answer
    {"completion": <text>}.
    """

    name = "remote"

    def __init__(self, url: str, model: str, max_retries: int = 3, backoff_base: float = 0.5,
                 calls_per_second: float = 1.0, timeout: float = 30.0):
        self.url = url
        self.model = model
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.min_interval = 1.0 / calls_per_second if calls_per_second > 0 else 0.0
        self.timeout = timeout
        self._lock = threading.Lock()
        self._last_call = 0.0

    def _throttle(self) -> None:
        with self._lock:
            now = time.monotonic()
            wait = self._last_call + self.min_interval - now
            if wait > 0:
                time.sleep(wait)
            self._last_call = time.monotonic()

    def complete(self, prompt: str, params: Optional[SamplingParams] = None) -> str:
        import requests

        key = os.environ.get(API_KEY_ENV)
        if not key:
            raise BackendError(f"remote backend needs the {API_KEY_ENV} environment variable")
        params = params or SamplingParams()
        payload = {
            "model": self.model,
            "prompt": prompt,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        last_error: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                delay = self.backoff_base * (2 ** (attempt - 1))
                logger.info("remote backend retry %d after %.2fs", attempt, delay)
                time.sleep(delay)
            self._throttle()
            try:
                resp = requests.post(
                    self.url,
                    json=payload,
                    headers={"Authorization": f"Bearer {key}"},
                    timeout=self.timeout,
                )
                if resp.status_code >= 500:
                    last_error = BackendError(f"server error {resp.status_code}")
                    continue
                if resp.status_code != 200:
                    raise BackendError(f"remote backend HTTP {resp.status_code}: {resp.text[:200]}")
                return resp.json()["completion"]
            except BackendError:
                raise
            except Exception as exc:  # connection errors, bad JSON, timeouts
                last_error = exc
        raise BackendError(f"remote backend failed after {self.max_retries} retries: {last_error}")


# ---------------------------------------------------------------------------
# Prompt templates


@dataclass
class PromptTemplate:
    template_id: str
    body: str

    def placeholders(self) -> List[str]:
        return [name for _, name, _, _ in string.Formatter().parse(self.body) if name]

    def render(self, **fields) -> str:
        missing = [p for p in self.placeholders() if p not in fields]
        if missing:
            raise TemplateError(f"template {self.template_id!r}: unfilled placeholders {missing}")
        return self.body.format(**fields)


def load_template(template_id: str) -> PromptTemplate:
    if template_id not in TEMPLATE_IDS:
        raise TemplateError(f"unknown template id {template_id!r}")
    body = resources.files("pedpipe").joinpath(f"prompts/{template_id}.txt").read_text(encoding="utf-8")
    return PromptTemplate(template_id=template_id, body=body)


@dataclass
class CallRecord:
    """One logged backend call."""

    template_id: str
    prompt_tokens: int
    completion_tokens: int
    latency_s: float


def _dispatch(
    backend: GenerationBackend,
    template_id: str,
    prompt: str,
    params: Optional[SamplingParams],
    call_log: Optional[List[CallRecord]],
) -> str:
    start = time.monotonic()
    completion = backend.complete(prompt, params)
    latency = time.monotonic() - start
    record = CallRecord(
        template_id=template_id,
        prompt_tokens=len(prompt.encode("utf-8")),
        completion_tokens=len(completion.encode("utf-8")),
        latency_s=latency,
    )
    if call_log is not None:
        call_log.append(record)
    logger.info(
        "backend call template=%s prompt_tokens=%d completion_tokens=%d latency=%.3fs",
        record.template_id, record.prompt_tokens, record.completion_tokens, record.latency_s,
    )
    return completion


# ---------------------------------------------------------------------------
# Seed example pool


@dataclass
class SeedExamplePool:
    """Curated (raw dialogue, regularized dialogue) demonstrations, unique by raw text."""

    examples: List[Tuple[str, str]]

    def __post_init__(self):
        raws = [raw for raw, _ in self.examples]
        if len(set(raws)) != len(raws):
            raise ValueError("seed example pool: duplicate raw dialogues")

    def __len__(self) -> int:
        return len(self.examples)

    @classmethod
    def from_file(cls, path) -> "SeedExamplePool":
        examples = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                examples.append((obj["raw"], obj["regularized"]))
        return cls(examples)


N_SHOTS = 10


def sample_shots(pool: SeedExamplePool, seed: int, n_shots: int = N_SHOTS) -> List[int]:
    """Indices of n distinct pool entries; deterministic under the seed."""
    if len(pool) < n_shots:
        raise ValueError(f"seed pool has {len(pool)} examples, need at least {n_shots}")
    rng = RngContext(seed).fork("shots")
    return [int(i) for i in rng.choice(len(pool), size=n_shots, replace=False)]


# ---------------------------------------------------------------------------
# Workflows


def _parse_questions(text: str, limit: int) -> List[str]:
    questions = []
    for line in text.splitlines():
        line = line.strip().lstrip("0123456789.)- ").strip()
        if line:
            questions.append(line)
        if len(questions) >= limit:
            break
    return questions


def build_roleplay_instructions(
    segment: str,
    backend: GenerationBackend,
    n_questions: int,
    params: Optional[SamplingParams] = None,
    call_log: Optional[List[CallRecord]] = None,
    id_prefix: str = "roleplay",
    dry_run: bool = False,
) -> Tuple[List[InstructionRecord], List[dict]]:
    """Two-phase role play: one inquirer call for questions, one expert call per question.

    Returns (records, manifest); backend failures leave partial results with a
    failure entry per affected item. Dry-run renders the phase-1 prompt only.
    """
    if not segment:
        raise ValueError("build_roleplay_instructions: empty disease segment")
    manifest: List[dict] = []
    if n_questions == 0:
        return [], manifest
    inquirer = load_template("inquirer")
    expert = load_template("expert_pediatrician")
    inquirer_prompt = inquirer.render(segment=segment, n_questions=n_questions)
    if dry_run:
        manifest.append({"id": f"{id_prefix}-questions", "status": "dry-run", "detail": inquirer_prompt})
        return [], manifest
    try:
        raw_questions = _dispatch(backend, "inquirer", inquirer_prompt, params, call_log)
    except BackendError as exc:
        manifest.append({"id": f"{id_prefix}-questions", "status": "failed", "detail": str(exc)})
        return [], manifest
    questions = _parse_questions(raw_questions, n_questions)
    records: List[InstructionRecord] = []
    for i, question in enumerate(questions):
        rid = f"{id_prefix}-{i}"
        try:
            answer = _dispatch(
                backend, "expert_pediatrician",
                expert.render(segment=segment, question=question),
                params, call_log,
            )
        except BackendError as exc:
            manifest.append({"id": rid, "status": "failed", "detail": str(exc)})
            continue
        records.append(InstructionRecord(record_id=rid, task="MedKQ&A",
                                         turns=[("user", question), ("assistant", answer)]))
        manifest.append({"id": rid, "status": "ok", "detail": ""})
    return records, manifest


def regularize_dialogue(
    raw_dialogue: str,
    pool: SeedExamplePool,
    backend: GenerationBackend,
    seed: int,
    params: Optional[SamplingParams] = None,
    call_log: Optional[List[CallRecord]] = None,
) -> str:
    """Rewrite a raw dialogue using 10 seeded-random in-context demonstrations."""
    indices = sample_shots(pool, seed)
    shots = "\n\n".join(
        f"Raw conversation:\n{pool.examples[i][0]}\nRegularized version:\n{pool.examples[i][1]}"
        for i in indices
    )
    prompt = load_template("regularizer").render(shots=shots, dialogue=raw_dialogue)
    return _dispatch(backend, "regularizer", prompt, params, call_log)


def reconstruct_instruction(
    record: InstructionRecord,
    backend: GenerationBackend,
    params: Optional[SamplingParams] = None,
    call_log: Optional[List[CallRecord]] = None,
) -> Tuple[InstructionRecord, bool]:
    """Two sequential refinements: the instruction first, then the answer
    conditioned on the refined instruction.

    Returns (record, refined). A backend failure in either call returns the
    original record flagged unrefined; inputs are never mutated.
    """
    instruction, answer = _first_exchange(record)
    if not answer:
        raise ValueError(f"record {record.record_id!r}: empty answer, nothing to reconstruct")
    task1 = load_template("reconstruct_task1")
    task2 = load_template("reconstruct_task2")
    try:
        refined_instruction = _dispatch(
            backend, "reconstruct_task1", task1.render(instruction=instruction), params, call_log
        )
        refined_answer = _dispatch(
            backend, "reconstruct_task2",
            task2.render(instruction=refined_instruction, answer=answer),
            params, call_log,
        )
    except BackendError as exc:
        logger.warning("record %r left unrefined: %s", record.record_id, exc)
        return record, False
    turns = list(record.turns)
    user_idx, assistant_idx = _first_exchange_indices(record)
    turns[user_idx] = ("user", refined_instruction)
    turns[assistant_idx] = ("assistant", refined_answer)
    return InstructionRecord(record_id=record.record_id, task=record.task, turns=turns), True


def knowledge_expand(
    record: InstructionRecord,
    backend: GenerationBackend,
    params: Optional[SamplingParams] = None,
    call_log: Optional[List[CallRecord]] = None,
) -> CompletionDoc:
    """Expand one structured record into pre-training text tagged "expanded"."""
    instruction, answer = _first_exchange(record)
    prompt = load_template("knowledge_expand").render(instruction=instruction, answer=answer)
    text = _dispatch(backend, "knowledge_expand", prompt, params, call_log)
    return CompletionDoc(text=text, source="expanded")


def expand_records(
    records: Sequence[InstructionRecord],
    backend: GenerationBackend,
    params: Optional[SamplingParams] = None,
    call_log: Optional[List[CallRecord]] = None,
    max_in_flight: int = 4,
) -> Tuple[List[CompletionDoc], List[dict]]:
    """knowledge_expand over many records; failures are skipped with a manifest entry."""

    def one(record: InstructionRecord):
        return knowledge_expand(record, backend, params, call_log)

    results = map_concurrent(one, records, max_in_flight)
    docs: List[CompletionDoc] = []
    manifest: List[dict] = []
    for record, outcome in zip(records, results):
        if isinstance(outcome, BackendError):
            manifest.append({"id": record.record_id, "status": "skipped", "detail": str(outcome)})
        else:
            docs.append(outcome)
            manifest.append({"id": record.record_id, "status": "ok", "detail": ""})
    return docs, manifest


def map_concurrent(fn: Callable, items: Sequence, max_in_flight: int = 4) -> List:
    """Apply fn to independent items, at most max_in_flight at a time.

    Results come back in input order; a BackendError becomes the result for
    its item instead of propagating.
    """

    def guarded(item):
        try:
            return fn(item)
        except BackendError as exc:
            return exc

    if max_in_flight <= 1 or len(items) <= 1:
        return [guarded(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(guarded, items))


def write_manifest(path, entries: Iterable[dict]) -> None:
    save_jsonl(path, entries)


def _first_exchange(record: InstructionRecord) -> Tuple[str, str]:
    user_idx, assistant_idx = _first_exchange_indices(record)
    return record.turns[user_idx][1], record.turns[assistant_idx][1]


def _first_exchange_indices(record: InstructionRecord) -> Tuple[int, int]:
    user_idx = next((i for i, (role, _) in enumerate(record.turns) if role == "user"), None)
    assistant_idx = next((i for i, (role, _) in enumerate(record.turns) if role == "assistant"), None)
    if user_idx is None or assistant_idx is None:
        raise ValueError(f"record {record.record_id!r}: needs an instruction and an answer part")
    return user_idx, assistant_idx
