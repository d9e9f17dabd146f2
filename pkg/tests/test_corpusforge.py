"""Corpus workflows: backends, templates, and the four build procedures."""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from pedpipe.corpusforge import (
    BackendError,
    CallRecord,
    EchoBackend,
    RemoteBackend,
    ReplayBackend,
    SamplingParams,
    SeedExamplePool,
    TemplateError,
    build_roleplay_instructions,
    expand_records,
    knowledge_expand,
    load_template,
    prompt_hash,
    reconstruct_instruction,
    regularize_dialogue,
    sample_shots,
    write_manifest,
)
from pedpipe.datapipe import InstructionRecord

SEGMENT = "Bronchiolitis mostly affects infants under two; supportive care is the mainstay."


def make_record(rid="rec0"):
    return InstructionRecord(
        record_id=rid,
        task="MedKQ&A",
        turns=[("user", "What is croup?"), ("assistant", "A viral airway infection.")],
    )


def make_pool(n=12):
    # zero-padded ids keep every text prefix-free for substring-count checks
    return SeedExamplePool(examples=[(f"raw dialogue {i:02d}", f"regularized dialogue {i:02d}") for i in range(n)])


class TestTemplates:
    def test_unknown_id_rejected(self):
        with pytest.raises(TemplateError):
            load_template("nonexistent")

    def test_unfilled_placeholder_rejected(self):
        tpl = load_template("inquirer")
        with pytest.raises(TemplateError, match="n_questions"):
            tpl.render(segment="x")

    def test_render_fills_fields(self):
        tpl = load_template("expert_pediatrician")
        out = tpl.render(segment="SEG", question="QUES")
        assert "SEG" in out and "QUES" in out

    def test_all_shipped_templates_load(self):
        for tid in ("inquirer", "expert_pediatrician", "regularizer",
                    "reconstruct_task1", "reconstruct_task2", "knowledge_expand", "judge_pairwise"):
            assert load_template(tid).body


class TestReplayBackend:
    def test_round_trip_file(self, tmp_path):
        backend = ReplayBackend()
        backend.add("prompt one", "answer one")
        path = tmp_path / "fix.jsonl"
        backend.save(path)
        loaded = ReplayBackend.from_file(path)
        assert loaded.complete("prompt one") == "answer one"

    def test_missing_fixture_raises(self):
        with pytest.raises(BackendError):
            ReplayBackend().complete("never seen")

    def test_record_mode_captures(self):
        inner = EchoBackend()
        backend = ReplayBackend(record_from=inner)
        out = backend.complete("hello")
        assert out == "hello"
        assert backend.completions[prompt_hash("hello")] == "hello"


class _StubHandler(BaseHTTPRequestHandler):
    fail_remaining = 0

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if _StubHandler.fail_remaining > 0:
            _StubHandler.fail_remaining -= 1
            self.send_response(503)
            self.end_headers()
            return
        payload = json.dumps({"completion": f"echo:{body['prompt'][:20]}"}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/v1/complete"
    server.shutdown()


class TestRemoteBackend:
    def test_requires_api_key(self, monkeypatch):
        monkeypatch.delenv("PEDPIPE_API_KEY", raising=False)
        backend = RemoteBackend(url="http://127.0.0.1:1/x", model="m")
        with pytest.raises(BackendError, match="PEDPIPE_API_KEY"):
            backend.complete("hi")

    def test_completes_against_stub(self, stub_server, monkeypatch):
        monkeypatch.setenv("PEDPIPE_API_KEY", "test-key")
        _StubHandler.fail_remaining = 0
        backend = RemoteBackend(url=stub_server, model="m", calls_per_second=1000)
        assert backend.complete("ping") == "echo:ping"

    def test_retries_on_server_error(self, stub_server, monkeypatch):
        monkeypatch.setenv("PEDPIPE_API_KEY", "test-key")
        _StubHandler.fail_remaining = 2
        backend = RemoteBackend(url=stub_server, model="m", max_retries=3,
                                backoff_base=0.01, calls_per_second=1000)
        assert backend.complete("pong") == "echo:pong"

    def test_gives_up_after_retries(self, stub_server, monkeypatch):
        monkeypatch.setenv("PEDPIPE_API_KEY", "test-key")
        _StubHandler.fail_remaining = 99
        backend = RemoteBackend(url=stub_server, model="m", max_retries=1,
                                backoff_base=0.01, calls_per_second=1000)
        with pytest.raises(BackendError, match="retries"):
            backend.complete("pong")


class TestRoleplay:
    def fixture_backend(self, n=2):
        # Build the exact prompts the workflow will send and pre-answer them.
        from pedpipe.corpusforge import load_template

        inquirer = load_template("inquirer")
        expert = load_template("expert_pediatrician")
        questions = [f"Question {i} about bronchiolitis?" for i in range(n)]
        backend = ReplayBackend()
        backend.add(inquirer.render(segment=SEGMENT, n_questions=n), "\n".join(questions))
        for i, q in enumerate(questions):
            backend.add(expert.render(segment=SEGMENT, question=q), f"Answer {i}.")
        return backend, questions

    def test_echo_backend_wiring(self):
        records, manifest = build_roleplay_instructions(SEGMENT, EchoBackend(), n_questions=2)
        assert records, "echo backend should produce records"
        # the expert answer embeds the rendered expert prompt, so the segment text appears
        assert all(SEGMENT in r.turns[1][1] for r in records)

    def test_replay_fixture_pairing(self):
        backend, questions = self.fixture_backend(2)
        log = []
        records, manifest = build_roleplay_instructions(SEGMENT, backend, 2, call_log=log)
        assert len(records) == 2
        assert [r.turns[0][1] for r in records] == questions
        assert [r.turns[1][1] for r in records] == ["Answer 0.", "Answer 1."]
        assert all(r.task == "MedKQ&A" for r in records)
        assert len(log) == 1 + 2  # one inquirer call plus one expert call per question

    def test_zero_questions_no_calls(self):
        log = []
        records, manifest = build_roleplay_instructions(SEGMENT, ReplayBackend(), 0, call_log=log)
        assert records == [] and log == []

    def test_partial_failure_manifest(self):
        backend, questions = self.fixture_backend(2)
        # remove the second expert fixture to force a per-question failure
        from pedpipe.corpusforge import load_template

        expert = load_template("expert_pediatrician")
        del backend.completions[prompt_hash(expert.render(segment=SEGMENT, question=questions[1]))]
        records, manifest = build_roleplay_instructions(SEGMENT, backend, 2)
        assert len(records) == 1
        statuses = {e["id"]: e["status"] for e in manifest}
        assert statuses["roleplay-0"] == "ok" and statuses["roleplay-1"] == "failed"

    def test_empty_segment_rejected(self):
        with pytest.raises(ValueError):
            build_roleplay_instructions("", EchoBackend(), 1)

    def test_dry_run_renders_without_calls(self):
        log = []
        records, manifest = build_roleplay_instructions(SEGMENT, ReplayBackend(), 2,
                                                        call_log=log, dry_run=True)
        assert records == [] and log == []
        assert manifest[0]["status"] == "dry-run" and SEGMENT in manifest[0]["detail"]


class TestRegularize:
    def test_shot_sampling_distinct_and_deterministic(self):
        pool = make_pool(15)
        shots = sample_shots(pool, seed=4)
        assert len(shots) == 10 and len(set(shots)) == 10
        assert shots == sample_shots(pool, seed=4)
        assert shots != sample_shots(pool, seed=5)

    def test_pool_too_small(self):
        with pytest.raises(ValueError):
            sample_shots(make_pool(9), seed=0)

    def test_prompt_contains_each_shot_and_dialogue_once(self):
        pool = make_pool(12)
        captured = {}

        class Capture(EchoBackend):
            def complete(self, prompt, params=None):
                captured["prompt"] = prompt
                return "ok"

        regularize_dialogue("the raw conversation text", pool, Capture(), seed=7)
        prompt = captured["prompt"]
        indices = sample_shots(pool, seed=7)
        for i in indices:
            assert prompt.count(pool.examples[i][0]) == 1
            assert prompt.count(pool.examples[i][1]) == 1
        assert prompt.count("the raw conversation text") == 1

    def test_returns_backend_output(self):
        backend = ReplayBackend(record_from=EchoBackend())
        out = regularize_dialogue("raw", make_pool(), backend, seed=1)
        assert "raw" in out

    def test_duplicate_pool_rejected(self):
        with pytest.raises(ValueError):
            SeedExamplePool(examples=[("same", "a"), ("same", "b")])


class TestReconstruct:
    def test_task2_prompt_contains_task1_output(self):
        prompts = []

        class Capture(EchoBackend):
            def complete(self, prompt, params=None):
                prompts.append(prompt)
                return f"OUT<{len(prompts)}>"

        refined, ok = reconstruct_instruction(make_record(), Capture())
        assert ok
        assert "OUT<1>" in prompts[1]  # Task 2 sees Task 1's refinement
        assert refined.turns[0][1] == "OUT<1>"
        assert refined.turns[1][1] == "OUT<2>"

    def test_replay_fixture_round_trip(self):
        rec = make_record()
        from pedpipe.corpusforge import load_template

        t1 = load_template("reconstruct_task1")
        t2 = load_template("reconstruct_task2")
        backend = ReplayBackend()
        backend.add(t1.render(instruction=rec.turns[0][1]), "Refined instruction.")
        backend.add(t2.render(instruction="Refined instruction.", answer=rec.turns[1][1]), "Refined answer.")
        refined, ok = reconstruct_instruction(rec, backend)
        assert ok and refined.turns == [("user", "Refined instruction."), ("assistant", "Refined answer.")]
        assert rec.turns[0][1] == "What is croup?"  # input not mutated

    def test_failure_returns_original_flagged(self):
        rec = make_record()
        out, ok = reconstruct_instruction(rec, ReplayBackend())
        assert not ok and out is rec

    def test_empty_answer_rejected_before_calls(self):
        rec = InstructionRecord(record_id="e", task="MedKQ&A",
                                turns=[("user", "q"), ("assistant", "")])
        log = []
        with pytest.raises(ValueError):
            reconstruct_instruction(rec, EchoBackend(), call_log=log)
        assert log == []


class TestKnowledgeExpand:
    def test_echo_wraps_rendered_prompt(self):
        doc = knowledge_expand(make_record(), EchoBackend())
        assert doc.source == "expanded"
        assert "What is croup?" in doc.text

    def test_fixture_round_trip(self):
        rec = make_record()
        from pedpipe.corpusforge import load_template

        tpl = load_template("knowledge_expand")
        backend = ReplayBackend()
        backend.add(tpl.render(instruction=rec.turns[0][1], answer=rec.turns[1][1]), "Expanded passage.")
        doc = knowledge_expand(rec, backend)
        assert doc.text == "Expanded passage." and doc.source == "expanded"

    def test_batch_skips_failures_with_manifest(self):
        records = [make_record("a"), make_record("b")]
        backend = ReplayBackend(record_from=EchoBackend())
        docs, manifest = expand_records([records[0]], backend)
        assert len(docs) == 1
        # second record has no fixture in a bare replay backend
        docs2, manifest2 = expand_records(records, ReplayBackend())
        assert docs2 == []
        assert all(e["status"] == "skipped" for e in manifest2)

    def test_call_counts(self):
        log = []
        knowledge_expand(make_record(), EchoBackend(), call_log=log)
        assert len(log) == 1
        log = []
        reconstruct_instruction(make_record(), EchoBackend(), call_log=log)
        assert len(log) == 2
        log = []
        regularize_dialogue("raw", make_pool(), EchoBackend(), seed=0, call_log=log)
        assert len(log) == 1

    def test_manifest_written_as_jsonl(self, tmp_path):
        entries = [{"id": "a", "status": "ok", "detail": ""}]
        path = tmp_path / "m.jsonl"
        write_manifest(path, entries)
        assert json.loads(path.read_text().strip()) == entries[0]
