from __future__ import annotations

import json
import threading

import numpy as np
import pytest

from kforge.distrib import (
    AlreadyCompleted,
    CorruptRecord,
    DuplicateJobId,
    Job,
    JobQueue,
    QueueClient,
    QueueServer,
    RemoteEvalBackend,
    RunDatabase,
    load_run,
    process_job,
    worker_loop,
)
from kforge.evalpipe import BenchSchedule, MockEvalBackend, evaluate
from kforge.taskspec import Language, TaskSpec


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now

    def advance(self, dt):
        self.now += dt


def make_job(i=0, kind="compile", profile="default"):
    return Job(
        job_id=f"job-{i}",
        kind=kind,
        task_id="t",
        payload={"n": i},
        hardware_profile_id=profile,
    )


def make_task():
    return TaskSpec(
        task_id="t1",
        language=Language.SYCL,
        reference_code="// KF-MOCK: compile=ok time_ms=1.2 sync_ms=0.05 first_iter_mult=10\nvoid ref();",
    )


class TestJobQueue:
    def test_fifo_within_kind(self):
        q = JobQueue()
        for i in range(3):
            q.enqueue(make_job(i))
        assert q.claim("compile").job_id == "job-0"
        assert q.claim("compile").job_id == "job-1"

    def test_kind_and_profile_filtering(self):
        q = JobQueue()
        q.enqueue(make_job(0, kind="execute"))
        q.enqueue(make_job(1, kind="compile", profile="gpu9"))
        assert q.claim("compile") is None
        assert q.claim("compile", "gpu9").job_id == "job-1"
        assert q.claim("execute").job_id == "job-0"

    def test_duplicate_id_rejected(self):
        q = JobQueue()
        q.enqueue(make_job(0))
        with pytest.raises(DuplicateJobId):
            q.enqueue(make_job(0))

    def test_complete_round_trip(self):
        q = JobQueue()
        q.enqueue(make_job(0))
        job = q.claim("compile")
        q.complete(job.job_id, job.lease_token, {"out": 1})
        assert q.result("job-0") == {"state": "done", "result": {"out": 1}}

    def test_double_completion_rejected(self):
        q = JobQueue()
        q.enqueue(make_job(0))
        job = q.claim("compile")
        q.complete(job.job_id, job.lease_token, {})
        with pytest.raises(AlreadyCompleted):
            q.complete(job.job_id, job.lease_token, {})

    def test_lease_expiry_requeues(self):
        clock = FakeClock()
        q = JobQueue(clock=clock)
        q.enqueue(make_job(0))
        first = q.claim("compile", lease_s=10.0)
        assert q.claim("compile") is None  # leased out
        clock.advance(11.0)
        second = q.claim("compile", lease_s=10.0)
        assert second.job_id == first.job_id
        assert second.attempts == 1
        assert second.lease_token != first.lease_token

    def test_late_completion_discarded_first_wins(self):
        clock = FakeClock()
        q = JobQueue(clock=clock)
        q.enqueue(make_job(0))
        stale = q.claim("compile", lease_s=10.0)
        clock.advance(11.0)
        fresh = q.claim("compile", lease_s=10.0)
        q.complete(fresh.job_id, fresh.lease_token, {"winner": "fresh"})
        # stale worker finishes afterwards; its result is dropped silently
        with pytest.raises(AlreadyCompleted):
            q.complete(stale.job_id, stale.lease_token, {"winner": "stale"})
        assert q.result("job-0")["result"] == {"winner": "fresh"}

    def test_stale_completion_before_redelivery_discarded(self):
        clock = FakeClock()
        q = JobQueue(clock=clock)
        q.enqueue(make_job(0))
        stale = q.claim("compile", lease_s=10.0)
        clock.advance(11.0)
        q.complete(stale.job_id, stale.lease_token, {"winner": "stale"})
        assert "job-0" in q.discarded_completions
        assert q.result("job-0")["state"] == "queued"

    def test_retry_budget_exhausts_to_failed(self):
        clock = FakeClock()
        q = JobQueue(clock=clock, max_retries=2)
        q.enqueue(make_job(0))
        for _ in range(3):  # initial + 2 retries
            assert q.claim("compile", lease_s=1.0) is not None
            clock.advance(2.0)
        assert q.claim("compile") is None
        assert q.result("job-0")["state"] == "failed"

    def test_positive_lease_required(self):
        q = JobQueue()
        with pytest.raises(ValueError):
            q.claim("compile", lease_s=0.0)


class TestRunDatabase:
    def test_append_and_replay(self, tmp_path):
        db = RunDatabase(tmp_path / "run.jsonl")
        db.append_record("config", {"x": 1})
        db.append_record("candidate", {"candidate_id": "c", "generation": 1, "candidate": {}})
        records = db.records()
        assert [r["seq"] for r in records] == [0, 1]
        assert records[0]["kind"] == "config"

    def test_unknown_kind_rejected(self, tmp_path):
        db = RunDatabase(tmp_path / "run.jsonl")
        with pytest.raises(ValueError):
            db.append_record("mystery", {})

    def test_sequence_continues_after_reopen(self, tmp_path):
        path = tmp_path / "run.jsonl"
        RunDatabase(path).append_record("config", {"x": 1})
        db2 = RunDatabase(path)
        assert db2.append_record("config", {"x": 2}) == 1

    def test_corrupt_checksum_detected(self, tmp_path):
        path = tmp_path / "run.jsonl"
        db = RunDatabase(path)
        db.append_record("config", {"x": 1})
        record = json.loads(path.read_text())
        record["body"]["x"] = 99  # tamper without updating the checksum
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(CorruptRecord) as exc:
            RunDatabase(path).records()
        assert exc.value.sequence == 0

    def test_sequence_gap_detected(self, tmp_path):
        path = tmp_path / "run.jsonl"
        db = RunDatabase(path)
        db.append_record("config", {"x": 1})
        db.append_record("config", {"x": 2})
        lines = path.read_text().splitlines()
        path.write_text(lines[1] + "\n")
        with pytest.raises(CorruptRecord):
            RunDatabase(path).records()

    def test_unparsable_line(self, tmp_path):
        path = tmp_path / "run.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(CorruptRecord):
            RunDatabase(path).records()


class TestLoadRun:
    def _snapshot(self, db, generation, cells):
        if not cells:
            db.append_record(
                "archive_snapshot", {"generation": generation, "n_cells": 0, "cell": None}
            )
        for cell in cells:
            db.append_record(
                "archive_snapshot",
                {"generation": generation, "n_cells": len(cells), "cell": cell},
            )

    def test_resume_uses_last_complete_snapshot(self, tmp_path):
        db = RunDatabase(tmp_path / "run.jsonl")
        self._snapshot(db, 1, [{"candidate_id": "a"}])
        self._snapshot(db, 2, [{"candidate_id": "a"}, {"candidate_id": "b"}])
        # generation 3 snapshot is torn: claims 2 cells, only 1 written
        db.append_record(
            "archive_snapshot",
            {"generation": 3, "n_cells": 2, "cell": {"candidate_id": "a"}},
        )
        run = load_run(db)
        assert run.generation == 2
        assert len(run.archive_records) == 2

    def test_partial_generation_events_dropped(self, tmp_path):
        db = RunDatabase(tmp_path / "run.jsonl")
        self._snapshot(db, 1, [{"candidate_id": "a"}])
        db.append_record("transition", {"generation": 1, "record": {}})
        db.append_record("transition", {"generation": 2, "record": {}})
        run = load_run(db)
        assert run.generation == 1
        assert len(run.transitions) == 1

    def test_empty_db(self, tmp_path):
        run = load_run(RunDatabase(tmp_path / "run.jsonl"))
        assert run.generation == 0
        assert not run.has_snapshot
        assert run.archive_records == []

    def test_empty_archive_snapshot_counts_as_complete(self, tmp_path):
        db = RunDatabase(tmp_path / "run.jsonl")
        self._snapshot(db, 0, [])
        run = load_run(db)
        assert run.has_snapshot
        assert run.generation == 0


class TestProcessJob:
    def test_compile_and_execute_ops(self):
        backend = MockEvalBackend()
        task = make_task()
        src = "// KF-MOCK: compile=ok time_ms=1.0 sync_ms=0.05 first_iter_mult=10\nvoid k();"
        compile_res = process_job(
            backend,
            Job(job_id="c", kind="compile", task_id="t1", payload={"source": src, "task": task.to_dict()}),
        )
        assert compile_res["ok"]
        artifact = compile_res["artifact"]
        for op, extra in (
            ("reference_outputs", {}),
            ("candidate_outputs", {"artifact": artifact}),
            ("initial_trials", {"artifact": artifact, "n": 3}),
            (
                "execute",
                {
                    "artifact": artifact,
                    "schedule": BenchSchedule(10, 10, 1).to_dict(),
                },
            ),
            ("baseline_artifact", {}),
        ):
            payload = {"op": op, "task": task.to_dict(), "config": None}
            payload.update(extra)
            body = process_job(backend, Job(job_id=op, kind="execute", task_id="t1", payload=payload))
            assert body

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            process_job(
                MockEvalBackend(),
                Job(job_id="x", kind="execute", task_id="t", payload={"op": "nope", "task": make_task().to_dict()}),
            )


@pytest.fixture()
def live_queue():
    server = QueueServer(JobQueue())
    server.start()
    try:
        yield QueueClient(server.url)
    finally:
        server.stop()


class TestWireProtocol:
    def test_http_round_trip(self, live_queue):
        live_queue.enqueue(make_job(0))
        job = live_queue.claim("compile")
        assert job.job_id == "job-0"
        live_queue.complete(job.job_id, job.lease_token, {"ok": True})
        assert live_queue.result("job-0")["state"] == "done"

    def test_duplicate_over_wire(self, live_queue):
        live_queue.enqueue(make_job(0))
        with pytest.raises(DuplicateJobId):
            live_queue.enqueue(make_job(0))

    def test_claim_empty_returns_none(self, live_queue):
        assert live_queue.claim("compile") is None

    def test_remote_backend_matches_local(self, live_queue):
        task = make_task()
        src = "// KF-MOCK: compile=ok correct=1.0 time_ms=0.6 sync_ms=0.05 first_iter_mult=10\nvoid k();"
        local = MockEvalBackend()
        stop = threading.Event()

        def drain(kind):
            worker_loop(live_queue, kind, MockEvalBackend(), idle_exit_s=2.0)

        workers = [threading.Thread(target=drain, args=(k,)) for k in ("compile", "execute")]
        for w in workers:
            w.start()
        try:
            remote = RemoteEvalBackend(live_queue)
            res_remote = evaluate(remote, src, task)
            res_local = evaluate(local, src, task)
            assert res_remote.to_dict() == res_local.to_dict()
        finally:
            stop.set()
            for w in workers:
                w.join()

    def test_exactly_once_under_lease_faults(self):
        """Randomized claim/expiry/complete interleavings: one effect per job."""
        rng = np.random.default_rng(7)
        for _ in range(300):
            clock = FakeClock()
            q = JobQueue(clock=clock, max_retries=5)
            n_jobs = int(rng.integers(1, 5))
            for i in range(n_jobs):
                q.enqueue(make_job(i))
            outstanding = []
            completions: dict[str, int] = {}
            for _step in range(40):
                action = rng.integers(3)
                if action == 0:
                    job = q.claim("compile", lease_s=float(rng.uniform(0.5, 3.0)))
                    if job is not None:
                        outstanding.append(job)
                elif action == 1 and outstanding:
                    job = outstanding.pop(int(rng.integers(len(outstanding))))
                    try:
                        q.complete(job.job_id, job.lease_token, {"w": job.lease_token})
                    except AlreadyCompleted:
                        continue
                    status = q.result(job.job_id)
                    if (
                        status["state"] == "done"
                        and status["result"]["w"] == job.lease_token
                    ):
                        completions[job.job_id] = completions.get(job.job_id, 0) + 1
                else:
                    clock.advance(float(rng.uniform(0.0, 2.0)))
            for job_id, count in completions.items():
                assert count == 1
                assert q.result(job_id)["state"] == "done"
