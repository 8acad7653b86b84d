"""Job queue, run database, and the HTTP wire protocol.

The queue connects the orchestrator to compilation and execution workers:
FIFO within (kind, hardware profile), lease-based claims, exactly-once
completion (first completion wins; late completions after lease expiry are
discarded). The run database is an append-only, checksummed JSONL log of
candidates, evaluations, transitions, prompt versions, archive snapshots,
and config; replaying it reconstructs the evolutionary state for resume.
"""

from __future__ import annotations

import dataclasses
import json
import threading
import time
import zlib
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional

import requests

JOB_KINDS = ("compile", "execute")
RECORD_KINDS = (
    "candidate",
    "evaluation",
    "transition",
    "prompt_version",
    "archive_snapshot",
    "config",
)
SCHEMA_VERSION = 1
DEFAULT_LEASE_S = 300.0
DEFAULT_MAX_RETRIES = 2


class DuplicateJobId(ValueError):
    pass


class NotClaimed(RuntimeError):
    pass


class AlreadyCompleted(RuntimeError):
    pass


class CorruptRecord(RuntimeError):
    def __init__(self, sequence: int, reason: str):
        super().__init__(f"corrupt record at sequence {sequence}: {reason}")
        self.sequence = sequence


@dataclass
class Job:
    job_id: str
    kind: str
    task_id: str
    payload: dict
    hardware_profile_id: str = "default"
    attempts: int = 0
    state: str = "queued"  # queued | claimed | done | failed
    lease_token: Optional[str] = None
    lease_expiry: float = 0.0
    result: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "task_id": self.task_id,
            "payload": self.payload,
            "hardware_profile_id": self.hardware_profile_id,
            "attempts": self.attempts,
            "state": self.state,
            "lease_token": self.lease_token,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Job":
        return cls(
            job_id=d["job_id"],
            kind=d["kind"],
            task_id=d["task_id"],
            payload=d["payload"],
            hardware_profile_id=d.get("hardware_profile_id", "default"),
            attempts=d.get("attempts", 0),
            state=d.get("state", "queued"),
            lease_token=d.get("lease_token"),
        )


class JobQueue:
    """In-memory queue; the HTTP server exposes it over the wire protocol.

    `clock` is injectable so lease-expiry behavior is testable with
    simulated time.
    """

    def __init__(
        self,
        clock: Callable[[], float] = time.monotonic,
        max_retries: int = DEFAULT_MAX_RETRIES,
    ):
        self._clock = clock
        self.max_retries = max_retries
        self._lock = threading.Lock()
        self._jobs: dict[str, Job] = {}
        self._order: list[str] = []  # enqueue order; FIFO within (kind, profile)
        self._token_counter = 0
        self.discarded_completions: list[str] = []

    def enqueue(self, job: Job) -> None:
        with self._lock:
            if job.job_id in self._jobs:
                raise DuplicateJobId(job.job_id)
            job.state = "queued"
            self._jobs[job.job_id] = job
            self._order.append(job.job_id)

    def _expire_leases_locked(self) -> None:
        now = self._clock()
        for job in self._jobs.values():
            if job.state == "claimed" and now >= job.lease_expiry:
                job.attempts += 1
                job.lease_token = None
                if job.attempts > self.max_retries:
                    job.state = "failed"
                else:
                    job.state = "queued"

    def claim(
        self, worker_kind: str, hardware_profile: str = "default", lease_s: float = DEFAULT_LEASE_S
    ) -> Optional[Job]:
        if lease_s <= 0:
            raise ValueError("lease_s must be positive")
        with self._lock:
            self._expire_leases_locked()
            for job_id in self._order:
                job = self._jobs[job_id]
                if (
                    job.state == "queued"
                    and job.kind == worker_kind
                    and job.hardware_profile_id == hardware_profile
                ):
                    self._token_counter += 1
                    job.state = "claimed"
                    job.lease_token = f"lease-{self._token_counter}"
                    job.lease_expiry = self._clock() + lease_s
                    # Snapshot copy: a worker holding a stale lease must not
                    # observe later re-claims of the same job.
                    return dataclasses.replace(job)
            return None

    def complete(self, job_id: str, lease_token: str, result: dict) -> None:
        with self._lock:
            self._expire_leases_locked()
            job = self._jobs.get(job_id)
            if job is None:
                raise NotClaimed(f"unknown job {job_id}")
            if job.state == "done":
                raise AlreadyCompleted(job_id)
            if job.state != "claimed" or job.lease_token != lease_token:
                # Lease expired (and possibly re-claimed); first completion wins.
                self.discarded_completions.append(job_id)
                return
            job.state = "done"
            job.result = result

    def result(self, job_id: str) -> Optional[dict]:
        with self._lock:
            self._expire_leases_locked()
            job = self._jobs.get(job_id)
            if job is None:
                return None
            if job.state == "done":
                return {"state": "done", "result": job.result}
            return {"state": job.state}

    def stats(self) -> dict:
        with self._lock:
            counts: dict[str, int] = {}
            for job in self._jobs.values():
                counts[job.state] = counts.get(job.state, 0) + 1
            return counts


def _record_checksum(record: dict) -> int:
    payload = json.dumps(
        {k: v for k, v in record.items() if k != "checksum"}, sort_keys=True
    ).encode()
    return zlib.crc32(payload)


class RunDatabase:
    """Append-only JSONL store; every record is checksummed and sequenced."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._next_seq = self._scan_next_seq()

    def _scan_next_seq(self) -> int:
        if not self.path.exists():
            return 0
        last = -1
        with open(self.path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    last = json.loads(line)["seq"]
                except (json.JSONDecodeError, KeyError):
                    break
        return last + 1

    def append_record(self, kind: str, body: dict, timestamp: float = 0.0) -> int:
        if kind not in RECORD_KINDS:
            raise ValueError(f"unknown record kind {kind!r}")
        with self._lock:
            record = {
                "seq": self._next_seq,
                "kind": kind,
                "schema": SCHEMA_VERSION,
                "ts": timestamp,
                "body": body,
            }
            record["checksum"] = _record_checksum(record)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
                f.flush()
            self._next_seq += 1
            return record["seq"]

    def iter_records(self):
        """Yield records in sequence; stops with CorruptRecord on damage."""
        if not self.path.exists():
            return
        expected_seq = 0
        with open(self.path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise CorruptRecord(expected_seq, f"unparsable line: {e}")
                if record.get("seq") != expected_seq:
                    raise CorruptRecord(expected_seq, f"sequence gap (got {record.get('seq')})")
                if record.get("checksum") != _record_checksum(record):
                    raise CorruptRecord(expected_seq, "checksum mismatch")
                yield record
                expected_seq += 1

    def records(self) -> list[dict]:
        return list(self.iter_records())


@dataclass
class ReplayedRun:
    """State reconstructed from the run database by load_run."""

    config: Optional[dict] = None
    generation: int = 0  # last generation with a complete snapshot
    has_snapshot: bool = False
    archive_records: list[dict] = field(default_factory=list)
    transitions: list[dict] = field(default_factory=list)
    prompt_versions: list[dict] = field(default_factory=list)
    candidates: dict[str, dict] = field(default_factory=dict)
    evaluations: dict[str, dict] = field(default_factory=dict)


def load_run(db: RunDatabase) -> ReplayedRun:
    """Replay the record log; state is cut at the last complete archive
    snapshot so a mid-generation crash resumes from the prior boundary."""
    snapshots: dict[int, list[dict]] = {}
    snapshot_sizes: dict[int, int] = {}
    run = ReplayedRun()
    raw_transitions = []
    raw_prompt_versions = []
    for record in db.iter_records():
        kind, body = record["kind"], record["body"]
        if kind == "config":
            run.config = body
        elif kind == "archive_snapshot":
            gen = body["generation"]
            snapshot_sizes[gen] = body["n_cells"]
            if body.get("cell") is not None:
                snapshots.setdefault(gen, []).append(body["cell"])
            else:
                snapshots.setdefault(gen, [])
        elif kind == "transition":
            raw_transitions.append(body)
        elif kind == "prompt_version":
            raw_prompt_versions.append(body)
        elif kind == "candidate":
            run.candidates[body["candidate_id"]] = body
        elif kind == "evaluation":
            run.evaluations[body["candidate_id"]] = body

    complete = [
        g for g, size in snapshot_sizes.items() if len(snapshots.get(g, [])) == size
    ]
    if complete:
        run.has_snapshot = True
        run.generation = max(complete)
        run.archive_records = snapshots[run.generation]
    # Drop events from a partially executed generation; the deterministic
    # per-generation RNG re-produces them identically on resume.
    run.transitions = [
        t for t in raw_transitions if t.get("generation", 0) <= run.generation
    ]
    run.prompt_versions = [
        p for p in raw_prompt_versions if p.get("generation", 0) <= run.generation
    ]
    run.candidates = {
        k: v for k, v in run.candidates.items() if v.get("generation", 0) <= run.generation
    }
    run.evaluations = {
        k: v for k, v in run.evaluations.items() if k in run.candidates
    }
    return run


# ---------------------------------------------------------------------------
# HTTP wire protocol: JSON messages over POST endpoints.


class QueueServer:
    """Serves a JobQueue (and optionally a RunDatabase) over HTTP."""

    def __init__(self, queue: JobQueue, db: Optional[RunDatabase] = None, port: int = 0):
        self.queue = queue
        self.db = db
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, code: int, body: dict):
                data = json.dumps(body).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                try:
                    msg = json.loads(self.rfile.read(length) or b"{}")
                except json.JSONDecodeError:
                    self._reply(400, {"error": "malformed JSON"})
                    return
                try:
                    if self.path == "/enqueue":
                        outer.queue.enqueue(Job.from_dict(msg["job"]))
                        self._reply(200, {"ok": True})
                    elif self.path == "/claim":
                        job = outer.queue.claim(
                            msg["worker_kind"],
                            msg.get("hardware_profile", "default"),
                            msg.get("lease_s", DEFAULT_LEASE_S),
                        )
                        if job is None:
                            self._reply(200, {"job": None})
                        else:
                            d = job.to_dict()
                            d["lease_token"] = job.lease_token
                            self._reply(200, {"job": d})
                    elif self.path == "/complete":
                        outer.queue.complete(
                            msg["job_id"], msg["lease_token"], msg["result"]
                        )
                        self._reply(200, {"ok": True})
                    elif self.path == "/result":
                        self._reply(200, {"status": outer.queue.result(msg["job_id"])})
                    elif self.path == "/record":
                        if outer.db is None:
                            self._reply(400, {"error": "no database attached"})
                        else:
                            seq = outer.db.append_record(
                                msg["kind"], msg["body"], msg.get("ts", 0.0)
                            )
                            self._reply(200, {"seq": seq})
                    else:
                        self._reply(404, {"error": f"unknown endpoint {self.path}"})
                except DuplicateJobId as e:
                    self._reply(409, {"error": f"duplicate job id: {e}"})
                except AlreadyCompleted as e:
                    self._reply(409, {"error": f"already completed: {e}"})
                except (NotClaimed, KeyError, ValueError) as e:
                    self._reply(400, {"error": str(e)})

        self._server = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class QueueClient:
    """HTTP client speaking the queue wire protocol."""

    def __init__(self, url: str, timeout_s: float = 30.0):
        self.url = url.rstrip("/")
        self.timeout_s = timeout_s

    def _post(self, endpoint: str, msg: dict) -> dict:
        resp = requests.post(
            f"{self.url}{endpoint}", json=msg, timeout=self.timeout_s
        )
        body = resp.json()
        if resp.status_code == 409 and "duplicate" in body.get("error", ""):
            raise DuplicateJobId(body["error"])
        if resp.status_code == 409:
            raise AlreadyCompleted(body["error"])
        if resp.status_code != 200:
            raise RuntimeError(f"{endpoint}: {body.get('error', resp.status_code)}")
        return body

    def enqueue(self, job: Job) -> None:
        self._post("/enqueue", {"job": job.to_dict()})

    def claim(
        self, worker_kind: str, hardware_profile: str = "default", lease_s: float = DEFAULT_LEASE_S
    ) -> Optional[Job]:
        body = self._post(
            "/claim",
            {
                "worker_kind": worker_kind,
                "hardware_profile": hardware_profile,
                "lease_s": lease_s,
            },
        )
        if body["job"] is None:
            return None
        job = Job.from_dict(body["job"])
        job.lease_token = body["job"]["lease_token"]
        return job

    def complete(self, job_id: str, lease_token: str, result: dict) -> None:
        self._post("/complete", {"job_id": job_id, "lease_token": lease_token, "result": result})

    def result(self, job_id: str) -> Optional[dict]:
        return self._post("/result", {"job_id": job_id})["status"]

    def wait_for(self, job_id: str, poll_s: float = 0.01, timeout_s: float = 300.0) -> dict:
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            status = self.result(job_id)
            if status and status["state"] == "done":
                return status["result"]
            if status and status["state"] == "failed":
                raise RuntimeError(f"job {job_id} failed permanently")
            time.sleep(poll_s)
        raise TimeoutError(f"job {job_id} did not finish within {timeout_s}s")


# ---------------------------------------------------------------------------
# Remote evaluation: the orchestrator side maps EvalBackend calls onto
# compile/execute jobs; workers process them with a local backend.


def process_job(backend, job: Job) -> dict:
    """Execute one job against a local EvalBackend; returns the result body."""
    from .evalpipe import BenchSchedule
    from .taskspec import TaskSpec

    p = job.payload
    task = TaskSpec.from_dict(p["task"])
    config = tuple(p["config"]) if p.get("config") else None
    if job.kind == "compile":
        r = backend.compile(p["source"], task)
        return {"ok": r.ok, "artifact": r.artifact, "log": r.log}
    op = p["op"]
    if op == "config_compiles":
        ok, log = backend.config_compiles(p["artifact"], config)
        return {"ok": ok, "log": log}
    if op == "reference_outputs":
        return {"values": backend.reference_outputs(task).tolist()}
    if op == "candidate_outputs":
        return {"values": backend.candidate_outputs(p["artifact"], task, config).tolist()}
    if op == "initial_trials":
        return {"trials": backend.initial_trials(p["artifact"], task, p["n"], config)}
    if op == "execute":
        schedule = BenchSchedule(**p["schedule"])
        return {"chunks": backend.execute(p["artifact"], task, schedule, config)}
    if op == "baseline_artifact":
        return {"artifact": backend.baseline_artifact(task, p.get("candidate_artifact"))}
    raise ValueError(f"unknown execute op {op!r}")


class RemoteEvalBackend:
    """EvalBackend adapter that routes every call through the job queue."""

    deterministic = True

    def __init__(self, client: QueueClient, hardware_profile: str = "default"):
        self.client = client
        self.hardware_profile = hardware_profile
        self._counter = 0
        self._prefix = f"r{id(self) & 0xFFFF:x}"

    def _submit(self, kind: str, task_id: str, payload: dict) -> dict:
        self._counter += 1
        job = Job(
            job_id=f"{self._prefix}-{kind}-{self._counter}",
            kind=kind,
            task_id=task_id,
            payload=payload,
            hardware_profile_id=self.hardware_profile,
        )
        self.client.enqueue(job)
        return self.client.wait_for(job.job_id)

    def compile(self, source, task):
        from .evalpipe import CompileResult

        self._task_dict = task.to_dict()
        body = self._submit(
            "compile", task.task_id, {"source": source, "task": task.to_dict()}
        )
        return CompileResult(ok=body["ok"], artifact=body["artifact"], log=body["log"])

    def config_compiles(self, artifact, config):
        # Tied to an already-compiled artifact, so it runs on execute workers.
        body = self._submit(
            "execute",
            artifact.get("task_id", "unknown"),
            {
                "op": "config_compiles",
                "artifact": artifact,
                "task": self._task_dict,
                "config": list(config) if config else None,
            },
        )
        return body["ok"], body["log"]

    # The EvalBackend protocol passes the task everywhere except
    # config_compiles; stash the last-seen task dict for that call.
    _task_dict: dict = {}

    def _exec(self, task, payload: dict) -> dict:
        self._task_dict = task.to_dict()
        payload["task"] = self._task_dict
        return self._submit("execute", task.task_id, payload)

    def reference_outputs(self, task):
        import numpy as np

        body = self._exec(task, {"op": "reference_outputs"})
        return np.asarray(body["values"])

    def candidate_outputs(self, artifact, task, config=None):
        import numpy as np

        body = self._exec(
            task,
            {
                "op": "candidate_outputs",
                "artifact": artifact,
                "config": list(config) if config else None,
            },
        )
        return np.asarray(body["values"])

    def initial_trials(self, artifact, task, n=3, config=None):
        body = self._exec(
            task,
            {
                "op": "initial_trials",
                "artifact": artifact,
                "n": n,
                "config": list(config) if config else None,
            },
        )
        return body["trials"]

    def execute(self, artifact, task, schedule, config=None):
        body = self._exec(
            task,
            {
                "op": "execute",
                "artifact": artifact,
                "schedule": schedule.to_dict(),
                "config": list(config) if config else None,
            },
        )
        return body["chunks"]

    def baseline_artifact(self, task, candidate_artifact=None):
        body = self._exec(
            task,
            {"op": "baseline_artifact", "candidate_artifact": candidate_artifact},
        )
        return body["artifact"]


def worker_loop(
    client: QueueClient,
    kind: str,
    backend,
    hardware_profile: str = "default",
    poll_s: float = 0.01,
    idle_exit_s: Optional[float] = None,
    lease_s: float = DEFAULT_LEASE_S,
) -> int:
    """Claim-process-complete loop; returns the number of jobs processed.

    With `idle_exit_s` the loop exits after that long without work, which
    keeps test worker processes from outliving their queue.
    """
    processed = 0
    idle_since = time.monotonic()
    while True:
        try:
            job = client.claim(kind, hardware_profile, lease_s)
        except requests.RequestException:
            time.sleep(poll_s * 10)  # queue briefly unreachable; retry
            continue
        if job is None:
            if idle_exit_s is not None and time.monotonic() - idle_since > idle_exit_s:
                return processed
            time.sleep(poll_s)
            continue
        idle_since = time.monotonic()
        try:
            result = process_job(backend, job)
        except Exception as e:
            result = {"error": str(e)}
        try:
            client.complete(job.job_id, job.lease_token, result)
            processed += 1
        except AlreadyCompleted:
            pass  # a peer beat us after our lease expired
