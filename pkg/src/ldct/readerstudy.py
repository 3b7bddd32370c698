"""Blind opinion-score protocol: randomized blinded sessions served over a
local TCP wire interface, durable score persistence, and the per-rater
aggregation table.

Blinding: each (patient, version) item is addressed by an opaque hex token;
responses carry only the token, progress counters, and PNG bytes. The map
from tokens back to (patient, version) lives in server-side session files
and is only consulted by the report.

Durability: scores are appended (and fsynced) to scores.log before the
submission is acknowledged; session cursors are reconstructed from the log
on load, so a crash between append and acknowledge loses nothing.
"""
from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import dataio
from .errors import StudyError
from .nnops import make_rng

VERSIONS = ("full", "quarter", "enhanced")

_RATER_RE = re.compile(r"^[A-Za-z0-9_-]{1,64}$")

ENHANCED_NAME_CANDIDATES = ("{pid}.f32", "{pid}_enhanced.f32", "{pid}_quarter.f32")


def find_enhanced(enhanced_dir: Path, pid: str) -> Path | None:
    """Locate a patient's enhanced image; the quarter-named fallback lets a
    dataset directory act as an identity 'enhancement' for smoke tests."""
    for pattern in ENHANCED_NAME_CANDIDATES:
        candidate = Path(enhanced_dir) / pattern.format(pid=pid)
        if candidate.exists():
            return candidate
    return None


@dataclass
class StudyItem:
    token: str
    patient_id: str
    version: str
    path: str


@dataclass
class StudySession:
    session_id: str
    rater_id: str
    seed: int
    items: list[StudyItem]
    cursor: int = 0
    scores: dict[str, int] = field(default_factory=dict)  # token -> score

    @property
    def done(self) -> bool:
        return self.cursor >= len(self.items)

    def progress(self) -> dict:
        return {"done": self.cursor, "total": len(self.items)}


@dataclass
class ScoreRecord:
    session_id: str
    token: str
    patient_id: str
    version: str
    score: int
    timestamp: float


# ---------------------------------------------------------------------------
# persistent store


class StudyStore:
    """Session files plus the append-only score log under one directory."""

    def __init__(self, root):
        self.root = Path(root)
        (self.root / "sessions").mkdir(parents=True, exist_ok=True)
        self.log_path = self.root / "scores.log"

    def session_path(self, session_id: str) -> Path:
        return self.root / "sessions" / f"{session_id}.json"

    def save_session(self, session: StudySession) -> None:
        doc = asdict(session)
        self.session_path(session.session_id).write_text(
            json.dumps(doc, indent=1), encoding="utf-8")

    def load_session(self, session_id: str) -> StudySession | None:
        path = self.session_path(session_id)
        if not path.exists():
            return None
        doc = json.loads(path.read_text(encoding="utf-8"))
        session = StudySession(
            session_id=doc["session_id"], rater_id=doc["rater_id"], seed=doc["seed"],
            items=[StudyItem(**i) for i in doc["items"]],
            cursor=doc["cursor"], scores={k: int(v) for k, v in doc["scores"].items()})
        self._replay_log(session)
        return session

    def _replay_log(self, session: StudySession) -> None:
        # the log is the source of truth: recover any score acknowledged
        # after the last session-file write
        for record in self.read_records():
            if record.session_id != session.session_id:
                continue
            if record.token not in session.scores:
                session.scores[record.token] = record.score
        scored = set(session.scores)
        cursor = 0
        while cursor < len(session.items) and session.items[cursor].token in scored:
            cursor += 1
        session.cursor = max(session.cursor, cursor)

    def append_record(self, record: ScoreRecord) -> None:
        line = json.dumps(asdict(record), sort_keys=True)
        with open(self.log_path, "a", encoding="utf-8") as f:
            f.write(line + "\n")
            f.flush()
            os.fsync(f.fileno())

    def read_records(self) -> list[ScoreRecord]:
        if not self.log_path.exists():
            return []
        records = []
        for line in self.log_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                records.append(ScoreRecord(**json.loads(line)))
        return records

    def session_ids(self) -> set[str]:
        return {p.stem for p in (self.root / "sessions").glob("*.json")}

    def sessions(self) -> list[StudySession]:
        return [s for sid in sorted(self.session_ids())
                if (s := self.load_session(sid)) is not None]


# ---------------------------------------------------------------------------
# protocol core


class StudyService:
    """Session lifecycle and scoring; one instance owns one store directory."""

    def __init__(self, manifest: dataio.PairManifest, enhanced_dir, store: StudyStore):
        self.manifest = manifest
        self.enhanced_dir = Path(enhanced_dir)
        self.store = store
        self._lock = threading.RLock()
        self._paths = self._collect_paths()

    def _collect_paths(self) -> dict[tuple[str, str], str]:
        paths: dict[tuple[str, str], str] = {}
        for entry in self.manifest.pairs:
            paths[(entry.id, "full")] = str(self.manifest.resolve(entry.full_path))
            paths[(entry.id, "quarter")] = str(self.manifest.resolve(entry.quarter_path))
            enhanced = find_enhanced(self.enhanced_dir, entry.id)
            if enhanced is None:
                raise StudyError(f"missing version file: ({entry.id}, enhanced)")
            paths[(entry.id, "enhanced")] = str(enhanced)
        return paths

    def create_session(self, rater_id: str, seed: int) -> StudySession:
        if not _RATER_RE.match(rater_id or ""):
            raise StudyError(f"invalid rater id {rater_id!r}")
        session_id = f"{rater_id}-{int(seed)}"
        with self._lock:
            existing = self.store.load_session(session_id)
            if existing is not None:
                return existing  # idempotent creation resumes the session
            keys = [(e.id, v) for e in self.manifest.pairs for v in VERSIONS]
            rng = make_rng(seed)
            order = rng.permutation(len(keys))
            items = []
            for idx in order:
                pid, version = keys[idx]
                token = rng.bytes(8).hex()  # opaque nonce, reveals nothing
                items.append(StudyItem(token=token, patient_id=pid, version=version,
                                       path=self._paths[(pid, version)]))
            session = StudySession(session_id=session_id, rater_id=rater_id,
                                   seed=int(seed), items=items)
            self.store.save_session(session)
            return session

    def get_session(self, session_id: str) -> StudySession:
        with self._lock:
            session = self.store.load_session(session_id)
            if session is None:
                raise StudyError(f"unknown session {session_id!r}")
            return session

    def next_item(self, session_id: str):
        """Returns (token, png_bytes, progress) or None when finished."""
        with self._lock:
            session = self.get_session(session_id)
            if session.done:
                return None
            item = session.items[session.cursor]
            img = dataio.load_image(item.path)
            if self.manifest.normalization is not None:
                unit = dataio.normalize(img, self.manifest.normalization)
            else:
                span = float(img.max() - img.min())
                unit = (img - img.min()) / span if span > 0 else np.zeros_like(img)
            return item.token, dataio.png_bytes_from_unit(unit), session.progress()

    def submit_score(self, session_id: str, token: str, score) -> dict:
        if not isinstance(score, int) or isinstance(score, bool) or not 1 <= score <= 10:
            raise StudyError(f"score must be an integer in 1..10, got {score!r}")
        with self._lock:
            session = self.get_session(session_id)
            if token in session.scores:
                if session.scores[token] == score:
                    return session.progress()  # idempotent resubmission
                raise StudyError(
                    f"token already scored {session.scores[token]}, refusing {score}")
            if session.done or session.items[session.cursor].token != token:
                raise StudyError("stale or unknown token")
            item = session.items[session.cursor]
            record = ScoreRecord(session_id=session_id, token=token,
                                 patient_id=item.patient_id, version=item.version,
                                 score=score, timestamp=time.time())
            self.store.append_record(record)  # durable before acknowledgment
            session.scores[token] = score
            session.cursor += 1
            self.store.save_session(session)
            return session.progress()

    def report(self) -> dict:
        with self._lock:
            sessions = self.store.sessions()
            return aggregate(self.store.read_records(), sessions)


# ---------------------------------------------------------------------------
# aggregation


def aggregate(records: list[ScoreRecord], sessions: list[StudySession]) -> dict:
    """Per-rater per-version means plus the per-patient score matrix.

    Partial record sets are flagged; records referencing unknown sessions
    are an error.
    """
    known = {s.session_id: s for s in sessions}
    for record in records:
        if record.session_id not in known:
            raise StudyError(f"record references unknown session {record.session_id!r}")

    rater_of = {sid: s.rater_id for sid, s in known.items()}
    patients: dict[str, dict[str, dict[str, int]]] = {}
    by_rater: dict[str, dict[str, list[int]]] = {}
    for record in records:
        rater = rater_of[record.session_id]
        patients.setdefault(record.patient_id, {}).setdefault(rater, {})[record.version] = record.score
        by_rater.setdefault(rater, {}).setdefault(record.version, []).append(record.score)

    raters = {}
    for rater in sorted(by_rater):
        raters[rater] = {}
        for version in VERSIONS:
            scores = sorted(by_rater[rater].get(version, []))  # canonical order
            raters[rater][version] = {
                "scores": scores,
                "mean": (sum(scores) / len(scores)) if scores else None,
            }

    patient_ids = sorted(patients)
    complete = bool(records) and all(
        version in patients.get(pid, {}).get(rater, {})
        for pid in patient_ids for rater in by_rater for version in VERSIONS)
    return {
        "raters": raters,
        "patients": {pid: patients[pid] for pid in patient_ids},
        "complete": complete,
        "n_records": len(records),
    }


def report_table(report: dict) -> str:
    """Plain-text rendering shaped like the per-patient score table."""
    raters = sorted(report["raters"])
    header = ["patient"] + [f"{v}/{r}" for v in VERSIONS for r in raters]
    lines = ["\t".join(header)]
    for pid, row in report["patients"].items():
        cells = [pid]
        for version in VERSIONS:
            for rater in raters:
                score = row.get(rater, {}).get(version)
                cells.append("-" if score is None else str(score))
        lines.append("\t".join(cells))
    lines.append("")
    for rater in raters:
        means = ", ".join(
            f"{v} {report['raters'][rater][v]['mean']:.2f}"
            if report["raters"][rater][v]["mean"] is not None else f"{v} -"
            for v in VERSIONS)
        lines.append(f"mean[{rater}]: {means}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# wire layer


class _StudyHandler(BaseHTTPRequestHandler):
    service: StudyService = None  # set by make_server
    ui_dir: Path | None = None

    _SESSION_NEXT = re.compile(r"^/sessions/([^/]+)/next$")
    _SESSION_SCORES = re.compile(r"^/sessions/([^/]+)/scores$")

    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def _send_json(self, doc: dict, status: int = 200) -> None:
        body = json.dumps(doc).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length", "0"))
        if length <= 0:
            return {}
        try:
            return json.loads(self.rfile.read(length).decode("utf-8"))
        except ValueError as exc:
            raise StudyError(f"malformed JSON body: {exc}") from exc

    def do_POST(self):
        try:
            if self.path == "/sessions":
                doc = self._read_json()
                session = self.service.create_session(
                    str(doc.get("rater_id", "")), int(doc.get("seed", 0)))
                self._send_json({"session_id": session.session_id,
                                 "progress": session.progress()})
                return
            match = self._SESSION_SCORES.match(self.path)
            if match:
                doc = self._read_json()
                progress = self.service.submit_score(
                    match.group(1), str(doc.get("token", "")), doc.get("score"))
                self._send_json({"accepted": True, "progress": progress})
                return
            self._send_json({"error": "not found"}, status=404)
        except StudyError as exc:
            self._send_json({"accepted": False, "error": str(exc)}, status=400)

    def do_GET(self):
        try:
            match = self._SESSION_NEXT.match(self.path)
            if match:
                result = self.service.next_item(match.group(1))
                if result is None:
                    self._send_json({"done": True})
                else:
                    token, png, progress = result
                    import base64
                    self._send_json({"token": token, "progress": progress,
                                     "image": base64.b64encode(png).decode("ascii")})
                return
            if self.path == "/report":
                self._send_json(self.service.report())
                return
            if self._serve_static():
                return
            self._send_json({"error": "not found"}, status=404)
        except StudyError as exc:
            self._send_json({"error": str(exc)}, status=400)

    def _serve_static(self) -> bool:
        if self.ui_dir is None:
            return False
        rel = "index.html" if self.path in ("/", "") else self.path.lstrip("/")
        target = (self.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())) or not target.is_file():
            return False
        types = {".html": "text/html", ".js": "text/javascript",
                 ".css": "text/css", ".png": "image/png", ".map": "application/json"}
        body = target.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", types.get(target.suffix, "application/octet-stream"))
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)
        return True


def make_server(service: StudyService, port: int = 0,
                ui_dir=None) -> ThreadingHTTPServer:
    """Bind the wire interface; port 0 picks a free port (server_address[1])."""
    handler = type("BoundStudyHandler", (_StudyHandler,), {
        "service": service,
        "ui_dir": Path(ui_dir) if ui_dir is not None else None,
    })
    return ThreadingHTTPServer(("127.0.0.1", port), handler)
