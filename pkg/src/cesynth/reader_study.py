"""Blinded reader-study backend: session construction for the three
assessment tasks, append-only idempotent response capture, CSV export with
accuracy aggregation, and tokenized image serving so filenames can never
leak real/synthetic identity.

Task 1 (discrimination): 15 single images, 10 synthetic and 5 real.
Task 2 (comparative): pre + two post images, pick the real one.
Task 3 (annotation): openly labeled triplets, rectangle remarks + 0-10
realism score.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import random
import secrets
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

TASKS = ("discrimination", "comparative", "annotation")
DISCRIMINATION_SYNTHETIC = 10
DISCRIMINATION_REAL = 5
DEFAULT_TRIPLET_COUNT = 10

CSV_COLUMNS = [
    "kind", "session_id", "reader_id", "task", "item_id", "item_index",
    "answer", "correct", "realism_score", "annotations", "ground_truth", "timestamp",
]


class ReaderStudyError(Exception):
    pass


class NotFound(ReaderStudyError):
    pass


@dataclass
class ImagePool:
    """Images for the study: pool_dir/{pre,real,synthetic}/*.png.

    Triplet tasks use stems present in all three subdirectories.
    """

    root: Path
    pre: dict[str, Path] = field(default_factory=dict)
    real: dict[str, Path] = field(default_factory=dict)
    synthetic: dict[str, Path] = field(default_factory=dict)

    @classmethod
    def scan(cls, root: Path) -> "ImagePool":
        root = Path(root)
        pool = cls(root=root)
        for group in ("pre", "real", "synthetic"):
            d = root / group
            if d.is_dir():
                getattr(pool, group).update({p.stem: p for p in sorted(d.glob("*.png"))})
        if not pool.real or not pool.synthetic:
            raise ReaderStudyError(f"pool at {root} needs real/ and synthetic/ PNG images")
        return pool

    def triplet_stems(self) -> list[str]:
        return sorted(set(self.pre) & set(self.real) & set(self.synthetic))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for group in ("pre", "real", "synthetic"):
            for stem in sorted(getattr(self, group)):
                h.update(f"{group}/{stem}".encode())
        return h.hexdigest()


@dataclass
class SessionItem:
    item_id: str
    image_tokens: dict[str, str]  # role -> opaque token
    truth: dict  # hidden from payloads until export
    index: int


@dataclass
class Response:
    item_id: str
    answer: Optional[str]
    realism_score: Optional[int]
    annotations: Optional[list]
    timestamp: float

    def key(self) -> tuple:
        return (self.item_id, self.answer, self.realism_score,
                json.dumps(self.annotations, sort_keys=True))


@dataclass
class ReaderSession:
    session_id: str
    reader_id: str
    task: str
    seed: int
    feedback: bool
    items: list[SessionItem]
    responses: dict[str, Response] = field(default_factory=dict)
    acks: dict[str, dict] = field(default_factory=dict)


def _rect_ok(rect: dict) -> bool:
    return isinstance(rect, dict) and all(
        isinstance(rect.get(k), (int, float)) for k in ("x", "y", "width", "height")
    )


class SessionStore:
    """In-memory session registry over one image pool; optionally mirrors
    every accepted response to an append-only JSONL log."""

    def __init__(self, pool: ImagePool, state_dir: Optional[Path] = None):
        self.pool = pool
        self.sessions: dict[str, ReaderSession] = {}
        self.tokens: dict[str, Path] = {}
        self.state_dir = Path(state_dir) if state_dir else None
        if self.state_dir:
            self.state_dir.mkdir(parents=True, exist_ok=True)

    # --- session construction ---------------------------------------

    def _token_for(self, rng: random.Random, path: Path) -> str:
        token = f"{rng.getrandbits(128):032x}"
        self.tokens[token] = path
        return token

    def create_session(
        self,
        reader_id: str,
        task: str,
        seed: Optional[int] = None,
        n_items: Optional[int] = None,
        feedback: bool = False,
    ) -> ReaderSession:
        if task not in TASKS:
            raise ReaderStudyError(f"unknown task {task!r}; expected one of {TASKS}")
        if seed is None:
            seed = secrets.randbits(32)
        # item order is a pure function of (pool content, seed)
        rng = random.Random(f"{self.pool.content_hash()}:{seed}")
        if task == "discrimination":
            if n_items is not None and n_items != DISCRIMINATION_SYNTHETIC + DISCRIMINATION_REAL:
                raise ReaderStudyError("discrimination sessions are fixed at 15 items (10 synthetic, 5 real)")
            items = self._discrimination_items(rng)
        elif task == "comparative":
            items = self._triplet_items(rng, n_items or DEFAULT_TRIPLET_COUNT, labeled=False)
        else:
            items = self._triplet_items(rng, n_items or DEFAULT_TRIPLET_COUNT, labeled=True)
        session = ReaderSession(
            session_id=uuid.uuid4().hex,
            reader_id=reader_id,
            task=task,
            seed=seed,
            feedback=feedback,
            items=items,
        )
        self.sessions[session.session_id] = session
        return session

    def _discrimination_items(self, rng: random.Random) -> list[SessionItem]:
        synth = sorted(self.pool.synthetic)
        real = sorted(self.pool.real)
        if len(synth) < DISCRIMINATION_SYNTHETIC or len(real) < DISCRIMINATION_REAL:
            raise ReaderStudyError(
                f"discrimination needs >= {DISCRIMINATION_SYNTHETIC} synthetic and "
                f">= {DISCRIMINATION_REAL} real images"
            )
        chosen = [("synthetic", s) for s in rng.sample(synth, DISCRIMINATION_SYNTHETIC)]
        chosen += [("real", s) for s in rng.sample(real, DISCRIMINATION_REAL)]
        rng.shuffle(chosen)
        items = []
        for k, (kind, stem) in enumerate(chosen):
            path = self.pool.synthetic[stem] if kind == "synthetic" else self.pool.real[stem]
            items.append(
                SessionItem(
                    item_id=f"item_{k:03d}",
                    image_tokens={"single": self._token_for(rng, path)},
                    truth={"kind": kind, "stem": stem},
                    index=k,
                )
            )
        return items

    def _triplet_items(self, rng: random.Random, count: int, labeled: bool) -> list[SessionItem]:
        stems = self.pool.triplet_stems()
        if not stems:
            raise ReaderStudyError("no aligned pre/real/synthetic triplets in pool")
        if count > len(stems):
            count = len(stems)
        picked = rng.sample(stems, count)
        items = []
        for k, stem in enumerate(picked):
            tokens = {"pre": self._token_for(rng, self.pool.pre[stem])}
            if labeled:
                tokens["real"] = self._token_for(rng, self.pool.real[stem])
                tokens["synthetic"] = self._token_for(rng, self.pool.synthetic[stem])
                truth = {"stem": stem}
            else:
                real_pos = rng.choice(["a", "b"])
                tokens["candidate_a"] = self._token_for(
                    rng, self.pool.real[stem] if real_pos == "a" else self.pool.synthetic[stem]
                )
                tokens["candidate_b"] = self._token_for(
                    rng, self.pool.synthetic[stem] if real_pos == "a" else self.pool.real[stem]
                )
                truth = {"real_position": real_pos, "stem": stem}
            items.append(SessionItem(item_id=f"item_{k:03d}", image_tokens=tokens, truth=truth, index=k))
        return items

    # --- serving ------------------------------------------------------

    def get_session(self, session_id: str) -> ReaderSession:
        session = self.sessions.get(session_id)
        if session is None:
            raise NotFound(f"unknown session {session_id!r}")
        return session

    def next_item(self, session_id: str) -> dict:
        """Payload for the first unanswered item; never includes ground truth."""
        session = self.get_session(session_id)
        for item in session.items:
            if item.item_id not in session.responses:
                return {
                    "done": False,
                    "item_id": item.item_id,
                    "index": item.index,
                    "total": len(session.items),
                    "task": session.task,
                    "images": [
                        {"role": role, "url": f"/images/{token}"}
                        for role, token in item.image_tokens.items()
                    ],
                }
        return {"done": True, "total": len(session.items)}

    def _validate_response(self, session: ReaderSession, item: SessionItem, payload: dict) -> None:
        answer = payload.get("answer")
        if session.task == "discrimination":
            if answer not in ("real", "synthetic"):
                raise ReaderStudyError("discrimination answer must be 'real' or 'synthetic'")
        elif session.task == "comparative":
            if answer not in ("a", "b"):
                raise ReaderStudyError("comparative answer must be 'a' or 'b'")
        else:
            score = payload.get("realism_score")
            if not isinstance(score, int) or not 0 <= score <= 10:
                raise ReaderStudyError("annotation responses need an integer realism_score in 0..10")
            for rect in payload.get("annotations") or []:
                if not _rect_ok(rect):
                    raise ReaderStudyError("annotations must be rectangles with x/y/width/height")

    def submit_response(self, session_id: str, payload: dict) -> dict:
        session = self.get_session(session_id)
        item_id = payload.get("item_id")
        item = next((i for i in session.items if i.item_id == item_id), None)
        if item is None:
            raise NotFound(f"unknown item {item_id!r} in session {session_id}")
        if item_id in session.acks:  # idempotent: replay the original ack
            return session.acks[item_id]
        self._validate_response(session, item, payload)
        response = Response(
            item_id=item_id,
            answer=payload.get("answer"),
            realism_score=payload.get("realism_score"),
            annotations=payload.get("annotations"),
            timestamp=time.time(),
        )
        session.responses[item_id] = response
        ack = {"session_id": session_id, "item_id": item_id, "recorded": True}
        if session.feedback and session.task == "discrimination":
            ack["correct"] = response.answer == item.truth["kind"]
        session.acks[item_id] = ack
        if self.state_dir:
            with open(self.state_dir / "responses.jsonl", "a") as fh:
                fh.write(json.dumps({"session_id": session_id, **response.__dict__}) + "\n")
        return ack

    # --- export -------------------------------------------------------

    def _correct(self, session: ReaderSession, item: SessionItem, response: Response) -> Optional[bool]:
        if session.task == "discrimination":
            return response.answer == item.truth["kind"]
        if session.task == "comparative":
            return response.answer == item.truth["real_position"]
        return None

    def export_csv(self, session_id: str) -> str:
        """One row per response with ground truth joined, plus a summary row
        carrying per-reader accuracy (tasks 1-2) or mean realism (task 3)."""
        session = self.get_session(session_id)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        n_correct = 0
        scores = []
        n_answered = 0
        for item in session.items:
            response = session.responses.get(item.item_id)
            if response is None:
                continue
            n_answered += 1
            correct = self._correct(session, item, response)
            if correct:
                n_correct += 1
            if response.realism_score is not None:
                scores.append(response.realism_score)
            writer.writerow(
                {
                    "kind": "response",
                    "session_id": session.session_id,
                    "reader_id": session.reader_id,
                    "task": session.task,
                    "item_id": item.item_id,
                    "item_index": item.index,
                    "answer": response.answer or "",
                    "correct": "" if correct is None else str(correct).lower(),
                    "realism_score": "" if response.realism_score is None else response.realism_score,
                    "annotations": json.dumps(response.annotations) if response.annotations else "",
                    "ground_truth": json.dumps(item.truth, sort_keys=True),
                    "timestamp": f"{response.timestamp:.3f}",
                }
            )
        summary = {
            "kind": "summary",
            "session_id": session.session_id,
            "reader_id": session.reader_id,
            "task": session.task,
            "item_id": "",
            "item_index": "",
            "answer": "",
            "correct": "",
            "realism_score": "",
            "annotations": "",
            "ground_truth": "",
            "timestamp": "",
        }
        if session.task in ("discrimination", "comparative"):
            summary["answer"] = f"{n_correct}/{n_answered}"
            summary["correct"] = f"{n_correct / n_answered:.4f}" if n_answered else ""
        else:
            summary["realism_score"] = f"{sum(scores) / len(scores):.2f}" if scores else ""
        writer.writerow(summary)
        return buf.getvalue()

    def image_path(self, token: str) -> Path:
        path = self.tokens.get(token)
        if path is None:
            raise NotFound(f"unknown image token {token!r}")
        return path


def parse_export_csv(text: str) -> list[dict]:
    """Read back the response rows of an exported CSV."""
    rows = list(csv.DictReader(io.StringIO(text)))
    return [r for r in rows if r["kind"] == "response"]


def create_app(pool_dir: Path, state_dir: Optional[Path] = None):
    """FastAPI application exposing the reader-study endpoints."""
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import FileResponse, PlainTextResponse

    store = SessionStore(ImagePool.scan(pool_dir), state_dir=state_dir)
    app = FastAPI(title="reader-study")
    app.state.store = store

    @app.post("/sessions", status_code=201)
    def create_session(payload: dict):
        try:
            session = store.create_session(
                reader_id=payload.get("reader_id", "anonymous"),
                task=payload.get("task", "discrimination"),
                seed=payload.get("seed"),
                n_items=payload.get("n_items"),
                feedback=bool(payload.get("feedback", False)),
            )
        except ReaderStudyError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"session_id": session.session_id, "task": session.task, "total_items": len(session.items)}

    @app.get("/sessions/{session_id}/next")
    def next_item(session_id: str):
        try:
            return store.next_item(session_id)
        except NotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.post("/sessions/{session_id}/responses")
    def submit_response(session_id: str, payload: dict):
        try:
            return store.submit_response(session_id, payload)
        except NotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ReaderStudyError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.get("/sessions/{session_id}/export.csv")
    def export(session_id: str):
        try:
            return PlainTextResponse(store.export_csv(session_id), media_type="text/csv")
        except NotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.get("/images/{token}")
    def image(token: str):
        try:
            return FileResponse(store.image_path(token), media_type="image/png")
        except NotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    return app
