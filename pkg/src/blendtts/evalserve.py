"""HTTP service hosting listening tests: panel dispensing, rating collection.

The store is a single SQLite file in WAL mode.  All writes go through one
connection guarded by a lock, which is what makes the rater quota hold
under concurrent sessions: dispensing and submission both re-check the
quota inside that critical section.  Reads open short-lived read-only
connections, so they never block behind a writer.

Clients only ever see opaque stimulus ids; system identities stay on the
server until export.  The export endpoint emits exactly the scores CSV
that the analysis tooling consumes.

HTTP surface (JSON unless noted):

    POST /tests                                   create a test
    GET  /tests/{test_id}                         summary and progress
    GET  /tests/{test_id}/export                  scores CSV (text/csv)
    POST /sessions                                open a rater session
    GET  /sessions/{sid}/next                     next panel or done-marker
    POST /sessions/{sid}/panels/{pid}/ratings     submit one panel's scores
    GET  /audio/{test_id}/{stimulus_id}.wav       stimulus audio (WAV)

`POST /tests` body::

    {"systems": ["sd-25000", ...],
     "sentences": [{"sentence_id": "s1", "text": "five to thirty words"}],
     "quota": 10, "mode": "naturalness", "seed": 0,
     "audio_dir": "/path",              # expects <dir>/<system>/<sentence>.wav
     "stimuli": {system: {sentence: path}}}   # alternative explicit map

`GET /sessions/{sid}/next` response::

    {"done": false, "panel_id": "p00003", "mode": "naturalness",
     "sentence_text": "...", "reference_url": null,
     "slots": [{"slot": 0, "label": "A", "stimulus_url": "/audio/..."}]}

`POST .../ratings` body::

    {"scores": {"0": 80, "1": 55, ...}, "client_token": "any-unique-string"}

Replaying the same client_token acks idempotently; a different token for an
already-rated panel is a 409 conflict.
"""

from __future__ import annotations

import json
import logging
import os
import sqlite3
import threading
import time
import uuid
from hashlib import sha256

from . import mushra
from .mushra import MushraError, ScoreRow

logger = logging.getLogger(__name__)

RESERVATION_SECONDS = 30 * 60
DEFAULT_QUOTA = 10
MIN_WORDS, MAX_WORDS = 5, 30
MODES = ("naturalness", "similarity")

_SCHEMA = """
CREATE TABLE IF NOT EXISTS tests (
    test_id TEXT PRIMARY KEY,
    mode TEXT NOT NULL,
    quota INTEGER NOT NULL,
    seed INTEGER NOT NULL,
    config_json TEXT NOT NULL,
    created_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS panels (
    test_id TEXT NOT NULL,
    panel_id TEXT NOT NULL,
    sentence_id TEXT NOT NULL,
    sentence_text TEXT NOT NULL,
    stimuli_json TEXT NOT NULL,
    reference_stimulus TEXT,
    PRIMARY KEY (test_id, panel_id)
);
CREATE TABLE IF NOT EXISTS stimuli (
    test_id TEXT NOT NULL,
    stimulus_id TEXT NOT NULL,
    path TEXT NOT NULL,
    PRIMARY KEY (test_id, stimulus_id)
);
CREATE TABLE IF NOT EXISTS sessions (
    session_id TEXT PRIMARY KEY,
    test_id TEXT NOT NULL,
    rater_id TEXT NOT NULL,
    qualification TEXT NOT NULL DEFAULT '',
    created_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS reservations (
    test_id TEXT NOT NULL,
    panel_id TEXT NOT NULL,
    session_id TEXT NOT NULL,
    expires_at REAL NOT NULL,
    PRIMARY KEY (test_id, panel_id, session_id)
);
CREATE TABLE IF NOT EXISTS ratings (
    test_id TEXT NOT NULL,
    panel_id TEXT NOT NULL,
    rater_id TEXT NOT NULL,
    session_id TEXT NOT NULL,
    client_token TEXT NOT NULL,
    scores_json TEXT NOT NULL,
    submitted_at REAL NOT NULL,
    PRIMARY KEY (test_id, panel_id, rater_id)
);
"""


class EvalError(Exception):
    """Store-level failure carrying the HTTP status it maps to."""

    def __init__(self, status: int, detail: str):
        super().__init__(detail)
        self.status = status
        self.detail = detail


def _word_count(text: str) -> int:
    return len(text.split())


def _stimulus_id(seed: int, system: str, sentence_id: str) -> str:
    return sha256(f"{seed}:{system}:{sentence_id}".encode("utf-8")).hexdigest()[:16]


class EvalStore:
    """SQLite-backed persistence with single-writer quota accounting."""

    def __init__(self, path: str):
        self.path = str(path)
        self._lock = threading.Lock()
        self._write = sqlite3.connect(self.path, check_same_thread=False)
        self._write.execute("PRAGMA journal_mode=WAL")
        self._write.execute("PRAGMA synchronous=NORMAL")
        self._write.executescript(_SCHEMA)
        self._write.commit()

    def close(self) -> None:
        self._write.close()

    def _read(self) -> sqlite3.Connection:
        conn = sqlite3.connect(f"file:{self.path}?mode=ro", uri=True, check_same_thread=False)
        conn.row_factory = sqlite3.Row
        return conn

    # -- test creation -------------------------------------------------------

    def create_test(self, config: dict) -> dict:
        systems = config.get("systems") or []
        sentences = config.get("sentences") or []
        if not systems or len(set(systems)) != len(systems):
            raise EvalError(400, "config needs a non-empty list of unique systems")
        if not sentences:
            raise EvalError(400, "config needs at least one sentence")
        mode = config.get("mode", "naturalness")
        if mode not in MODES:
            raise EvalError(400, f"mode must be one of {MODES}")
        quota = int(config.get("quota", DEFAULT_QUOTA))
        if quota < 1:
            raise EvalError(400, "quota must be positive")
        seed = int(config.get("seed", 0))
        reference_system = config.get("reference_system", "recordings")

        sentence_ids, texts = [], {}
        for entry in sentences:
            sid, text = entry["sentence_id"], entry["text"]
            if sid in texts:
                raise EvalError(400, f"duplicate sentence_id {sid!r}")
            n = _word_count(text)
            if not MIN_WORDS <= n <= MAX_WORDS:
                raise EvalError(
                    400,
                    f"sentence {sid!r} has {n} words, outside [{MIN_WORDS}, {MAX_WORDS}]",
                )
            sentence_ids.append(sid)
            texts[sid] = text

        explicit = config.get("stimuli") or {}
        audio_dir = config.get("audio_dir")

        def resolve(system: str, sentence_id: str) -> str:
            path = explicit.get(system, {}).get(sentence_id)
            if path is None and audio_dir is not None:
                path = os.path.join(audio_dir, system, f"{sentence_id}.wav")
            if path is None or not os.path.isfile(path):
                raise MushraError(
                    f"missing stimulus for system {system!r}, sentence {sentence_id!r}"
                )
            return path

        try:
            panels = mushra.assemble_panels(
                list(systems), sentence_ids, quota, seed, resolve,
                recordings_system=reference_system,
            )
        except MushraError as e:
            raise EvalError(400, str(e)) from None

        test_id = uuid.uuid4().hex[:12]
        with self._lock:
            cur = self._write.cursor()
            try:
                cur.execute(
                    "INSERT INTO tests VALUES (?,?,?,?,?,?)",
                    (test_id, mode, quota, seed, json.dumps(config, default=str), time.time()),
                )
                stim_paths = {}
                for panel in panels:
                    slots, reference = [], None
                    for st in panel.stimuli:
                        sid = _stimulus_id(seed, st.system, panel.sentence_id)
                        stim_paths[sid] = st.audio
                        slots.append(
                            {"slot": st.slot, "system": st.system,
                             "stimulus_id": sid, "is_anchor": st.is_anchor}
                        )
                        if st.is_anchor:
                            reference = sid
                    cur.execute(
                        "INSERT INTO panels VALUES (?,?,?,?,?,?)",
                        (test_id, panel.panel_id, panel.sentence_id,
                         texts[panel.sentence_id], json.dumps(slots),
                         reference if mode == "similarity" else None),
                    )
                for sid, path in stim_paths.items():
                    cur.execute("INSERT INTO stimuli VALUES (?,?,?)", (test_id, sid, path))
                self._write.commit()
            except BaseException:
                self._write.rollback()
                raise
        logger.info("created test %s: %d panels, quota %d", test_id, len(panels), quota)
        return {"test_id": test_id, "panel_count": len(panels), "quota": quota, "mode": mode}

    def test_summary(self, test_id: str) -> dict:
        with self._read() as conn:
            test = conn.execute("SELECT * FROM tests WHERE test_id=?", (test_id,)).fetchone()
            if test is None:
                raise EvalError(404, f"unknown test {test_id!r}")
            panel_count = conn.execute(
                "SELECT COUNT(*) FROM panels WHERE test_id=?", (test_id,)
            ).fetchone()[0]
            ratings = conn.execute(
                "SELECT COUNT(*) FROM ratings WHERE test_id=?", (test_id,)
            ).fetchone()[0]
        return {
            "test_id": test_id, "mode": test["mode"], "quota": test["quota"],
            "panel_count": panel_count, "ratings": ratings,
            "ratings_needed": panel_count * test["quota"],
        }

    # -- sessions and dispensing ----------------------------------------------

    def create_session(self, test_id: str, rater_id: str | None = None,
                       qualification: str = "") -> dict:
        rater = rater_id or uuid.uuid4().hex
        session_id = uuid.uuid4().hex
        with self._lock:
            exists = self._write.execute(
                "SELECT 1 FROM tests WHERE test_id=?", (test_id,)
            ).fetchone()
            if exists is None:
                raise EvalError(404, f"unknown test {test_id!r}")
            self._write.execute(
                "INSERT INTO sessions VALUES (?,?,?,?,?)",
                (session_id, test_id, rater, qualification, time.time()),
            )
            self._write.commit()
        return {"session_id": session_id, "test_id": test_id, "rater_id": rater}

    def _session(self, cur, session_id: str) -> sqlite3.Row:
        cur.row_factory = sqlite3.Row
        row = cur.execute("SELECT * FROM sessions WHERE session_id=?", (session_id,)).fetchone()
        if row is None:
            raise EvalError(404, f"unknown session {session_id!r}")
        return row

    def next_panel(self, session_id: str, now: float | None = None) -> dict:
        """Dispense an under-quota panel this rater has not seen, or a done-marker.

        Holding an unexpired reservation re-serves the same panel, so refresh
        and retry are harmless.  Reservations by other live sessions count
        against the quota to keep raters from racing past it.
        """
        now = time.time() if now is None else now
        with self._lock:
            cur = self._write.cursor()
            session = self._session(cur, session_id)
            test_id, rater = session["test_id"], session["rater_id"]
            cur.execute("DELETE FROM reservations WHERE expires_at < ?", (now,))

            mine = cur.execute(
                "SELECT panel_id FROM reservations WHERE test_id=? AND session_id=?",
                (test_id, session_id),
            ).fetchone()
            if mine is not None:
                self._write.commit()
                return self._panel_payload(cur, test_id, mine["panel_id"])

            row = cur.execute(
                """
                SELECT p.panel_id,
                       (SELECT COUNT(*) FROM ratings r
                         WHERE r.test_id=p.test_id AND r.panel_id=p.panel_id) AS done,
                       (SELECT COUNT(*) FROM reservations v
                         WHERE v.test_id=p.test_id AND v.panel_id=p.panel_id) AS held
                  FROM panels p
                 WHERE p.test_id=?
                   AND NOT EXISTS (SELECT 1 FROM ratings r2
                                    WHERE r2.test_id=p.test_id AND r2.panel_id=p.panel_id
                                      AND r2.rater_id=?)
                   AND done + held < (SELECT quota FROM tests WHERE test_id=p.test_id)
                 ORDER BY done + held, p.panel_id
                 LIMIT 1
                """,
                (test_id, rater),
            ).fetchone()
            if row is None:
                self._write.commit()
                return {"done": True}
            cur.execute(
                "INSERT INTO reservations VALUES (?,?,?,?)",
                (test_id, row["panel_id"], session_id, now + RESERVATION_SECONDS),
            )
            self._write.commit()
            return self._panel_payload(cur, test_id, row["panel_id"])

    def _panel_payload(self, cur, test_id: str, panel_id: str) -> dict:
        cur.row_factory = sqlite3.Row
        panel = cur.execute(
            "SELECT * FROM panels WHERE test_id=? AND panel_id=?", (test_id, panel_id)
        ).fetchone()
        mode = cur.execute(
            "SELECT mode FROM tests WHERE test_id=?", (test_id,)
        ).fetchone()["mode"]
        slots = [
            {
                "slot": s["slot"],
                "label": chr(ord("A") + s["slot"]),
                "stimulus_url": f"/audio/{test_id}/{s['stimulus_id']}.wav",
            }
            for s in json.loads(panel["stimuli_json"])
        ]
        reference = panel["reference_stimulus"]
        return {
            "done": False,
            "panel_id": panel_id,
            "mode": mode,
            "sentence_text": panel["sentence_text"],
            "slots": sorted(slots, key=lambda s: s["slot"]),
            "reference_url": f"/audio/{test_id}/{reference}.wav" if reference else None,
        }

    # -- submission ------------------------------------------------------------

    def submit_ratings(self, session_id: str, panel_id: str, scores: dict,
                       client_token: str, now: float | None = None) -> dict:
        """Persist one rater's scores for one panel, atomically.

        Validation failures persist nothing.  A replay with the same
        client_token acks without writing; a different token conflicts.
        """
        now = time.time() if now is None else now
        if not client_token:
            raise EvalError(400, "client_token is required")
        with self._lock:
            cur = self._write.cursor()
            try:
                session = self._session(cur, session_id)
                test_id, rater = session["test_id"], session["rater_id"]
                cur.row_factory = sqlite3.Row
                panel = cur.execute(
                    "SELECT stimuli_json FROM panels WHERE test_id=? AND panel_id=?",
                    (test_id, panel_id),
                ).fetchone()
                if panel is None:
                    raise EvalError(404, f"unknown panel {panel_id!r}")

                slots = json.loads(panel["stimuli_json"])
                clean = self._validate_scores(scores, slots, panel_id)

                prior = cur.execute(
                    "SELECT client_token FROM ratings WHERE test_id=? AND panel_id=? AND rater_id=?",
                    (test_id, panel_id, rater),
                ).fetchone()
                if prior is not None:
                    if prior["client_token"] == client_token:
                        self._write.rollback()
                        return {"status": "duplicate", "panel_id": panel_id}
                    raise EvalError(409, f"panel {panel_id!r} already rated by this rater")

                quota, = cur.execute(
                    "SELECT quota FROM tests WHERE test_id=?", (test_id,)
                ).fetchone()
                done, = cur.execute(
                    "SELECT COUNT(*) FROM ratings WHERE test_id=? AND panel_id=?",
                    (test_id, panel_id),
                ).fetchone()
                if done >= quota:
                    raise EvalError(409, f"panel {panel_id!r} already has {quota} ratings")

                cur.execute(
                    "INSERT INTO ratings VALUES (?,?,?,?,?,?,?)",
                    (test_id, panel_id, rater, session_id, client_token,
                     json.dumps(clean), now),
                )
                cur.execute(
                    "DELETE FROM reservations WHERE test_id=? AND panel_id=? AND session_id=?",
                    (test_id, panel_id, session_id),
                )
                self._write.commit()
            except BaseException:
                self._write.rollback()
                raise
        return {"status": "ok", "panel_id": panel_id}

    @staticmethod
    def _validate_scores(scores: dict, slots: list[dict], panel_id: str) -> dict:
        expected = {s["slot"] for s in slots}
        try:
            got = {int(k): v for k, v in scores.items()}
        except (TypeError, ValueError):
            raise EvalError(400, "slot keys must be integers") from None
        missing = sorted(expected - got.keys())
        extra = sorted(got.keys() - expected)
        if missing or extra:
            raise EvalError(
                400,
                f"panel {panel_id!r} expects slots {sorted(expected)}; "
                f"missing {missing}, unexpected {extra}",
            )
        clean = {}
        for slot, value in sorted(got.items()):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise EvalError(400, f"slot {slot}: score must be a number")
            if not 0 <= value <= 100:
                raise EvalError(400, f"slot {slot}: score {value} outside [0, 100]")
            clean[str(slot)] = value
        return clean

    # -- export ------------------------------------------------------------------

    def export_rows(self, test_id: str) -> list[ScoreRow]:
        with self._read() as conn:
            if conn.execute("SELECT 1 FROM tests WHERE test_id=?", (test_id,)).fetchone() is None:
                raise EvalError(404, f"unknown test {test_id!r}")
            panels = {
                row["panel_id"]: json.loads(row["stimuli_json"])
                for row in conn.execute(
                    "SELECT panel_id, stimuli_json FROM panels WHERE test_id=?", (test_id,)
                )
            }
            rows = []
            for r in conn.execute(
                "SELECT panel_id, rater_id, scores_json FROM ratings "
                "WHERE test_id=? ORDER BY panel_id, rater_id",
                (test_id,),
            ):
                by_slot = {s["slot"]: s["system"] for s in panels[r["panel_id"]]}
                for slot_key, score in sorted(json.loads(r["scores_json"]).items(),
                                              key=lambda kv: int(kv[0])):
                    slot = int(slot_key)
                    rows.append(ScoreRow(r["panel_id"], r["rater_id"], slot,
                                         by_slot[slot], float(score)))
        return rows

    def export_csv(self, test_id: str) -> str:
        return mushra.scores_to_csv(self.export_rows(test_id))

    def stimulus_path(self, test_id: str, stimulus_id: str) -> str:
        with self._read() as conn:
            row = conn.execute(
                "SELECT path FROM stimuli WHERE test_id=? AND stimulus_id=?",
                (test_id, stimulus_id),
            ).fetchone()
        if row is None:
            raise EvalError(404, f"unknown stimulus {stimulus_id!r}")
        return row["path"]


# -- HTTP layer -----------------------------------------------------------------


def create_app(store: EvalStore, static_dir: str | None = None):
    """FastAPI application over a store; one app per store instance.

    ``static_dir`` mounts a built rater UI at the root path; API routes are
    registered first so they always win over the static fallback.
    """
    from fastapi import FastAPI, Request
    from fastapi.responses import FileResponse, JSONResponse, PlainTextResponse

    app = FastAPI(title="listening-test service", docs_url=None, redoc_url=None)
    app.state.store = store

    @app.exception_handler(EvalError)
    async def _eval_error(request: Request, exc: EvalError):
        return JSONResponse(status_code=exc.status, content={"detail": exc.detail})

    @app.post("/tests")
    async def create_test(config: dict):
        return store.create_test(config)

    @app.get("/tests/{test_id}")
    async def test_summary(test_id: str):
        return store.test_summary(test_id)

    @app.get("/tests/{test_id}/export")
    async def export(test_id: str):
        return PlainTextResponse(store.export_csv(test_id), media_type="text/csv")

    @app.post("/sessions")
    async def create_session(body: dict):
        test_id = body.get("test_id")
        if not test_id:
            raise EvalError(400, "test_id is required")
        return store.create_session(
            test_id, body.get("rater_id"), body.get("qualification", "")
        )

    @app.get("/sessions/{session_id}/next")
    async def next_panel(session_id: str):
        return store.next_panel(session_id)

    @app.post("/sessions/{session_id}/panels/{panel_id}/ratings")
    async def submit(session_id: str, panel_id: str, body: dict):
        scores = body.get("scores")
        if not isinstance(scores, dict):
            raise EvalError(400, "body must carry a scores object")
        return store.submit_ratings(
            session_id, panel_id, scores, body.get("client_token", "")
        )

    @app.get("/audio/{test_id}/{stimulus_file}")
    async def audio(test_id: str, stimulus_file: str):
        stimulus_id = stimulus_file.removesuffix(".wav")
        return FileResponse(store.stimulus_path(test_id, stimulus_id), media_type="audio/wav")

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app


def serve(db_path: str, host: str = "127.0.0.1", port: int = 8571,
          static_dir: str | None = None) -> None:
    """Run the service until interrupted (used by the command line)."""
    import uvicorn

    store = EvalStore(db_path)
    uvicorn.run(create_app(store, static_dir=static_dir),
                host=host, port=port, log_level="warning")
