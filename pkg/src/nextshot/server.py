"""HTTP wire protocol: JSON POST endpoints in, newline-delimited JSON out.

Client -> server:
    POST /sessions   {"type": "create", "global_caption": [...], "seed"?}
    POST /prompt     {"type": "prompt", "session", "caption", "length_frames"}
    POST /abort      {"session"}
    POST /close      {"session"}
Server -> client:
    GET /events/{session}?after=<event_id>   persistent ndjson stream
    GET /metrics                             monotone counters
Malformed messages get a per-message {"type": "error", code, detail} reply;
the session stays alive.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .engine import Engine, EngineError, SessionClosed

logger = logging.getLogger("nextshot.server")
logging.basicConfig(level=os.environ.get("NEXTSHOT_LOG", "INFO").upper())


def _error(code: str, detail: str, status: int = 400) -> JSONResponse:
    return JSONResponse({"type": "error", "code": code, "detail": detail},
                        status_code=status)


class SessionRunner:
    """Background generation loop: one thread per session."""

    def __init__(self, engine: Engine, session):
        self.engine = engine
        self.session = session
        self.thread = threading.Thread(target=self._run, daemon=True)
        self.thread.start()

    def _run(self):
        s = self.session
        while s.state not in ("closed", "aborted"):
            if s.state == "generating":
                try:
                    self.engine.step_chunk(s)
                except (EngineError, SessionClosed):
                    break
                except Exception as exc:            # model errors keep the session alive
                    s.emit({"type": "error", "code": "generation_failed",
                            "detail": str(exc)})
                    s.state = "awaiting_prompt"
            else:
                with s.wake:
                    s.wake.wait(timeout=0.2)


def build_app(engine: Engine, threaded: bool = True) -> FastAPI:
    app = FastAPI(title="nextshot-engine")
    runners: dict[str, SessionRunner] = {}

    @app.post("/sessions")
    async def create(request: Request):
        try:
            body = await request.json()
        except Exception:
            return _error("bad_json", "request body is not valid JSON")
        if body.get("type") != "create" or "global_caption" not in body:
            return _error("bad_message", 'expected {"type": "create", "global_caption": [...]}')
        try:
            caption = engine.normalize_caption(body["global_caption"])
            session = engine.create_session(caption, seed=body.get("seed"))
        except (EngineError, KeyError, ValueError) as exc:
            return _error("bad_caption", str(exc))
        if threaded:
            runners[session.id] = SessionRunner(engine, session)
        return {"type": "created", "session": session.id,
                "config": engine.cfg.to_dict()}

    @app.post("/prompt")
    async def prompt(request: Request):
        try:
            body = await request.json()
        except Exception:
            return _error("bad_json", "request body is not valid JSON")
        if body.get("type") != "prompt":
            return _error("bad_message", 'expected {"type": "prompt", ...}')
        try:
            session = engine.get(str(body["session"]))
            caption = engine.normalize_caption(body["caption"])
            ack = engine.submit_prompt(session, caption, int(body["length_frames"]))
        except SessionClosed as exc:
            return _error("session_closed", str(exc), status=409)
        except (EngineError, KeyError, ValueError, TypeError) as exc:
            return _error("bad_prompt", str(exc))
        return {"type": "ack", **ack}

    @app.post("/abort")
    async def abort(request: Request):
        body = await request.json()
        try:
            session = engine.get(str(body["session"]))
        except EngineError as exc:
            return _error("unknown_session", str(exc), status=404)
        engine.abort(session)
        return {"type": "ack", "session": session.id, "state": session.state}

    @app.post("/close")
    async def close(request: Request):
        body = await request.json()
        try:
            session = engine.get(str(body["session"]))
        except EngineError as exc:
            return _error("unknown_session", str(exc), status=404)
        engine.close(session)
        return {"type": "ack", "session": session.id, "state": session.state}

    @app.get("/events/{sid}")
    def events(sid: str, after: int = -1, follow: str = "live"):
        """ndjson event stream.

        follow=now   drain buffered events and end.
        follow=idle  end once the session is idle and fully drained.
        follow=live  stay open until the session closes (heartbeats keep
                     the generator yielding so disconnects propagate).
        """
        try:
            session = engine.get(sid)
        except EngineError as exc:
            return _error("unknown_session", str(exc), status=404)
        if follow not in ("now", "idle", "live"):
            return _error("bad_follow", f"unknown follow mode {follow!r}")

        def stream():
            cursor = after + 1
            while True:
                while cursor < len(session.events):
                    yield json.dumps(session.events[cursor]) + "\n"
                    cursor += 1
                if follow == "now":
                    return
                if session.state in ("closed", "aborted"):
                    return
                if (follow == "idle" and session.state == "awaiting_prompt"
                        and not session.prompt_queue):
                    return
                with session.wake:
                    session.wake.wait(timeout=0.2)
                if follow == "live" and cursor >= len(session.events):
                    yield json.dumps({"type": "heartbeat"}) + "\n"

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    @app.get("/metrics")
    def metrics():
        per_session = {sid: s.metrics.snapshot() for sid, s in engine.sessions.items()}
        return {"counters": dict(engine.counters), "sessions": per_session}

    return app


def serve(engine: Engine, host: str = "127.0.0.1", port: int = 8694) -> None:
    import uvicorn

    logger.info("serving on %s:%d", host, port)
    uvicorn.run(build_app(engine), host=host, port=port, log_level="warning")
