"""Streaming generation engine: sessions, prompt intake, chunk rollout.

A session is a single-writer state machine. Prompts queue up and bind at
shot boundaries, never mid-shot; chunk noise is keyed by (session seed,
shot, chunk, step) so replaying a script reproduces identical latents
regardless of prompt arrival timing. The dual cache keeps per-session
memory constant in shot count.
"""

from __future__ import annotations

import base64
import hashlib
import io
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nd
from .model import DualCache, ModelParams, cache_shot_boundary
from .distill import STUDENT_SCHEDULE, context_cache_from_history, student_generate_chunk
from .sampler import ContextBudget, plan_budget
from .teacher import DenoiseSchedule
from .toyworld import Codec, CodecSpec, LatentClip, ShotScript, WorldConfig


class SessionClosed(RuntimeError):
    pass


class EngineError(RuntimeError):
    pass


@dataclass
class EngineConfig:
    f_context: int = 6
    seed: int = 0
    schedule4: tuple = STUDENT_SCHEDULE
    preview: bool = True
    preview_scale: int = 8
    codec_mode: str = "identity"
    codec_seed: int = 11
    max_event_buffer: int = 10_000
    latency_window: int = 100

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule4"] = list(self.schedule4)
        return d


@dataclass
class Prompt:
    caption: list[int]
    length_frames: int


@dataclass
class Metrics:
    chunks: int = 0
    frames: int = 0
    total_latency_ms: float = 0.0
    window: deque = field(default_factory=lambda: deque(maxlen=100))
    started_at: float = field(default_factory=time.perf_counter)

    def record(self, n_frames: int, latency_ms: float) -> None:
        self.chunks += 1
        self.frames += n_frames
        self.total_latency_ms += latency_ms
        self.window.append((n_frames, latency_ms))

    def rolling_fps(self) -> float:
        if not self.window:
            return 0.0
        frames = sum(f for f, _ in self.window)
        ms = sum(l for _, l in self.window)
        return 1000.0 * frames / ms if ms > 0 else 0.0

    def snapshot(self) -> dict:
        return {"chunks": self.chunks, "frames": self.frames,
                "total_latency_ms": round(self.total_latency_ms, 3),
                "rolling_fps": round(self.rolling_fps(), 3)}


def _render_preview(frame: np.ndarray, scale: int) -> str:
    """Grayscale heatmap PNG of a latent frame's channel mean, base64."""
    from PIL import Image

    tile = frame.mean(axis=0)
    lo, hi = float(tile.min()), float(tile.max())
    span = (hi - lo) if hi > lo else 1.0
    img8 = np.clip((tile - lo) / span * 255.0, 0, 255).astype(np.uint8)
    img = Image.fromarray(img8, mode="L").resize(
        (img8.shape[1] * scale, img8.shape[0] * scale), Image.NEAREST)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


class Session:
    """One generation stream; all mutation goes through engine methods."""

    def __init__(self, sid: str, global_caption: list[int], engine: "Engine"):
        self.id = sid
        self.global_caption = list(global_caption)
        self.engine = engine
        self.cache = DualCache(engine.params.cfg, batch=1)
        self.completed_shots: list[np.ndarray] = []
        self.shot_prompts: list[Prompt] = []
        self.active: Prompt | None = None
        self.current_chunks: list[np.ndarray] = []
        self.chunks_emitted = 0
        self.prompt_queue: deque[Prompt] = deque()
        self.metrics = Metrics(window=deque(maxlen=engine.cfg.latency_window))
        self.events: list[dict] = []
        self.event_seq = 0
        self.state = "awaiting_prompt"
        self.lock = threading.Lock()
        self.wake = threading.Condition(self.lock)
        self.seed = engine.cfg.seed

    @property
    def phase(self) -> int:
        return self.cache.phase

    def caption_rows(self) -> np.ndarray:
        rows = [list(self.global_caption) + list(p.caption) for p in self.shot_prompts]
        return np.asarray(rows, dtype=np.int64)

    def emit(self, event: dict) -> dict:
        event["session"] = self.id
        event["event_id"] = self.event_seq
        self.event_seq += 1
        self.events.append(event)
        if len(self.events) > self.engine.cfg.max_event_buffer:
            # previews are droppable under backpressure, latents are not
            for e in self.events[:len(self.events) - self.engine.cfg.max_event_buffer]:
                e.pop("preview_b64", None)
        with self.wake:
            self.wake.notify_all()
        self.engine.counters["events_emitted"] += 1
        return event


class Engine:
    """Owns the student checkpoint and the session table."""

    def __init__(self, params: ModelParams, world: WorldConfig,
                 cfg: EngineConfig | None = None):
        self.params = params
        self.world = world
        self.cfg = cfg or EngineConfig()
        self.codec = Codec(CodecSpec(mode=self.cfg.codec_mode, seed=self.cfg.codec_seed),
                           world.channels)
        self.schedule = DenoiseSchedule(list(self.cfg.schedule4))
        self.sessions: dict[str, Session] = {}
        self.counters = {"sessions_created": 0, "chunks_generated": 0,
                         "events_emitted": 0, "prompts_accepted": 0}
        self._sid = 0
        self._lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------

    def create_session(self, global_caption: list[int], seed: int | None = None) -> Session:
        self._validate_caption(global_caption)
        with self._lock:
            sid = f"s{self._sid:04d}"
            self._sid += 1
            session = Session(sid, global_caption, self)
            if seed is not None:
                session.seed = seed
            self.sessions[sid] = session
            self.counters["sessions_created"] += 1
        session.emit({"type": "created", "config": self.cfg.to_dict(),
                      "global_caption": list(global_caption)})
        session.emit({"type": "awaiting_prompt"})
        return session

    def get(self, sid: str) -> Session:
        if sid not in self.sessions:
            raise EngineError(f"unknown session {sid}")
        return self.sessions[sid]

    def _validate_caption(self, tokens: list[int]) -> None:
        if not isinstance(tokens, (list, tuple)) or not tokens:
            raise EngineError("caption must be a non-empty token list")
        if any(not (0 <= int(t) < self.world.vocab_size) for t in tokens):
            raise EngineError(f"caption tokens outside vocab {self.world.vocab_size}")

    def normalize_caption(self, caption) -> list[int]:
        """Accept raw token lists or {scene_id, subject_id, action_id}."""
        if isinstance(caption, dict):
            from .toyworld import shot_caption
            return shot_caption(self.world, int(caption["scene_id"]),
                                int(caption["subject_id"]), int(caption.get("action_id", 0)))
        return [int(t) for t in caption]

    # -- prompt intake -----------------------------------------------------

    def submit_prompt(self, session: Session, caption: list[int],
                      length_frames: int) -> dict:
        if session.state in ("closed", "aborted"):
            raise SessionClosed(f"session {session.id} is {session.state}")
        self._validate_caption(caption)
        cf = self.params.cfg.chunk_frames
        if length_frames < cf or length_frames % cf:
            raise EngineError(f"length_frames must be a positive multiple of {cf}")
        prompt = Prompt(caption=list(caption), length_frames=int(length_frames))
        with session.lock:
            session.prompt_queue.append(prompt)
            queued = len(session.prompt_queue)
        session.emit({"type": "prompt_queued", "queue_depth": queued,
                      "caption": list(caption), "length_frames": length_frames})
        self.counters["prompts_accepted"] += 1
        if session.state == "awaiting_prompt":
            self._bind_next_prompt(session)
        with session.wake:
            session.wake.notify_all()
        return {"ok": True, "queue_depth": queued}

    def _bind_next_prompt(self, session: Session) -> bool:
        with session.lock:
            if session.active is not None or not session.prompt_queue:
                return False
            prompt = session.prompt_queue.popleft()
            session.active = prompt
            session.shot_prompts.append(prompt)
            session.chunks_emitted = 0
            session.state = "generating"
        session.emit({"type": "prompt_active", "shot": len(session.completed_shots),
                      "length_frames": prompt.length_frames})
        return True

    # -- generation ---------------------------------------------------------

    def step_chunk(self, session: Session) -> dict:
        if session.state in ("closed", "aborted"):
            raise SessionClosed(f"session {session.id} is {session.state}")
        if session.active is None:
            raise EngineError("no active shot; submit a prompt first")
        shot_idx = len(session.completed_shots)
        chunk_idx = session.chunks_emitted
        t0 = time.perf_counter()
        with nd.no_grad():
            chunk = student_generate_chunk(
                self.params, session.cache, session.caption_rows(), shot_idx,
                chunk_idx, self.schedule, [session.seed])
        latency_ms = (time.perf_counter() - t0) * 1000.0
        lat = chunk.data[0]                              # [cf, c, h, w]

        session.current_chunks.append(lat)
        session.chunks_emitted += 1
        session.metrics.record(lat.shape[0], latency_ms)
        self.counters["chunks_generated"] += 1
        g, l = session.cache.occupancy()
        payload = lat.astype("<f4").tobytes()
        event = {
            "type": "chunk", "shot": shot_idx, "chunk": chunk_idx,
            "latency_ms": round(latency_ms, 3),
            "cache": {"global": g, "local": l},
            "phase": session.phase,
            "latent_b64": base64.b64encode(payload).decode(),
            "payload_hash": hashlib.md5(payload).hexdigest(),
            "fps": round(session.metrics.rolling_fps(), 3),
        }
        if self.cfg.preview:
            frames = self.codec.decode(lat)
            event["preview_b64"] = _render_preview(frames[-1], self.cfg.preview_scale)
        session.emit(event)

        if session.chunks_emitted * self.params.cfg.chunk_frames >= session.active.length_frames:
            self.finish_shot(session)
        return event

    def finish_shot(self, session: Session) -> dict:
        if session.active is None:
            raise EngineError("no active shot to finish")
        prompt = session.active
        n_chunks = prompt.length_frames // self.params.cfg.chunk_frames
        if session.chunks_emitted < n_chunks:
            raise EngineError("scheduled shot length not reached")

        shot_idx = len(session.completed_shots)
        session.completed_shots.append(np.concatenate(session.current_chunks, axis=0))
        session.current_chunks = []
        session.active = None

        history = [s[None] for s in session.completed_shots]
        plan = plan_budget(ContextBudget(self.cfg.f_context, len(history)))
        with nd.no_grad():
            kv, ctx_lat, meta, provenance = context_cache_from_history(
                self.params, history, session.caption_rows(), self.cfg.f_context,
                "self")
            cache_shot_boundary(session.cache, kv, ctx_lat.shape[1], provenance)

        g, l = session.cache.occupancy()
        event = session.emit({
            "type": "boundary", "shot": shot_idx, "plan": plan,
            "cache": {"global": g, "local": l}, "phase": session.phase,
        })
        if not self._bind_next_prompt(session):
            session.state = "awaiting_prompt"
            session.emit({"type": "awaiting_prompt"})
        return event

    def abort(self, session: Session) -> None:
        session.state = "aborted"
        session.emit({"type": "aborted"})
        with session.wake:
            session.wake.notify_all()

    def close(self, session: Session) -> None:
        session.state = "closed"
        session.emit({"type": "closed"})
        with session.wake:
            session.wake.notify_all()

    # -- drivers -----------------------------------------------------------

    def run_until_idle(self, session: Session) -> None:
        """Synchronous single-threaded drive: generate until the queue and
        the active shot are both exhausted."""
        while session.state == "generating":
            self.step_chunk(session)

    def session_clip(self, session: Session) -> LatentClip:
        if not session.completed_shots:
            raise EngineError("no completed shots")
        data = np.concatenate(session.completed_shots, axis=0)
        bounds, acc = [], 0
        for s in session.completed_shots[:-1]:
            acc += s.shape[0]
            bounds.append(acc)
        return LatentClip(data=data, shot_boundaries=bounds, truth=None)


def generate_script(params: ModelParams, world: WorldConfig, script: ShotScript,
                    cfg: EngineConfig | None = None, seed: int | None = None
                    ) -> tuple[LatentClip, Session]:
    """Offline batch mode: play a whole script through a session."""
    engine = Engine(params, world, cfg)
    session = engine.create_session(script.global_caption, seed=seed)
    for shot in script.shots:
        engine.submit_prompt(session, list(shot.caption), shot.length_frames)
        engine.run_until_idle(session)
    engine.close(session)
    return engine.session_clip(session), session
