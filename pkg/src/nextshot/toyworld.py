"""Procedural multi-shot latent world.

Clips are sequences of shots. Each shot renders a scene pattern (channels
0..3) and a subject pattern (channels 4..7) drawn from fixed per-identity
pattern banks, amplitude-modulated over time; the modulation frequency of
the subject channels encodes the shot's action. Scene patterns switch hard
at shot boundaries, subject patterns persist wherever the script says so,
which makes consistency objectively scorable against the script.

Note: a cut between two shots with the same scene id has no visible scene
switch; script helpers avoid adjacent scene repeats for that reason.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class InvalidScriptError(ValueError):
    pass


class CodecShapeError(ValueError):
    pass


MAGIC = b"NXSHOTCLIP\x00v0001"
GLOBAL_TOKEN = 0


@dataclass
class WorldConfig:
    n_scenes: int = 8
    n_subjects: int = 8
    n_actions: int = 4
    channels: int = 8
    height: int = 8
    width: int = 8
    chunk_frames: int = 3
    default_shot_frames: int = 27
    pattern_seed: int = 7_771
    scene_drift_amp: float = 0.08
    scene_drift_freq: float = 2.0 * np.pi / 24.0
    subject_mod_depth: float = 0.25
    # Per-clip appearance detail: each clip renders identity id as
    # normalize(base_pattern + detail_weight * clip_noise). The caption names
    # the id but never the detail, so cross-shot consistency requires copying
    # appearance from history, not just reading the caption.
    detail_weight: float = 0.8
    # One temporal frequency per action id (rad/frame).
    action_freqs: tuple = (2.0 * np.pi / 20.0, 2.0 * np.pi / 14.0,
                           2.0 * np.pi / 10.0, 2.0 * np.pi / 8.0)

    def to_dict(self) -> dict:
        from dataclasses import asdict
        d = asdict(self)
        d["action_freqs"] = list(self.action_freqs)
        return d

    @classmethod
    def from_dict(cls, d: dict, strict: bool = False) -> "WorldConfig":
        if strict:
            missing = {f for f in cls.__dataclass_fields__} - set(d)
            if missing:
                raise ValueError(f"world config missing fields: {sorted(missing)}")
        kw = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "action_freqs" in kw:
            kw["action_freqs"] = tuple(kw["action_freqs"])
        return cls(**kw)

    @property
    def scene_channels(self) -> slice:
        return slice(0, self.channels // 2)

    @property
    def subject_channels(self) -> slice:
        return slice(self.channels // 2, self.channels)

    @property
    def vocab_size(self) -> int:
        return 1 + self.n_scenes + self.n_subjects + self.n_actions

    def scene_token(self, scene_id: int) -> int:
        return 1 + scene_id

    def subject_token(self, subject_id: int) -> int:
        return 1 + self.n_scenes + subject_id

    def action_token(self, action_id: int) -> int:
        return 1 + self.n_scenes + self.n_subjects + action_id


@dataclass
class Shot:
    caption: list[int]
    length_frames: int
    scene_id: int
    subject_id: int
    action_id: int = 0


@dataclass
class ShotScript:
    global_caption: list[int]
    shots: list[Shot]

    def validate(self, cfg: WorldConfig) -> None:
        if not self.shots:
            raise InvalidScriptError("script needs at least one shot")
        for i, s in enumerate(self.shots):
            if s.length_frames < cfg.chunk_frames:
                raise InvalidScriptError(
                    f"shot {i} has {s.length_frames} frames, need >= {cfg.chunk_frames}")
            if not (0 <= s.scene_id < cfg.n_scenes):
                raise InvalidScriptError(f"shot {i} scene_id {s.scene_id} out of range")
            if not (0 <= s.subject_id < cfg.n_subjects):
                raise InvalidScriptError(f"shot {i} subject_id {s.subject_id} out of range")
            if not (0 <= s.action_id < cfg.n_actions):
                raise InvalidScriptError(f"shot {i} action_id {s.action_id} out of range")

    @property
    def total_frames(self) -> int:
        return sum(s.length_frames for s in self.shots)

    def boundaries(self) -> list[int]:
        """First-frame indices of shots 1..n-1."""
        out, acc = [], 0
        for s in self.shots[:-1]:
            acc += s.length_frames
            out.append(acc)
        return out

    def to_dict(self) -> dict:
        return {
            "global_caption": list(self.global_caption),
            "shots": [{"caption": list(s.caption), "length_frames": s.length_frames,
                       "scene_id": s.scene_id, "subject_id": s.subject_id,
                       "action_id": s.action_id} for s in self.shots],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShotScript":
        shots = [Shot(list(s["caption"]), int(s["length_frames"]), int(s["scene_id"]),
                      int(s["subject_id"]), int(s.get("action_id", 0))) for s in d["shots"]]
        return cls(list(d["global_caption"]), shots)


@dataclass
class LatentClip:
    data: np.ndarray                      # [f, c, h, w] float32
    shot_boundaries: list[int]
    truth: np.ndarray | None = None       # [f, 2] (scene_id, subject_id), scripted clips only

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def shot_slices(self) -> list[slice]:
        edges = [0] + list(self.shot_boundaries) + [self.n_frames]
        return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def shot_caption(cfg: WorldConfig, scene_id: int, subject_id: int, action_id: int) -> list[int]:
    return [cfg.scene_token(scene_id), cfg.subject_token(subject_id), cfg.action_token(action_id)]


def global_caption(cfg: WorldConfig, shots: list[tuple]) -> list[int]:
    """Fixed-length summary caption: marker + lead subject/scene/action tokens."""
    scene0, subject0, action0 = shots[0][0], shots[0][1], shots[0][2]
    return [GLOBAL_TOKEN, cfg.subject_token(subject0), cfg.scene_token(scene0),
            cfg.action_token(action0)]


def make_script(cfg: WorldConfig, shots: list[tuple]) -> ShotScript:
    """Build a script from (scene_id, subject_id, action_id, length_frames) tuples."""
    shot_objs = [Shot(shot_caption(cfg, s, u, a), int(L), int(s), int(u), int(a))
                 for (s, u, a, L) in shots]
    script = ShotScript(global_caption(cfg, shots), shot_objs)
    script.validate(cfg)
    return script


def random_script(cfg: WorldConfig, rng: np.random.Generator, n_shots: int,
                  shot_frames: int | None = None) -> ShotScript:
    """Random multi-shot script with one persistent subject and no adjacent
    scene repeats; every third shot revisits the opening scene when legal."""
    L = cfg.default_shot_frames if shot_frames is None else shot_frames
    subject = int(rng.integers(0, cfg.n_subjects))
    shots = []
    prev_scene = -1
    first_scene = None
    for j in range(n_shots):
        if j >= 2 and j % 2 == 0 and first_scene != prev_scene:
            scene = first_scene
        else:
            scene = int(rng.integers(0, cfg.n_scenes))
            while scene == prev_scene:
                scene = int(rng.integers(0, cfg.n_scenes))
        if first_scene is None:
            first_scene = scene
        action = int(rng.integers(0, cfg.n_actions))
        shots.append((scene, subject, action, L))
        prev_scene = scene
    return make_script(cfg, shots)


class PatternBank:
    """Fixed per-identity pattern templates, unit RMS, near-orthogonal."""

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.pattern_seed)
        half = cfg.channels // 2
        shape = (half, cfg.height, cfg.width)

        def draw(n):
            p = rng.standard_normal((n,) + shape)
            rms = np.sqrt((p ** 2).mean(axis=(1, 2, 3), keepdims=True))
            return (p / rms).astype(np.float32)

        self.scene = draw(cfg.n_scenes)
        self.subject = draw(cfg.n_subjects)


def synth_clip(script: ShotScript, seed: int, noise_level: float,
               cfg: WorldConfig, bank: PatternBank | None = None) -> LatentClip:
    """Render a script into a latent clip with ground-truth identity labels."""
    script.validate(cfg)
    if not (0.0 <= noise_level <= 0.5):
        raise ValueError(f"noise_level {noise_level} outside [0, 0.5]")
    bank = bank or PatternBank(cfg)
    rng = np.random.default_rng([seed, 0xC11F])

    def instance(base: np.ndarray) -> np.ndarray:
        if cfg.detail_weight == 0.0:
            return base
        detail = rng.standard_normal(base.shape).astype(np.float32)
        detail /= np.sqrt((detail ** 2).mean())
        mixed = base + cfg.detail_weight * detail
        return (mixed / np.sqrt((mixed ** 2).mean())).astype(np.float32)

    # one appearance per identity per clip, shared across revisits
    scene_inst: dict[int, np.ndarray] = {}
    subj_inst: dict[int, np.ndarray] = {}
    for shot in script.shots:
        if shot.scene_id not in scene_inst:
            scene_inst[shot.scene_id] = instance(bank.scene[shot.scene_id])
        if shot.subject_id not in subj_inst:
            subj_inst[shot.subject_id] = instance(bank.subject[shot.subject_id])

    frames = []
    truth = []
    for j, shot in enumerate(script.shots):
        phase_scene = float(rng.uniform(0, 2 * np.pi))
        phase_subj = float(rng.uniform(0, 2 * np.pi))
        p_scene = scene_inst[shot.scene_id]
        p_subj = subj_inst[shot.subject_id]
        w_act = cfg.action_freqs[shot.action_id]
        for i in range(shot.length_frames):
            scene_gain = 1.0 + cfg.scene_drift_amp * np.sin(cfg.scene_drift_freq * i + phase_scene)
            subj_gain = 1.0 + cfg.subject_mod_depth * np.sin(w_act * i + phase_subj)
            frame = np.empty((cfg.channels, cfg.height, cfg.width), dtype=np.float32)
            frame[cfg.scene_channels] = scene_gain * p_scene
            frame[cfg.subject_channels] = subj_gain * p_subj
            frames.append(frame)
            truth.append((shot.scene_id, shot.subject_id))

    data = np.stack(frames).astype(np.float32)
    if noise_level > 0:
        data = data + noise_level * rng.standard_normal(data.shape).astype(np.float32)
    return LatentClip(data=data, shot_boundaries=script.boundaries(),
                      truth=np.asarray(truth, dtype=np.uint32))


# -- codec -------------------------------------------------------------------

@dataclass
class CodecSpec:
    mode: str = "identity"        # identity | fixed-linear
    seed: int = 11

    def __post_init__(self):
        if self.mode not in ("identity", "fixed-linear"):
            raise ValueError(f"unknown codec mode {self.mode!r}")


class Codec:
    """Frame <-> latent map standing in for a learned autoencoder.

    fixed-linear mixes channels with a seeded orthogonal matrix, so the
    decode map is its exact transpose.
    """

    def __init__(self, spec: CodecSpec, channels: int):
        self.spec = spec
        self.channels = channels
        if spec.mode == "fixed-linear":
            rng = np.random.default_rng(spec.seed)
            q, _ = np.linalg.qr(rng.standard_normal((channels, channels)))
            self.fwd = q.astype(np.float32)
            self.inv = q.T.astype(np.float32)
        else:
            self.fwd = self.inv = None

    def _apply(self, x: np.ndarray, m: np.ndarray | None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.size == 0:
            return x
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise CodecShapeError(f"expected [f, {self.channels}, h, w], got {x.shape}")
        if m is None:
            return x
        return np.einsum("dc,fchw->fdhw", m, x).astype(np.float32)

    def encode(self, frames: np.ndarray) -> np.ndarray:
        return self._apply(frames, self.fwd)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        return self._apply(latents, self.inv)


# -- oracle consistency scores -------------------------------------------------

def _cos(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def _clip01(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def _fit_template(block: np.ndarray) -> np.ndarray:
    """Least-squares rank-1 template under equal per-frame weights: the mean."""
    return block.astype(np.float64).mean(axis=0)


def oracle_scores(clip: LatentClip, cfg: WorldConfig,
                  script: ShotScript | None = None) -> dict:
    """Consistency scores in [0, 1] from least-squares per-shot templates.

    Identity pairing comes from the truth table (scripted clips) or from
    the script (generated clips); the templates themselves are always
    fitted from the clip's own data. Inter-shot scores are None when the
    clip has a single shot or no identity-sharing shot pair.
    """
    slices = clip.shot_slices()
    n_shots = len(slices)
    if clip.truth is not None:
        shot_ids = [(int(clip.truth[sl.start][0]), int(clip.truth[sl.start][1])) for sl in slices]
    else:
        if script is None:
            raise ValueError("generated clips need the script for identity pairing")
        if len(script.shots) != n_shots:
            raise ValueError("script/clip shot count mismatch")
        shot_ids = [(s.scene_id, s.subject_id) for s in script.shots]

    sc, su = cfg.scene_channels, cfg.subject_channels
    scene_blocks = [clip.data[sl, sc].reshape(sl.stop - sl.start, -1) for sl in slices]
    subj_blocks = [clip.data[sl, su].reshape(sl.stop - sl.start, -1) for sl in slices]
    scene_templates = [_fit_template(b) for b in scene_blocks]
    subj_templates = [_fit_template(b) for b in subj_blocks]

    def intra(blocks, templates):
        vals = []
        for b, t in zip(blocks, templates):
            vals.extend(_clip01(_cos(f, t)) for f in b)
        return float(np.mean(vals))

    scores = {
        "intra_subject": intra(subj_blocks, subj_templates),
        "intra_background": intra(scene_blocks, scene_templates),
        "inter_subject": None,
        "inter_background": None,
        "inter_semantic": None,
    }

    if n_shots >= 2:
        subj_pairs = [(i, j) for i in range(n_shots) for j in range(i + 1, n_shots)
                      if shot_ids[i][1] == shot_ids[j][1]]
        scene_pairs = [(i, j) for i in range(n_shots) for j in range(i + 1, n_shots)
                       if shot_ids[i][0] == shot_ids[j][0]]
        if subj_pairs:
            scores["inter_subject"] = float(np.mean(
                [_clip01(_cos(subj_templates[i], subj_templates[j])) for i, j in subj_pairs]))
        if scene_pairs:
            scores["inter_background"] = float(np.mean(
                [_clip01(_cos(scene_templates[i], scene_templates[j])) for i, j in scene_pairs]))
        sigs = [np.concatenate([scene_templates[i], subj_templates[i]])
                for i in range(n_shots)]
        scores["inter_semantic"] = float(np.mean(
            [_clip01(_cos(sigs[i], sigs[i + 1])) for i in range(n_shots - 1)]))
    return scores


# -- dataset files ----------------------------------------------------------------

def save_clip(path: str | Path, clip: LatentClip) -> None:
    f, c, h, w = clip.data.shape
    truth = clip.truth if clip.truth is not None else np.zeros((f, 2), dtype=np.uint32)
    bounds = np.asarray(clip.shot_boundaries, dtype=np.uint32)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", f, c, h, w))
        fh.write(clip.data.astype("<f4").tobytes())
        fh.write(np.uint8(1 if clip.truth is not None else 0).tobytes())
        fh.write(truth.astype("<u4").tobytes())
        fh.write(struct.pack("<I", len(bounds)))
        fh.write(bounds.astype("<u4").tobytes())


def load_clip(path: str | Path) -> LatentClip:
    with open(path, "rb") as fh:
        magic = fh.read(16)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic")
        f, c, h, w = struct.unpack("<4I", fh.read(16))
        data = np.frombuffer(fh.read(4 * f * c * h * w), dtype="<f4").reshape(f, c, h, w).copy()
        has_truth = bool(np.frombuffer(fh.read(1), dtype=np.uint8)[0])
        truth = np.frombuffer(fh.read(8 * f), dtype="<u4").reshape(f, 2).copy()
        (nb,) = struct.unpack("<I", fh.read(4))
        bounds = np.frombuffer(fh.read(4 * nb), dtype="<u4").tolist()
    return LatentClip(data=data, shot_boundaries=[int(b) for b in bounds],
                      truth=truth if has_truth else None)


def save_dataset(dirpath: str | Path, clips: list[LatentClip], scripts: list[ShotScript],
                 meta: dict | None = None) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    for i, clip in enumerate(clips):
        save_clip(d / f"clip_{i:05d}.bin", clip)
    manifest = {"n_clips": len(clips), "scripts": [s.to_dict() for s in scripts],
                "meta": meta or {}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(dirpath: str | Path) -> tuple[list[LatentClip], list[ShotScript], dict]:
    d = Path(dirpath)
    manifest = json.loads((d / "manifest.json").read_text())
    scripts = [ShotScript.from_dict(s) for s in manifest["scripts"]]
    clips = [load_clip(d / f"clip_{i:05d}.bin") for i in range(manifest["n_clips"])]
    return clips, scripts, manifest.get("meta", {})


def build_dataset(cfg: WorldConfig, n_clips: int, seed: int, noise_level: float,
                  n_shots_range: tuple[int, int] = (3, 5),
                  shot_frames: int | None = None) -> tuple[list[LatentClip], list[ShotScript]]:
    """Seeded corpus of multi-shot clips with persistent subjects."""
    rng = np.random.default_rng(seed)
    bank = PatternBank(cfg)
    clips, scripts = [], []
    for i in range(n_clips):
        n_shots = int(rng.integers(n_shots_range[0], n_shots_range[1] + 1))
        script = random_script(cfg, rng, n_shots, shot_frames)
        clips.append(synth_clip(script, seed=int(rng.integers(0, 2 ** 31)),
                                noise_level=noise_level, cfg=cfg, bank=bank))
        scripts.append(script)
    return clips, scripts
