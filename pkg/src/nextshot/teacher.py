"""Bidirectional next-shot teacher: rectified-flow training and sampling.

Training pairs a sampled sparse-context pack with one noised target shot;
noise lands on target tokens only and the loss reduces over target tokens
only. Sampling is Euler integration of the learned velocity field from
t = 1 down to 0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nd
from .nd import Tensor
from .model import (
    DualCache, FrameMeta, ModelConfig, ModelParams, TokenSeq, caption_rows_from_script,
    context_meta, forward_velocity, frame_concat, init_params, patchify, per_frame_t,
    target_meta, unpatchify,
)
from .sampler import ContextBudget, ContextPack, bind_captions, empty_pack, plan_budget, sample_context
from .toyworld import LatentClip, ShotScript


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DenoiseSchedule:
    steps: list[float]

    def __post_init__(self):
        s = list(self.steps)
        if not s or s[0] != 1.0:
            raise ValueError("schedule must start at t = 1.0")
        if any(not (0.0 < t <= 1.0) for t in s):
            raise ValueError("schedule timesteps must lie in (0, 1]")
        if any(b >= a for a, b in zip(s, s[1:])):
            raise ValueError("schedule must strictly decrease")
        self.steps = [float(t) for t in s]

    @classmethod
    def uniform(cls, n: int) -> "DenoiseSchedule":
        return cls([(n - i) / n for i in range(n)])

    @property
    def count(self) -> int:
        return len(self.steps)


@dataclass
class TrainExample:
    context: ContextPack
    target: np.ndarray              # [f, c, h, w]
    target_shot: int
    caption_rows: np.ndarray        # [n_shots, n_cap]

    def meta(self) -> tuple[FrameMeta | None, FrameMeta]:
        ctx_meta = context_meta(self.context.source) if self.context.n_frames else None
        tgt_meta = target_meta(self.target.shape[0], phase=self.target_shot,
                               caption_id=self.target_shot)
        return ctx_meta, tgt_meta


def make_example(clip: LatentClip, script: ShotScript, target_shot: int,
                 f_context: int = 6) -> TrainExample:
    """Next-shot training pair; target 0 trains the from-scratch path."""
    if not (0 <= target_shot < len(script.shots)):
        raise ValueError(f"target_shot {target_shot} outside script")
    slices = clip.shot_slices()
    if target_shot == 0:
        c, h, w = clip.data.shape[1:]
        pack = empty_pack(c, h, w)
    else:
        history = [clip.data[slices[j]] for j in range(target_shot)]
        plan = plan_budget(ContextBudget(f_context, target_shot))
        pack = bind_captions(sample_context(history, plan), script)
    return TrainExample(context=pack, target=clip.data[slices[target_shot]].copy(),
                        target_shot=target_shot,
                        caption_rows=caption_rows_from_script(script))


def batch_sequences(examples: list[TrainExample], x_target: np.ndarray,
                    cfg: ModelConfig) -> tuple[TokenSeq, np.ndarray]:
    """Batched [context | target] token sequence and caption ids.

    All examples must share context length and target length.
    """
    ex0 = examples[0]
    ctx_meta, tgt_meta = ex0.meta()
    tgt_seq = patchify(Tensor(x_target), cfg.patch, tgt_meta)
    if ctx_meta is not None:
        ctx_lat = np.stack([ex.context.frames for ex in examples])
        ctx_seq = patchify(Tensor(ctx_lat), cfg.patch, ctx_meta)
        seq = frame_concat(ctx_seq, tgt_seq)
    else:
        seq = tgt_seq
    caps = np.stack([ex.caption_rows[seq.meta.caption_id] for ex in examples])
    return seq, caps


def rf_loss(params: ModelParams, examples: list[TrainExample], t: np.ndarray,
            noise: np.ndarray) -> Tensor:
    """Velocity-matching loss, reduced over target tokens only.

    x_t = (1 - t) x + t z on the target shot; context frames stay clean.
    """
    t = np.asarray(t, dtype=np.float32)
    if np.any(t <= 0.0) or np.any(t >= 1.0):
        raise ValueError("training timesteps must lie strictly inside (0, 1)")
    cfg = params.cfg
    x = np.stack([ex.target for ex in examples])              # [b, f, c, h, w]
    z = noise.astype(np.float32)
    tb = t.reshape(-1, 1, 1, 1, 1)
    x_t = (1.0 - tb) * x + tb * z
    v_true = z - x

    seq, caps = batch_sequences(examples, x_t, cfg)
    t_frames = per_frame_t(seq.meta, t, len(examples))
    vel = forward_velocity(params, seq, t_frames, "bidirectional", caps)
    target_tokens = patchify(v_true, cfg.patch).data.data
    loss = nd.mse(vel.data, target_tokens)
    if not np.isfinite(loss.data):
        raise TrainingDiverged("non-finite training loss")
    return loss


@dataclass
class TeacherConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    f_context: int = 6
    trainable: str = "all"            # all | 3d_only (fine-tune mode)
    schedule_steps: int = 16
    t_lo: float = 0.001
    t_hi: float = 0.999
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    log_every: int = 50

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, strict: bool = False) -> "TeacherConfig":
        if strict:
            missing = {f for f in cls.__dataclass_fields__} - set(d)
            if missing:
                raise ValueError(f"config missing fields: {sorted(missing)}")
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def example_pool(clips: list[LatentClip], scripts: list[ShotScript],
                 f_context: int) -> dict[tuple, list[TrainExample]]:
    """All (clip, target_shot) pairs bucketed by sequence shape."""
    pool: dict[tuple, list[TrainExample]] = {}
    for clip, script in zip(clips, scripts):
        for j in range(len(script.shots)):
            ex = make_example(clip, script, j, f_context)
            key = (ex.context.n_frames, ex.target.shape[0], j)
            pool.setdefault(key, []).append(ex)
    return pool


def train_teacher(clips: list[LatentClip], scripts: list[ShotScript],
                  cfg: ModelConfig, tcfg: TeacherConfig,
                  params: ModelParams | None = None) -> tuple[ModelParams, dict]:
    """Adam on the rectified-flow objective over next-shot examples."""
    from .optim import Adam

    if not clips:
        raise ValueError("empty dataset")
    params = params if params is not None else init_params(cfg, tcfg.seed)
    pool = example_pool(clips, scripts, tcfg.f_context)
    buckets = sorted(pool.keys())
    weights = np.array([len(pool[k]) for k in buckets], dtype=np.float64)
    weights /= weights.sum()

    opt = Adam(params.tensors, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2,
               eps=tcfg.eps, trainable=params.trainable_names(tcfg.trainable))
    history = {"loss": [], "step": []}
    initial_loss = None
    bad_streak = 0

    for step in range(tcfg.steps):
        rng = np.random.default_rng([tcfg.seed, step])
        key = buckets[rng.choice(len(buckets), p=weights)]
        batch = [pool[key][i] for i in rng.choice(len(pool[key]), size=tcfg.batch)]
        t = rng.uniform(tcfg.t_lo, tcfg.t_hi, size=len(batch))
        noise = rng.standard_normal((len(batch),) + batch[0].target.shape).astype(np.float32)

        opt.zero_grad()
        loss = rf_loss(params, batch, t, noise)
        loss.backward()
        opt.step()

        val = float(loss.data)
        if initial_loss is None:
            initial_loss = val
        bad_streak = bad_streak + 1 if val > tcfg.divergence_factor * initial_loss else 0
        if bad_streak >= tcfg.divergence_patience:
            raise TrainingDiverged(
                f"loss {val:.3g} stayed above {tcfg.divergence_factor}x initial for "
                f"{tcfg.divergence_patience} steps")
        if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
            history["loss"].append(val)
            history["step"].append(step)
    return params, history


# -- sampling --------------------------------------------------------------------

def euler_rollout(v_fn, z: np.ndarray, schedule: DenoiseSchedule) -> np.ndarray:
    """Integrate dx/dt = v from t=1 to 0 with explicit Euler steps.

    v_fn(x, t) -> velocity array of x's shape. The last step lands exactly
    on the clean estimate (t = 0).
    """
    x = z.copy()
    ts = schedule.steps + [0.0]
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        v = v_fn(x, t_cur)
        x = x - (t_cur - t_next) * v
    return x


def model_velocity_fn(params: ModelParams, pack: ContextPack, caption_rows: np.ndarray,
                      target_shot: int, n_frames: int):
    """Bidirectional velocity closure over [context | target] for sampling."""
    cfg = params.cfg
    ctx_meta = context_meta(pack.source) if pack.n_frames else None
    tgt_meta = target_meta(n_frames, phase=target_shot, caption_id=target_shot)
    ctx_seq = None
    if ctx_meta is not None:
        ctx_seq = patchify(Tensor(pack.frames[None]), cfg.patch, ctx_meta)

    def v_fn(x: np.ndarray, t: float) -> np.ndarray:
        tgt_seq = patchify(Tensor(x[None].astype(np.float32)), cfg.patch, tgt_meta)
        seq = frame_concat(ctx_seq, tgt_seq) if ctx_seq is not None else tgt_seq
        caps = caption_rows[seq.meta.caption_id][None]
        t_frames = per_frame_t(seq.meta, t, 1)
        vel = forward_velocity(params, seq, t_frames, "bidirectional", caps)
        lat = unpatchify(vel.data, cfg.channels, cfg.height, cfg.width, cfg.patch)
        return lat.data[0]

    return v_fn


def teacher_sample(params: ModelParams, pack: ContextPack, caption_rows: np.ndarray,
                   target_shot: int, n_frames: int, schedule: DenoiseSchedule,
                   seed: int) -> np.ndarray:
    """Deterministic multi-step generation of one shot, [f, c, h, w]."""
    cfg = params.cfg
    rng = np.random.default_rng([seed, target_shot])
    z = rng.standard_normal((n_frames, cfg.channels, cfg.height, cfg.width)).astype(np.float32)
    v_fn = model_velocity_fn(params, pack, caption_rows, target_shot, n_frames)
    with nd.no_grad():
        return euler_rollout(v_fn, z, schedule).astype(np.float32)


def teacher_generate_multishot(params: ModelParams, script: ShotScript,
                               schedule: DenoiseSchedule, seed: int,
                               f_context: int = 6) -> LatentClip:
    """Shot-by-shot teacher inference conditioned on its own prior shots."""
    cfg = params.cfg
    rows = caption_rows_from_script(script)
    shots: list[np.ndarray] = []
    for j, shot in enumerate(script.shots):
        if j == 0:
            pack = empty_pack(cfg.channels, cfg.height, cfg.width)
        else:
            plan = plan_budget(ContextBudget(f_context, j))
            pack = bind_captions(sample_context(shots, plan), script)
        shots.append(teacher_sample(params, pack, rows, j, shot.length_frames,
                                    schedule, seed))
    return LatentClip(data=np.concatenate(shots, axis=0), shot_boundaries=script.boundaries(),
                      truth=None)
