"""Sparse-history conditioning: context budgeting, frame sampling, captions.

A fixed frame budget is split evenly over historical shots, remainder to
the most recent shot. Within each shot the picks are evenly spaced and
include frame 0. All functions are pure and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .toyworld import InvalidScriptError, ShotScript


@dataclass
class ContextBudget:
    f_context: int = 6
    s_hist: int = 1

    def __post_init__(self):
        if self.f_context < 1:
            raise ValueError("f_context must be >= 1")
        if self.s_hist < 1:
            raise ValueError("s_hist must be >= 1")


@dataclass
class ContextPack:
    frames: np.ndarray                     # [n, c, h, w]
    source: list[tuple[int, int]]          # (shot_index, frame_index) per frame
    caption_id: list[int] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    def validate(self) -> None:
        assert len(self.source) == self.n_frames
        assert self.source == sorted(self.source), "sources must ascend in (shot, frame)"


def empty_pack(channels: int, height: int, width: int) -> ContextPack:
    return ContextPack(frames=np.zeros((0, channels, height, width), dtype=np.float32),
                       source=[], caption_id=[])


def plan_budget(budget: ContextBudget) -> list[int]:
    """Per-historical-shot frame counts: floor split, remainder on the most
    recent shot, summing exactly to the budget."""
    base = budget.f_context // budget.s_hist
    rem = budget.f_context % budget.s_hist
    counts = [base] * budget.s_hist
    counts[-1] += rem
    return counts


def spaced_indices(length: int, count: int) -> list[int]:
    """`count` evenly spaced frame indices in [0, length), always including 0."""
    if count <= 0:
        return []
    if count == 1:
        return [0]
    return [int(round(i * (length - 1) / (count - 1))) for i in range(count)]


def sample_context(history: list[np.ndarray], plan: list[int]) -> ContextPack:
    """Pick frames from historical shots per plan.

    Shots shorter than their planned count are clamped; the surplus moves
    to the most recent shot. If history cannot cover the full budget the
    pack simply comes back shorter.
    """
    if len(plan) != len(history):
        raise ValueError(f"plan covers {len(plan)} shots, history has {len(history)}")
    counts = [min(int(p), shot.shape[0]) for p, shot in zip(plan, history)]
    surplus = sum(plan) - sum(counts)
    if surplus > 0 and history:
        counts[-1] = min(counts[-1] + surplus, history[-1].shape[0])

    frames, source = [], []
    for shot_idx, (shot, n) in enumerate(zip(history, counts)):
        for fi in spaced_indices(shot.shape[0], n):
            frames.append(shot[fi])
            source.append((shot_idx, fi))
    if not frames:
        c, h, w = (history[0].shape[1:] if history else (0, 0, 0))
        return ContextPack(frames=np.zeros((0, c, h, w), dtype=np.float32), source=[])
    return ContextPack(frames=np.stack(frames).astype(np.float32), source=source)


def bind_captions(pack: ContextPack, script: ShotScript) -> ContextPack:
    """Attach each context frame's source-shot caption id (the global
    caption rides along separately at attention time)."""
    ids = []
    for shot_idx, _ in pack.source:
        if not (0 <= shot_idx < len(script.shots)):
            raise InvalidScriptError(f"context source shot {shot_idx} not in script")
        if not script.shots[shot_idx].caption:
            raise InvalidScriptError(f"shot {shot_idx} has no caption")
        ids.append(shot_idx)
    pack.caption_id = ids
    return pack


def sample_context_strategy(history: list[np.ndarray], budget: ContextBudget,
                            strategy: str = "dynamic") -> ContextPack:
    """Context sampling with the ablation variants as toggles.

    dynamic is the default; first_only / first_last exist for comparison
    fixtures and keep at most `f_context` frames by dropping the oldest.
    """
    if strategy == "dynamic":
        return sample_context(history, plan_budget(budget))
    if strategy == "first_only":
        picks = [(j, 0) for j in range(len(history))]
    elif strategy == "first_last":
        picks = []
        for j, shot in enumerate(history):
            picks.append((j, 0))
            if shot.shape[0] > 1:
                picks.append((j, shot.shape[0] - 1))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    picks = picks[-budget.f_context:]
    frames = np.stack([history[j][fi] for j, fi in picks]).astype(np.float32)
    return ContextPack(frames=frames, source=picks)
