"""Evaluation of generated multi-shot clips against their scripts.

Scores consistency (oracle templates fitted from the generated data only),
shot-cut placement, prompt adherence via identity/action template matching,
and raw motion. Ground-truth latents of generated clips do not exist and
are never consulted; the script and the fixed pattern bank are the only
references.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .model import ModelParams
from .toyworld import LatentClip, PatternBank, ShotScript, WorldConfig, oracle_scores

SCHEMA_VERSION = 1

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "config", "clips", "aggregate"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "config": {"type": "object"},
        "clips": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["index", "n_shots", "scores"],
                "properties": {
                    "index": {"type": "integer"},
                    "n_shots": {"type": "integer", "minimum": 1},
                    "scores": {
                        "type": "object",
                        "required": ["intra_subject", "intra_background",
                                     "shot_cut_accuracy", "prompt_following",
                                     "dynamics"],
                        "additionalProperties": {
                            "type": ["number", "null"]},
                    },
                },
            },
        },
        "aggregate": {"type": "object",
                      "additionalProperties": {"type": ["number", "null"]}},
    },
}


@dataclass
class EvalConfig:
    kappa: float = 3.0
    tolerance_frames: int = 2
    seed: int = 0
    n_scripts: int = 32

    def to_dict(self) -> dict:
        return asdict(self)


# -- shot boundary detection ----------------------------------------------------

def frame_differences(clip: LatentClip) -> np.ndarray:
    flat = clip.data.reshape(clip.n_frames, -1).astype(np.float64)
    return np.linalg.norm(np.diff(flat, axis=0), axis=1)


def detect_cuts(clip: LatentClip, kappa: float = 3.0) -> list[int]:
    """Frame indices where adjacent-frame distance spikes above the robust
    within-clip level (median + kappa * scaled MAD)."""
    if clip.n_frames < 2:
        return []
    d = frame_differences(clip)
    med = float(np.median(d))
    sigma = 1.4826 * float(np.median(np.abs(d - med)))
    if sigma == 0.0:
        sigma = float(d.std())
    if sigma == 0.0:
        return []                      # constant clip
    return [int(i + 1) for i in np.where(d > med + kappa * sigma)[0]]


def cut_sweep(clip: LatentClip, kappas=(2.0, 3.0, 4.0)) -> dict[float, list[int]]:
    """Sensitivity log: detected cuts per threshold."""
    return {float(k): detect_cuts(clip, k) for k in kappas}


def shot_cut_accuracy(detected: list[int], scripted: list[int],
                      tolerance_frames: int = 2) -> float:
    """Harmonic mean of cut-count accuracy and the fraction of cuts matched
    within the tolerance (greedy nearest matching)."""
    if tolerance_frames < 0:
        raise ValueError("tolerance must be >= 0")
    nd_, ns = len(detected), len(scripted)
    if nd_ == 0 and ns == 0:
        return 1.0
    if nd_ == 0 or ns == 0:
        return 0.0
    count_acc = min(nd_, ns) / max(nd_, ns)

    remaining = list(scripted)
    matched = 0
    for d in sorted(detected):
        if not remaining:
            break
        nearest = min(remaining, key=lambda s: abs(s - d))
        if abs(nearest - d) <= tolerance_frames:
            matched += 1
            remaining.remove(nearest)
    frac = matched / max(nd_, ns)
    if count_acc == 0.0 or frac == 0.0:
        return 0.0
    return 2.0 * count_acc * frac / (count_acc + frac)


# -- prompt following -----------------------------------------------------------

def _fit_identity(block: np.ndarray, bank_patterns: np.ndarray) -> int:
    """Nearest bank pattern (by cosine) to the shot's mean template."""
    t = block.mean(axis=0)
    t = t / (np.linalg.norm(t) + 1e-12)
    flat = bank_patterns.reshape(len(bank_patterns), -1)
    flat = flat / np.linalg.norm(flat, axis=1, keepdims=True)
    return int(np.argmax(flat @ t))


def _fit_action(subj_block: np.ndarray, template: np.ndarray,
                freqs: tuple) -> int:
    """Best-fitting modulation frequency of the subject amplitude series."""
    denom = float(template @ template) + 1e-12
    series = subj_block @ template / denom
    n = len(series)
    i = np.arange(n)
    best, best_sse = 0, np.inf
    for a, w in enumerate(freqs):
        basis = np.stack([np.ones(n), np.sin(w * i), np.cos(w * i)], axis=1)
        coef, *_ = np.linalg.lstsq(basis, series, rcond=None)
        sse = float(((basis @ coef - series) ** 2).sum())
        if sse < best_sse:
            best, best_sse = a, sse
    return best


def prompt_following(clip: LatentClip, script: ShotScript, cfg: WorldConfig,
                     bank: PatternBank | None = None) -> dict:
    """Fraction of shots whose rendered identities match the caption ids.

    Scene and subject matches carry equal weight in the headline score;
    action (motion-frequency) accuracy is reported alongside.
    """
    bank = bank or PatternBank(cfg)
    slices = clip.shot_slices()
    if len(slices) != len(script.shots):
        raise ValueError("script/clip shot count mismatch")
    sc, su = cfg.scene_channels, cfg.subject_channels
    per_shot, action_hits = [], []
    for sl, shot in zip(slices, script.shots):
        scene_block = clip.data[sl, sc].reshape(sl.stop - sl.start, -1).astype(np.float64)
        subj_block = clip.data[sl, su].reshape(sl.stop - sl.start, -1).astype(np.float64)
        s_hat = _fit_identity(scene_block, bank.scene)
        u_hat = _fit_identity(subj_block, bank.subject)
        per_shot.append((float(s_hat == shot.scene_id) + float(u_hat == shot.subject_id)) / 2.0)
        a_hat = _fit_action(subj_block, bank.subject[shot.subject_id].ravel().astype(np.float64),
                            cfg.action_freqs)
        action_hits.append(float(a_hat == shot.action_id))
    return {"score": float(np.mean(per_shot)),
            "action_accuracy": float(np.mean(action_hits)),
            "per_shot": per_shot}


def dynamics_score(clip: LatentClip) -> float:
    """Mean within-shot adjacent-frame distance (raw, non-negative)."""
    d = frame_differences(clip)
    at_boundary = np.zeros(len(d), dtype=bool)
    for b in clip.shot_boundaries:
        at_boundary[b - 1] = True
    within = d[~at_boundary]
    return float(within.mean()) if len(within) else 0.0


# -- full evaluation ------------------------------------------------------------

def score_clip(clip: LatentClip, script: ShotScript, wcfg: WorldConfig,
               ecfg: EvalConfig, bank: PatternBank | None = None) -> dict:
    scores = oracle_scores(clip, wcfg, script=script if clip.truth is None else None)
    detected = detect_cuts(clip, ecfg.kappa)
    pf = prompt_following(clip, script, wcfg, bank)
    return {
        "intra_subject": scores["intra_subject"],
        "intra_background": scores["intra_background"],
        "inter_subject": scores["inter_subject"],
        "inter_background": scores["inter_background"],
        "inter_semantic": scores["inter_semantic"],
        "shot_cut_accuracy": shot_cut_accuracy(detected, script.boundaries(),
                                               ecfg.tolerance_frames),
        "prompt_following": pf["score"],
        "action_accuracy": pf["action_accuracy"],
        "dynamics": dynamics_score(clip),
    }


def aggregate_scores(per_clip: list[dict]) -> dict:
    keys = per_clip[0].keys() if per_clip else []
    agg = {}
    for k in keys:
        vals = [c[k] for c in per_clip if c[k] is not None]
        agg[k] = float(np.mean(vals)) if vals else None
    return agg


def run_eval(params: ModelParams, wcfg: WorldConfig, scripts: list[ShotScript],
             ecfg: EvalConfig, engine_cfg=None, out_path=None) -> dict:
    """Generate every script offline through the engine, score, and report."""
    import jsonschema

    from .engine import EngineConfig, generate_script

    bank = PatternBank(wcfg)
    engine_cfg = engine_cfg or EngineConfig(preview=False)
    clip_reports = []
    for i, script in enumerate(scripts):
        clip, _ = generate_script(params, wcfg, script, engine_cfg,
                                  seed=ecfg.seed + i)
        assert clip.truth is None
        scores = score_clip(clip, script, wcfg, ecfg, bank)
        clip_reports.append({"index": i, "n_shots": len(script.shots),
                             "scores": scores})
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": {"eval": ecfg.to_dict(), "model": params.cfg.to_dict()},
        "clips": clip_reports,
        "aggregate": aggregate_scores([c["scores"] for c in clip_reports]),
    }
    jsonschema.validate(report, REPORT_SCHEMA)
    if out_path is not None:
        from pathlib import Path
        Path(out_path).write_text(json.dumps(report, indent=1))
    return report


def format_report(report: dict) -> str:
    """Human-readable score table."""
    agg = report["aggregate"]
    lines = [f"{'metric':<22}{'mean':>10}", "-" * 32]
    for k, v in agg.items():
        lines.append(f"{k:<22}{v:>10.4f}" if v is not None else f"{k:<22}{'--':>10}")
    lines.append(f"clips: {len(report['clips'])}")
    return "\n".join(lines)
