"""Teacher training objective and multi-step sampling."""

import numpy as np
import pytest

from nextshot.model import ModelConfig, init_params, per_frame_t, patchify, forward_velocity, frame_concat, context_meta, target_meta, unpatchify
from nextshot.nd import Tensor, mse
from nextshot.teacher import (
    DenoiseSchedule, TeacherConfig, TrainingDiverged, batch_sequences, euler_rollout,
    example_pool, make_example, model_velocity_fn, rf_loss, teacher_generate_multishot,
    teacher_sample, train_teacher,
)
from nextshot.toyworld import WorldConfig, build_dataset, make_script, synth_clip

WCFG = WorldConfig()


def small_model_cfg(**kw):
    base = dict(channels=8, height=4, width=4, patch=2, d_model=16, n_heads=2,
                n_blocks=1, d_ff=32, vocab_size=WCFG.vocab_size, chunk_frames=3,
                global_chunks=2, local_chunks=7, f_context=6)
    base.update(kw)
    return ModelConfig(**base)


def small_world():
    return WorldConfig(height=4, width=4)


# -- schedule ---------------------------------------------------------------

def test_schedule_validation():
    DenoiseSchedule([1.0, 0.5, 0.25])
    with pytest.raises(ValueError):
        DenoiseSchedule([0.9, 0.5])
    with pytest.raises(ValueError):
        DenoiseSchedule([1.0, 0.5, 0.5])
    with pytest.raises(ValueError):
        DenoiseSchedule([1.0, 0.0])


def test_schedule_uniform():
    s = DenoiseSchedule.uniform(16)
    assert s.count == 16
    assert s.steps[0] == 1.0
    assert s.steps[-1] == pytest.approx(1 / 16)


# -- examples ------------------------------------------------------------------

def test_make_example_target_zero_empty_context():
    wc = small_world()
    script = make_script(wc, [(0, 1, 0, 9), (1, 1, 1, 9)])
    clip = synth_clip(script, seed=0, noise_level=0.0, cfg=wc)
    ex = make_example(clip, script, 0)
    assert ex.context.n_frames == 0
    assert ex.target.shape[0] == 9


def test_make_example_five_shot_plan():
    wc = small_world()
    script = make_script(wc, [(j % 3, 1, 0, 9) if j % 3 != (j - 1) % 3 else (2, 1, 0, 9)
                              for j in range(5)])
    clip = synth_clip(script, seed=1, noise_level=0.0, cfg=wc)
    ex = make_example(clip, script, 4, f_context=6)
    counts = {}
    for s, _ in ex.context.source:
        counts[s] = counts.get(s, 0) + 1
    assert [counts.get(j, 0) for j in range(4)] == [1, 1, 1, 3]
    assert ex.context.caption_id == [0, 1, 2, 3, 3, 3]


def test_make_example_deterministic():
    wc = small_world()
    script = make_script(wc, [(0, 1, 0, 9), (1, 1, 1, 9), (2, 1, 0, 9)])
    clip = synth_clip(script, seed=2, noise_level=0.05, cfg=wc)
    a = make_example(clip, script, 2)
    b = make_example(clip, script, 2)
    assert np.array_equal(a.context.frames, b.context.frames)
    assert a.context.source == b.context.source


# -- loss -------------------------------------------------------------------------

def test_rf_loss_zero_when_velocity_matches():
    # Zero-head model predicts v = 0; choosing z = x makes the true velocity
    # zero as well, so the loss vanishes.
    wc = small_world()
    cfg = small_model_cfg()
    params = init_params(cfg, 0)
    script = make_script(wc, [(0, 1, 0, 9)])
    clip = synth_clip(script, seed=3, noise_level=0.0, cfg=wc)
    ex = make_example(clip, script, 0)
    loss = rf_loss(params, [ex], t=np.array([0.5]), noise=ex.target[None].copy())
    assert float(loss.data) == pytest.approx(0.0, abs=1e-10)


def test_rf_loss_zero_model_matches_monte_carlo():
    # With v = 0 the loss is E[(z - x)^2]; for unit-variance data that is
    # Var(z) + Var(x) = 2 per element.
    wc = small_world()
    cfg = small_model_cfg()
    params = init_params(cfg, 0)
    script = make_script(wc, [(0, 1, 0, 9)])
    clip = synth_clip(script, seed=4, noise_level=0.0, cfg=wc)
    rng = np.random.default_rng(5)
    losses = []
    for trial in range(8):
        ex = make_example(clip, script, 0)
        ex.target = rng.standard_normal(ex.target.shape).astype(np.float32)
        noise = rng.standard_normal((1,) + ex.target.shape).astype(np.float32)
        losses.append(float(rf_loss(params, [ex], np.array([0.5]), noise).data))
    assert np.mean(losses) == pytest.approx(2.0, abs=0.15)


def test_rf_loss_excludes_context_but_gradients_flow():
    wc = small_world()
    cfg = small_model_cfg()
    params = init_params(cfg, 1)
    params.tensors["head.w"].data[:] = 0.1
    script = make_script(wc, [(0, 1, 0, 9), (1, 1, 1, 9)])
    clip = synth_clip(script, seed=6, noise_level=0.0, cfg=wc)
    ex = make_example(clip, script, 1)
    rng = np.random.default_rng(7)
    t = np.array([0.5], dtype=np.float32)
    noise = rng.standard_normal((1,) + ex.target.shape).astype(np.float32)

    # manual target-only reduction equals rf_loss
    x = ex.target[None]
    x_t = 0.5 * x + 0.5 * noise
    seq, caps = batch_sequences([ex], x_t, cfg)
    t_frames = per_frame_t(seq.meta, t, 1)
    vel = forward_velocity(params, seq, t_frames, "bidirectional", caps)
    manual = float(mse(vel.data, patchify(noise - x, cfg.patch).data.data).data)
    got = float(rf_loss(params, [ex], t, noise).data)
    assert got == pytest.approx(manual, rel=1e-6)

    # conditioning is differentiable: gradient reaches context frames
    ctx = Tensor(ex.context.frames[None], requires_grad=True)
    ctx_seq = patchify(ctx, cfg.patch, context_meta(ex.context.source))
    tgt_seq = patchify(Tensor(x_t.astype(np.float32)), cfg.patch,
                       target_meta(9, 1, 1))
    seq2 = frame_concat(ctx_seq, tgt_seq)
    caps2 = ex.caption_rows[seq2.meta.caption_id][None]
    vel2 = forward_velocity(params, seq2, per_frame_t(seq2.meta, t, 1),
                            "bidirectional", caps2)
    loss2 = mse(vel2.data, patchify(noise - x, cfg.patch).data.data)
    loss2.backward()
    assert ctx.grad is not None and np.abs(ctx.grad).max() > 0


def test_rf_loss_rejects_bad_t():
    wc = small_world()
    cfg = small_model_cfg()
    params = init_params(cfg, 0)
    script = make_script(wc, [(0, 1, 0, 9)])
    clip = synth_clip(script, seed=8, noise_level=0.0, cfg=wc)
    ex = make_example(clip, script, 0)
    with pytest.raises(ValueError):
        rf_loss(params, [ex], np.array([1.0]), ex.target[None].copy())


# -- training ----------------------------------------------------------------------

def _tiny_dataset(wc, n=6):
    return build_dataset(wc, n_clips=n, seed=3, noise_level=0.05,
                         n_shots_range=(2, 2), shot_frames=9)


def test_train_teacher_lr_zero_keeps_params():
    wc = small_world()
    cfg = small_model_cfg()
    clips, scripts = _tiny_dataset(wc)
    params = init_params(cfg, 5)
    before = {k: v.data.copy() for k, v in params.tensors.items()}
    out, _ = train_teacher(clips, scripts, cfg, TeacherConfig(steps=5, batch=2, lr=0.0),
                           params=params)
    for k, v in out.tensors.items():
        assert np.array_equal(v.data, before[k])


def test_train_teacher_3d_only_freezes_rest():
    # 3d_only is a fine-tune mode: start from a model whose output head is
    # already non-degenerate so gradients reach the attention stack.
    wc = small_world()
    cfg = small_model_cfg()
    clips, scripts = _tiny_dataset(wc)
    params = init_params(cfg, 6)
    params.tensors["head.w"].data[:] = np.random.default_rng(0).standard_normal(
        params["head.w"].shape).astype(np.float32) * 0.2
    before = {k: v.data.copy() for k, v in params.tensors.items()}
    out, _ = train_teacher(clips, scripts, cfg,
                           TeacherConfig(steps=8, batch=2, lr=1e-3, trainable="3d_only"),
                           params=params)
    changed = {k for k in out.tensors if not np.array_equal(out[k].data, before[k])}
    assert changed and all(".attn." in k for k in changed)
    assert np.array_equal(out["blocks.0.ffn.w1"].data, before["blocks.0.ffn.w1"])


def test_train_teacher_loss_decreases():
    wc = small_world()
    cfg = small_model_cfg()
    clips, scripts = _tiny_dataset(wc)
    _, hist = train_teacher(clips, scripts, cfg,
                            TeacherConfig(steps=120, batch=4, lr=3e-3, log_every=10))
    assert hist["loss"][-1] < hist["loss"][0]


def test_train_teacher_divergence_guard():
    wc = small_world()
    cfg = small_model_cfg()
    clips, scripts = _tiny_dataset(wc)
    bad = TeacherConfig(steps=50, batch=2, lr=0.0, divergence_factor=0.01,
                        divergence_patience=3)
    with pytest.raises(TrainingDiverged):
        train_teacher(clips, scripts, cfg, bad)


def test_train_teacher_empty_dataset():
    cfg = small_model_cfg()
    with pytest.raises(ValueError):
        train_teacher([], [], cfg, TeacherConfig(steps=1))


# -- sampling -----------------------------------------------------------------------

def test_one_step_schedule_is_single_euler_step():
    wc = small_world()
    cfg = small_model_cfg()
    params = init_params(cfg, 7)
    params.tensors["head.w"].data[:] = np.random.default_rng(0).standard_normal(
        params["head.w"].shape).astype(np.float32) * 0.2
    script = make_script(wc, [(0, 1, 0, 9)])
    rows = np.asarray([list(script.global_caption) + list(script.shots[0].caption)])
    from nextshot.sampler import ContextPack
    pack = ContextPack(frames=np.zeros((0, 8, 4, 4), np.float32), source=[])

    out = teacher_sample(params, pack, rows, 0, 9, DenoiseSchedule([1.0]), seed=9)
    rng = np.random.default_rng([9, 0])
    z = rng.standard_normal((9, 8, 4, 4)).astype(np.float32)
    v_fn = model_velocity_fn(params, pack, rows, 0, 9)
    want = z - v_fn(z, 1.0)
    assert np.allclose(out, want, atol=1e-6)


def test_two_step_schedule_hand_integrated():
    # Frozen linear toy model v(x, t) = 0.3 x + 0.1: two Euler steps of 0.5.
    rng = np.random.default_rng(10)
    z = rng.standard_normal((2, 3)).astype(np.float64)
    v = lambda x, t: 0.3 * x + 0.1
    got = euler_rollout(v, z, DenoiseSchedule([1.0, 0.5]))
    x1 = z - 0.5 * (0.3 * z + 0.1)
    x2 = x1 - 0.5 * (0.3 * x1 + 0.1)
    assert np.allclose(got, x2, atol=1e-12)


def test_euler_first_order_convergence():
    # dx/dt = x integrated 1 -> 0 has exact solution x0 = x1 * e^{-1};
    # halving the step size should halve the error.
    x1 = np.array([2.0])
    exact = x1 * np.exp(-1.0)
    errs = []
    for n in (8, 16, 32):
        got = euler_rollout(lambda x, t: x, x1, DenoiseSchedule.uniform(n))
        errs.append(abs(float(got[0] - exact[0])))
    assert 1.5 < errs[0] / errs[1] < 3.0
    assert 1.5 < errs[1] / errs[2] < 3.0


def test_teacher_sample_deterministic():
    wc = small_world()
    cfg = small_model_cfg()
    params = init_params(cfg, 8)
    script = make_script(wc, [(0, 1, 0, 9)])
    rows = np.asarray([list(script.global_caption) + list(script.shots[0].caption)])
    from nextshot.sampler import ContextPack
    pack = ContextPack(frames=np.zeros((0, 8, 4, 4), np.float32), source=[])
    a = teacher_sample(params, pack, rows, 0, 9, DenoiseSchedule.uniform(4), seed=11)
    b = teacher_sample(params, pack, rows, 0, 9, DenoiseSchedule.uniform(4), seed=11)
    assert np.array_equal(a, b)


def test_teacher_multishot_shapes():
    wc = small_world()
    cfg = small_model_cfg()
    params = init_params(cfg, 9)
    script = make_script(wc, [(0, 1, 0, 9), (1, 1, 1, 9), (2, 1, 0, 9)])
    clip = teacher_generate_multishot(params, script, DenoiseSchedule.uniform(2), seed=12)
    assert clip.data.shape == (27, 8, 4, 4)
    assert clip.shot_boundaries == [9, 18]
    assert clip.truth is None
