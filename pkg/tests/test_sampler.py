"""Context budgeting and sampling."""

import numpy as np
import pytest

from nextshot.sampler import (
    ContextBudget, bind_captions, plan_budget, sample_context,
    sample_context_strategy, spaced_indices,
)
from nextshot.toyworld import InvalidScriptError, WorldConfig, make_script

CFG = WorldConfig()


def _shots(*lengths, c=2, h=2, w=2):
    rng = np.random.default_rng(0)
    return [rng.standard_normal((L, c, h, w)).astype(np.float32) for L in lengths]


def test_plan_budget_cases():
    assert plan_budget(ContextBudget(6, 3)) == [2, 2, 2]
    assert plan_budget(ContextBudget(6, 4)) == [1, 1, 1, 3]
    assert plan_budget(ContextBudget(6, 1)) == [6]


def test_plan_budget_exhaustive_properties():
    # Exhaustive over the full configured grid: totals, remainder placement,
    # determinism.
    for f_context in range(1, 17):
        for s_hist in range(1, 11):
            plan = plan_budget(ContextBudget(f_context, s_hist))
            assert len(plan) == s_hist
            assert sum(plan) == f_context
            assert max(plan) - min(plan) <= f_context % s_hist
            base = f_context // s_hist
            assert plan[:-1] == [base] * (s_hist - 1)
            assert plan[-1] == base + f_context % s_hist
            assert plan == plan_budget(ContextBudget(f_context, s_hist))


def test_budget_validation():
    with pytest.raises(ValueError):
        ContextBudget(0, 1)
    with pytest.raises(ValueError):
        ContextBudget(6, 0)


def test_spaced_indices_include_first_frame():
    assert spaced_indices(9, 3) == [0, 4, 8]
    assert spaced_indices(9, 1) == [0]
    assert spaced_indices(27, 2) == [0, 26]
    for L in range(1, 30):
        for n in range(1, L + 1):
            idx = spaced_indices(L, n)
            assert idx[0] == 0
            assert len(set(idx)) == n
            assert idx == sorted(idx)
            assert all(0 <= i < L for i in idx)


def test_sample_context_sources_ordered():
    pack = sample_context(_shots(27, 27), [3, 3])
    assert pack.n_frames == 6
    assert [s for s, _ in pack.source] == [0, 0, 0, 1, 1, 1]
    pack.validate()


def test_sample_context_short_shot_redistributes():
    # First shot only has 2 frames for a plan of 3: surplus lands on the
    # most recent shot.
    pack = sample_context(_shots(2, 27), [3, 3])
    assert pack.n_frames == 6
    counts = {0: 0, 1: 0}
    for s, _ in pack.source:
        counts[s] += 1
    assert counts == {0: 2, 1: 4}


def test_sample_context_allows_short_pack():
    pack = sample_context(_shots(2, 2), [3, 3])
    assert pack.n_frames == 4


def test_sample_context_deterministic():
    shots = _shots(9, 27)
    a = sample_context(shots, [2, 4])
    b = sample_context(shots, [2, 4])
    assert np.array_equal(a.frames, b.frames)
    assert a.source == b.source


def test_sample_context_plan_mismatch():
    with pytest.raises(ValueError):
        sample_context(_shots(9), [3, 3])


def test_bind_captions_maps_source_shots():
    script = make_script(CFG, [(0, 1, 0, 9), (1, 1, 1, 9), (2, 1, 2, 9)])
    pack = sample_context(_shots(9, 9), [3, 3])
    pack = bind_captions(pack, script)
    assert pack.caption_id == [0, 0, 0, 1, 1, 1]


def test_bind_captions_single_shot_history():
    script = make_script(CFG, [(0, 1, 0, 9), (1, 1, 1, 9)])
    pack = bind_captions(sample_context(_shots(9), [6]), script)
    assert set(pack.caption_id) == {0}


def test_bind_captions_empty_pack():
    script = make_script(CFG, [(0, 1, 0, 9)])
    pack = bind_captions(sample_context([], []), script)
    assert pack.caption_id == []


def test_bind_captions_missing_shot():
    script = make_script(CFG, [(0, 1, 0, 9)])
    pack = sample_context(_shots(9, 9), [1, 1])
    with pytest.raises(InvalidScriptError):
        bind_captions(pack, script)


def test_strategy_variants_exist_for_comparison():
    shots = _shots(9, 9, 9)
    budget = ContextBudget(6, 3)
    dyn = sample_context_strategy(shots, budget, "dynamic")
    first = sample_context_strategy(shots, budget, "first_only")
    fl = sample_context_strategy(shots, budget, "first_last")
    assert dyn.n_frames == 6
    assert first.source == [(0, 0), (1, 0), (2, 0)]
    assert fl.source == [(0, 0), (0, 8), (1, 0), (1, 8), (2, 0), (2, 8)]
    with pytest.raises(ValueError):
        sample_context_strategy(shots, budget, "middle_only")
