import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from partlayout.errors import MissingReferenceError, SamplerStepError, ShapeMismatchError
from partlayout.sampler import (
    AnnealState, KvCache, LatentBlock, SamplerConfig, anneal_step, apply_freeze, apply_tsr, blend_kv, cfg_combine,
    kv_schedule, read_latents, rf_step, sample, write_latents,
)


def blocks(rng, n=2, rows=8, dim=4):
    return [LatentBlock(i + 1, rng.normal(size=(rows, dim))) for i in range(n)]


def linear_field(target):
    """Velocity that carries x to ``target`` exactly by t = 1."""
    goal = {b.part_id: b.tokens for b in target}

    def denoiser(x, t, alpha, branch):
        return [(goal[b.part_id] - b.tokens) / (1.0 - t) for b in x]
    return denoiser


def contracting(x, t, alpha, branch):
    return [-b.tokens for b in x]


# ------------------------------------------------------------------ rf_step


def test_rf_step_constant_field_reaches_target():
    rng = np.random.default_rng(0)
    x0, x1 = blocks(rng), blocks(rng)
    for steps in (1, 7, 50):
        x = x0
        for i in range(steps):
            x = rf_step(x, [b1.tokens - b0.tokens for b0, b1 in zip(x0, x1)], i / steps, 1 / steps)
        for a, b in zip(x, x1):
            assert np.allclose(a.tokens, b.tokens, atol=1e-9)


def test_rf_step_zero_field():
    x = blocks(np.random.default_rng(1))
    out = rf_step(x, [np.zeros_like(b.tokens) for b in x], 0.0, 0.1)
    assert all(np.array_equal(a.tokens, b.tokens) for a, b in zip(out, x))


def contracting_endpoint(x0, steps):
    x = x0
    for i in range(steps):
        x = rf_step(x, [-b.tokens for b in x], i / steps, 1 / steps)
    return x


def test_rf_step_contracting_ode():
    x0 = blocks(np.random.default_rng(2))
    errs = []
    for steps in (10, 50, 200):
        out = contracting_endpoint(x0, steps)
        errs.append(max(np.abs(a.tokens - math.exp(-1) * b.tokens).max() for a, b in zip(out, x0)))
    assert errs[1] <= 1e-2
    assert errs[0] > errs[1] > errs[2]


def test_rf_step_checks():
    x = blocks(np.random.default_rng(3))
    with pytest.raises(ShapeMismatchError):
        rf_step(x, [np.zeros((2, 2))] * 2, 0.0, 0.1)
    with pytest.raises(ValueError):
        rf_step(x, [b.tokens for b in x], 0.0, 0.0)
    with pytest.raises(ValueError):
        rf_step(x, [b.tokens for b in x], 0.95, 0.1)


def test_latent_block_rejects_non_finite():
    with pytest.raises(ValueError):
        LatentBlock(0, np.array([[np.nan]]))
    with pytest.raises(ValueError):
        LatentBlock(0, np.zeros((0, 4)))


# ---------------------------------------------------------------------- cfg


def test_cfg_endpoints_exact():
    rng = np.random.default_rng(4)
    p, n = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert np.array_equal(cfg_combine(p, n, 1.0), p)
    assert np.array_equal(cfg_combine(p, n, 0.0), n)


def test_cfg_default_scale_arithmetic():
    assert cfg_combine(2.0, 1.0, 6.5) == 7.5


@given(st.floats(0, 20), st.floats(-10, 10), st.floats(-10, 10))
def test_cfg_closed_form(omega, p, n):
    assert cfg_combine(p, n, omega) == pytest.approx(n + omega * (p - n), rel=1e-12, abs=1e-9)


def test_cfg_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        cfg_combine(np.zeros(3), np.zeros(4), 2.0)


# ------------------------------------------------------------------ anneal


def test_anneal_single_step():
    assert anneal_step(AnnealState(), 0.99).alpha_c == 0.99


def test_anneal_disabled():
    s = AnnealState()
    for _ in range(20):
        s = anneal_step(s, 1.0)
    assert s.alpha_c == 1.0 and s.applications == 20


@given(st.integers(0, 400), st.floats(0.5, 1.0))
def test_anneal_closed_form(n, beta):
    s = AnnealState()
    for _ in range(n):
        s = anneal_step(s, beta)
    assert s.applications == n
    assert abs(s.alpha_c - beta ** n) <= 1e-12


def test_anneal_fifty_applications():
    s = AnnealState()
    for _ in range(50):
        s = anneal_step(s, 0.99)
    assert s.alpha_c == pytest.approx(0.605006, abs=1e-6)


def test_anneal_rejects_bad_beta():
    with pytest.raises(ValueError):
        anneal_step(AnnealState(), 0.0)
    with pytest.raises(ValueError):
        anneal_step(AnnealState(), 1.5)


# ------------------------------------------------------------------ freeze


def test_freeze_all_and_none():
    rng = np.random.default_rng(5)
    x, ref = blocks(rng), blocks(rng)
    out = apply_freeze(x, ref, {1: True, 2: True})
    assert all(np.array_equal(a.tokens, b.tokens) for a, b in zip(out, ref))
    out = apply_freeze(x, ref, {1: False, 2: False})
    assert all(a is b for a, b in zip(out, x))


def test_freeze_missing_reference():
    x = blocks(np.random.default_rng(6))
    with pytest.raises(MissingReferenceError):
        apply_freeze(x, {2: x[1].tokens}, {1: True})


# ---------------------------------------------------------------------- kv


def test_blend_kv_endpoints():
    rng = np.random.default_rng(7)
    cached = (rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))
    fresh = (rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))
    assert all(np.array_equal(a, b) for a, b in zip(blend_kv(cached, fresh, 1.0), cached))
    assert all(np.array_equal(a, b) for a, b in zip(blend_kv(cached, fresh, 0.0), fresh))
    assert blend_kv((np.array(2.0),), (np.array(0.0),), 0.5)[0] == 1.0


def test_blend_kv_checks():
    with pytest.raises(ShapeMismatchError):
        blend_kv((np.zeros(2),), (np.zeros(3),), 0.5)
    with pytest.raises(ValueError):
        blend_kv((np.zeros(2),), (np.zeros(2),), 1.5)


def test_kv_schedule_linear_and_constant():
    assert kv_schedule(0, 50) == 0.8
    assert kv_schedule(49, 50) == 0.0
    assert kv_schedule(24, 50) == pytest.approx(0.8 * (1 - 24 / 49))
    assert all(kv_schedule(i, 10, 0.5) == 0.5 for i in range(10))
    assert kv_schedule(3, 10, "constant:0.25") == 0.25
    assert kv_schedule(3, 10, lambda i, n: i / n) == 0.3
    with pytest.raises(ValueError):
        kv_schedule(10, 10)
    with pytest.raises(ValueError):
        kv_schedule(0, 10, "cosine")


def test_kv_cache_round_trip():
    cache = KvCache()
    cache.put(0, 1, 2, np.ones((2, 2)), np.zeros((2, 2)))
    k, v = cache.get(0, 1, 2)
    assert (0, 1, 2) in cache and len(cache) == 1
    assert np.array_equal(k, np.ones((2, 2))) and cache.get(9, 9, 9) is None


# --------------------------------------------------------------------- tsr


def test_tsr_identity_and_default():
    v = np.arange(6.0).reshape(2, 3)
    assert apply_tsr(v, 1.0, 0.3) is v
    assert np.allclose(apply_tsr(v, 0.98, 0.3), 0.98 * v)


def test_tsr_custom_callback_verbatim():
    sentinel = object()
    assert apply_tsr(np.zeros(3), 0.5, 0.1, callback=lambda v, k, t: sentinel) is sentinel


# ------------------------------------------------------------------ sample


def cfg(**kw):
    base = dict(steps=50, cfg_scale=6.5, anneal_beta=0.99, tsr_k=1.0)
    base.update(kw)
    return SamplerConfig(**base)


def test_sample_linear_field_hits_target():
    rng = np.random.default_rng(8)
    x0, target = blocks(rng, 3), blocks(rng, 3)
    res = sample(linear_field(target), cfg(), x0)
    for b in target:
        assert np.abs(res.endpoint(b.part_id) - b.tokens).max() < 1e-6


def test_sample_all_frozen_returns_reference():
    rng = np.random.default_rng(9)
    x0, ref = blocks(rng), blocks(rng)
    res = sample(contracting, cfg(), x0, freeze_mask={1: True, 2: True}, reference=ref)
    for a, b in zip(res.latents, ref):
        assert np.array_equal(a.tokens, b.tokens)


def test_sample_freeze_matches_reference_trajectory():
    rng = np.random.default_rng(10)
    ref_x0, x0 = blocks(rng), blocks(rng)
    reference = sample(contracting, cfg(), ref_x0, keep_trajectory=True)
    res = sample(contracting, cfg(), x0, freeze_mask={1: True, 2: False},
                 reference=reference.trajectory, keep_trajectory=True)
    assert len(res.trajectory) == 51
    for got, want in zip(res.trajectory, reference.trajectory):
        assert np.array_equal(got[0].tokens, want[0].tokens)
        assert not np.array_equal(got[1].tokens, want[1].tokens)


def test_sample_freeze_without_reference():
    with pytest.raises(MissingReferenceError):
        sample(contracting, cfg(), blocks(np.random.default_rng(0)), freeze_mask={1: True})


def test_sample_annealing_trace_and_positive_isolation():
    seen = []

    def denoiser(x, t, alpha, branch):
        seen.append((branch.name, np.array(alpha)))
        return [np.zeros_like(b.tokens) for b in x]

    for layers in (1, 3):
        seen.clear()
        res = sample(denoiser, cfg(steps=20, layers_per_pass=layers), blocks(np.random.default_rng(1)))
        for i, row in enumerate(res.trace):
            for l, a in enumerate(row["alpha_c"]):
                assert abs(a - 0.99 ** (i * layers + l)) <= 1e-12
            assert row["alpha_pos"] == 1.0
        assert all(np.all(a == 1.0) for name, a in seen if name == "positive")
        negs = [a for name, a in seen if name == "negative"]
        assert np.allclose(np.concatenate(negs), 0.99 ** np.arange(20 * layers), rtol=0, atol=1e-12)


def test_sample_trace_lambda_and_norms():
    res = sample(contracting, cfg(steps=10), blocks(np.random.default_rng(2)))
    assert [r["lambda_t"] for r in res.trace] == [kv_schedule(i, 10) for i in range(10)]
    last = res.trace[-1]["norms"]
    assert last[1] == pytest.approx(float(np.linalg.norm(res.endpoint(1))))


def quadratic_fields(a, b, c):
    def denoiser(x, t, alpha, branch):
        base = a if branch.name == "positive" else b
        return [base + c * t * t for _ in x]
    return denoiser


def test_sample_omega_sweep_closed_form():
    rng = np.random.default_rng(11)
    a, b, c = rng.normal(size=(3, 4, 2))
    x0 = [LatentBlock(1, rng.normal(size=(4, 2)))]
    steps = 50
    ts = np.arange(steps) / steps
    along = []
    for omega in (0.0, 1.0, 3.0, 6.5):
        end = sample(quadratic_fields(a, b, c), cfg(cfg_scale=omega), x0).endpoint(1)
        expect = x0[0].tokens + b + omega * (a - b) + c * np.sum(ts ** 2) / steps
        assert np.allclose(end, expect, atol=1e-9)
        along.append(float(np.sum(end * (a - b))))
    assert all(y > x for x, y in zip(along, along[1:]))


@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_sample_branch_swap_linearity(seed, omega):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 2))
    x0 = [LatentBlock(1, rng.normal(size=(3, 2)))]

    def fields(pos, neg):
        def denoiser(x, t, alpha, branch):
            f = pos if branch.name == "positive" else neg
            return [f - 0.5 * blk.tokens for blk in x]
        return denoiser

    one = sample(fields(a, b), cfg(steps=10, cfg_scale=omega), x0).endpoint(1)
    other = sample(fields(b, a), cfg(steps=10, cfg_scale=1.0 - omega), x0).endpoint(1)
    assert np.allclose(one, other, rtol=1e-12, atol=1e-12)


def test_sample_deterministic():
    rng = np.random.default_rng(12)
    x0 = blocks(rng)
    r1 = sample(contracting, cfg(), x0)
    r2 = sample(contracting, cfg(), x0)
    assert r1.trace == r2.trace
    assert all(np.array_equal(a.tokens, b.tokens) for a, b in zip(r1.latents, r2.latents))


def test_sample_step_error_carries_index():
    def bad(x, t, alpha, branch):
        if branch.step == 3:
            return [np.zeros((1, 1)) for _ in x]
        return [np.zeros_like(b.tokens) for b in x]

    with pytest.raises(SamplerStepError) as info:
        sample(bad, cfg(steps=5), blocks(np.random.default_rng(0)))
    assert info.value.step == 3


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(anneal_beta=0.0)
    with pytest.raises(ValueError):
        SamplerConfig(cfg_scale=-1)
    d = SamplerConfig()
    assert (d.steps, d.cfg_scale, d.anneal_beta, d.tsr_k) == (50, 6.5, 0.99, 0.98)


# ------------------------------------------------------------------ file format


def test_latents_binary_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    lat = [LatentBlock(3, rng.normal(size=(5, 2)), True), LatentBlock(7, rng.normal(size=(2, 3)))]
    path = tmp_path / "lat.bin"
    write_latents(lat, path)
    back = read_latents(path)
    assert [(b.part_id, b.frozen) for b in back] == [(3, True), (7, False)]
    assert all(np.array_equal(a.tokens, b.tokens) for a, b in zip(lat, back))
    # header read independently of the library
    raw = path.read_bytes()
    assert raw[:4] == b"PLAT"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:16], "little") == 3
    assert len(raw) == 12 + 2 * 13 + 8 * (10 + 6)


def test_latents_rejects_bad_files(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError):
        read_latents(p)
    write_latents([LatentBlock(0, np.ones((4, 4)))], p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_latents(p)
