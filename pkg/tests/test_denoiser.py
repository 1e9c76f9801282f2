import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from drfuse.codec import VQCodec
from drfuse.denoiser import (
    ConditionAdapter,
    DenoiserConfig,
    Stage2LossWeights,
    TemporalDenoiser,
    adapt_condition,
    anchored_attention,
    gradient_magnitude,
    stage2_objective,
    structure_terms,
)
from drfuse.numerics import Rng, grad_check, grad_check_module
from drfuse.sampler import FusionModels
from drfuse.training import Stage2Batch, freeze, stage2_train_step

D = torch.float64


def attention_oracle(q, k, v, mask=None, bias=None):
    """Three nested loops with a max-shifted exponential sum."""
    nq, d = q.shape
    nk, dv = v.shape
    out = np.zeros((nq, dv))
    for i in range(nq):
        scores = []
        for j in range(nk):
            if mask is not None and not mask[i, j]:
                scores.append(None)
                continue
            scores.append(sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) + (0.0 if bias is None else bias[i, j]))
        m = max(s for s in scores if s is not None)
        ws = [0.0 if s is None else math.exp(s - m) for s in scores]
        tot = sum(ws)
        for j in range(nk):
            for c in range(dv):
                out[i, c] += ws[j] / tot * v[j, c]
    return out


def tiny_denoiser(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = DenoiserConfig(**{"width": 16, "heads": 2, "blocks": 2, "history": 3, **kw})
    return TemporalDenoiser(cfg).double()


def randomize_output(den, seed=1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        den.out.weight.copy_(torch.randn(den.out.weight.shape, generator=g, dtype=D) * 0.1)
    return den


def window(seed, b=2, t=3, valid=None):
    r = Rng(seed)
    cur = torch.from_numpy(r.normal((b, 8, 8, 8)))
    hist = torch.from_numpy(r.normal((b, t, 8, 8, 8)))
    levels = torch.from_numpy(r.uniform(0, 0.1, (b, t)))
    ok = torch.ones(b, t, dtype=torch.bool) if valid is None else valid
    return cur, torch.tensor([0.5] * b, dtype=D), hist, levels, ok


# -- attention ---------------------------------------------------------------------


def test_attention_matches_loop_oracle():
    r = Rng(0)
    q, k, v = r.normal((5, 4)), r.normal((7, 4)), r.normal((7, 3))
    got = anchored_attention(*(torch.from_numpy(a) for a in (q, k, v)), d_head=4).numpy()
    assert np.max(np.abs(got - attention_oracle(q, k, v))) < 1e-10


def test_masked_attention_matches_loop_oracle():
    r = Rng(1)
    q, k, v = r.normal((6, 4)), r.normal((6, 4)), r.normal((6, 2))
    mask = r.integers(0, 2, (6, 6)).astype(bool)
    mask |= np.eye(6, dtype=bool)
    got = anchored_attention(*(torch.from_numpy(a) for a in (q, k, v)), d_head=4, mask=torch.from_numpy(mask)).numpy()
    assert np.max(np.abs(got - attention_oracle(q, k, v, mask))) < 1e-10


def test_biased_attention_matches_loop_oracle():
    r = Rng(11)
    q, k, v, bias = r.normal((4, 4)), r.normal((5, 4)), r.normal((5, 3)), r.normal((4, 5)) * 2
    got = anchored_attention(*(torch.from_numpy(a) for a in (q, k, v)), d_head=4, bias=torch.from_numpy(bias)).numpy()
    assert np.max(np.abs(got - attention_oracle(q, k, v, bias=bias))) < 1e-10


def test_anchor_bias_targets_same_patch_keys_only():
    den = tiny_denoiser(3)
    store = []
    with torch.no_grad():
        for blk in den.blocks:
            blk.anchor.fill_(0.0)
        den(*window(12, b=1), attn_store=store)
        with_zero = store[0].clone()
        den.blocks[0].anchor.fill_(1.0)
        store.clear()
        den(*window(12, b=1), attn_store=store)
    p, t = den.config.n_patches, den.config.history
    ratio = store[0][0, 0] / with_zero[0, 0]  # head 0, all queries
    q = t * p + 1  # current-frame query at patch 1
    row = ratio[q] / ratio[q, 0]  # key 0 (frame 0, patch 0) is unbiased; this removes the softmax normalizer
    aligned = [f * p + 1 for f in range(t + 1)]
    assert torch.allclose(row[aligned], torch.full((t + 1,), math.e, dtype=D), rtol=1e-10)
    rest = [j for j in range(len(row)) if j not in aligned]
    assert torch.allclose(row[rest], torch.ones(len(rest), dtype=D), rtol=1e-10)


def test_singleton_key_returns_value():
    r = Rng(2)
    q, k, v = (torch.from_numpy(r.normal(s)) for s in ((3, 4), (1, 4), (1, 5)))
    assert torch.equal(anchored_attention(q, k, v, 4), v.expand(3, 5))


def test_identical_keys_average_values():
    r = Rng(3)
    q = torch.from_numpy(r.normal((2, 4)))
    k = torch.from_numpy(r.normal((1, 4))).expand(6, 4)
    v = torch.from_numpy(r.normal((6, 3)))
    assert torch.allclose(anchored_attention(q, k, v, 4), v.mean(0).expand(2, 3), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_attention_weights_row_stochastic(seed):
    r = Rng(seed)
    q, k, v = (torch.from_numpy(r.normal(s) * 3) for s in ((4, 4), (5, 4), (5, 2)))
    mask = torch.from_numpy(r.integers(0, 2, (4, 5)).astype(bool))
    mask[:, 0] = True
    _, w = anchored_attention(q, k, v, 4, mask, return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones(4, dtype=D), atol=1e-14)
    assert torch.all(w[~mask] == 0) and torch.all(w >= 0)


def test_attention_validation():
    with pytest.raises(ValueError):
        anchored_attention(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 1), 3)
    with pytest.raises(ValueError):
        anchored_attention(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(2, 1), 0)


# -- denoiser -----------------------------------------------------------------------


def test_zero_initialized_output():
    den = tiny_denoiser()
    cur, lvl, hist, levels, ok = window(0)
    assert torch.equal(den(cur, lvl, hist, levels, ok), torch.zeros_like(cur))


def test_output_shape_and_errors():
    den = randomize_output(tiny_denoiser())
    cur, lvl, hist, levels, ok = window(1)
    assert den(cur, lvl, hist, levels, ok).shape == cur.shape
    assert den(cur, lvl).shape == cur.shape
    with pytest.raises(ValueError):
        den(cur[:, :4], lvl)
    with pytest.raises(ValueError):
        den(cur, lvl, hist[:, :2], levels[:, :2], ok[:, :2])


def test_patchify_roundtrip():
    den = tiny_denoiser()
    z = torch.from_numpy(Rng(4).normal((3, 8, 8, 8)))
    assert torch.equal(den.unpatchify(den.patchify(z)), z)


def test_invalid_slots_are_ignored():
    den = randomize_output(tiny_denoiser(seed=2))
    ok = torch.tensor([[False, True, True], [False, False, True]])
    cur, lvl, hist, levels, _ = window(5, valid=ok)
    base = den(cur, lvl, hist, levels, ok)
    hist2 = hist.clone()
    hist2[~ok] = torch.from_numpy(Rng(6).normal(hist2[~ok].shape))
    assert torch.equal(den(cur, lvl, hist2, levels, ok), base)


def test_no_history_equals_all_invalid():
    den = randomize_output(tiny_denoiser(seed=3))
    cur, lvl, hist, levels, _ = window(7)
    none = torch.zeros(2, 3, dtype=torch.bool)
    assert torch.allclose(den(cur, lvl), den(cur, lvl, hist, levels, none), atol=1e-14)


def test_attention_mask_is_block_causal():
    den = randomize_output(tiny_denoiser(seed=4))
    ok = torch.tensor([[True, False, True], [True, True, True]])
    cur, lvl, hist, levels, _ = window(8, valid=ok)
    store = []
    den(cur, lvl, hist, levels, ok, attn_store=store)
    p, t = den.config.n_patches, den.config.history
    for w in store:
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-13)
        assert torch.all(w[:, :, : t * p, t * p :] == 0)  # history never reads the current frame
        assert torch.all(w[0, :, t * p :, p : 2 * p] == 0)  # invalid slot hidden from current queries
        assert torch.all(w[:, :, t * p :, t * p :].sum(-1) > 0)


def test_history_features_do_not_depend_on_current_frame():
    den = randomize_output(tiny_denoiser(seed=5))
    cur, lvl, hist, levels, ok = window(9)
    store_a, store_b = [], []
    den(cur, lvl, hist, levels, ok, attn_store=store_a)
    den(cur + 1.0, lvl * 0.3, hist, levels, ok, attn_store=store_b)
    tp = den.config.history * den.config.n_patches
    for a, b in zip(store_a, store_b):
        assert torch.equal(a[:, :, :tp], b[:, :, :tp])


def test_denoiser_is_pure():
    den = randomize_output(tiny_denoiser(seed=6))
    args = window(10)
    assert torch.equal(den(*args), den(*args))


def test_adapter_tokens_only_touch_current_frame():
    den = randomize_output(tiny_denoiser(seed=7))
    cur, lvl, hist, levels, ok = window(11)
    c = torch.from_numpy(Rng(12).normal((2, 16, 16)))
    sa, sb = [], []
    den(cur, lvl, hist, levels, ok, c_struct=c, attn_store=sa)
    den(cur, lvl, hist, levels, ok, attn_store=sb)
    tp = den.config.history * den.config.n_patches
    assert torch.equal(sa[0][:, :, :tp], sb[0][:, :, :tp])


# -- adapter ---------------------------------------------------------------------------


def test_adapter_zero_init_and_shape():
    torch.manual_seed(0)
    ad = ConditionAdapter(width=16).double()
    tok = ad(torch.from_numpy(Rng(0).uniform(0, 1, (2, 1, 32, 32))))
    assert tok.shape == (2, 16, 16) and torch.equal(tok, torch.zeros_like(tok))
    with pytest.raises(ValueError):
        ad(torch.zeros(1, 1, 30, 32, dtype=D))
    with pytest.raises(ValueError):
        adapt_condition(torch.zeros(32, 32, dtype=D), ad, grid=8)


def test_adapter_receptive_field():
    torch.manual_seed(1)
    ad = ConditionAdapter(width=4).double()
    with torch.no_grad():
        ad.zero_proj.weight.normal_()
    size, jump, start = ConditionAdapter.receptive_field(8)
    x = torch.from_numpy(Rng(1).uniform(0, 1, (1, 1, 32, 32)))
    base = ad(x).reshape(4, 4, 4)
    for py, px in [(16, 16), (3, 20), (31, 0)]:
        y = x.clone()
        y[0, 0, py, px] += 1.0
        changed = (ad(y).reshape(4, 4, 4) - base).abs().amax(-1) > 0
        expect = torch.zeros(4, 4, dtype=torch.bool)
        for i in range(4):
            for j in range(4):
                cy, cx = start + i * jump, start + j * jump
                expect[i, j] = abs(py + 0.5 - cy) < size / 2 and abs(px + 0.5 - cx) < size / 2
        assert torch.equal(changed, expect), (py, px)


# -- structural objective -----------------------------------------------------------


def test_gradient_magnitude_constant_and_ramp():
    assert torch.allclose(gradient_magnitude(torch.full((6, 6), 0.4, dtype=D)), torch.full((6, 6), 1e-3, dtype=D))
    ramp = torch.arange(8, dtype=D).expand(8, 8) * 0.1
    g = gradient_magnitude(ramp)
    assert torch.allclose(g[1:-1, 1:-1], torch.full((6, 6), math.sqrt(0.1**2 + 1e-6), dtype=D))


def test_structure_terms_zero_on_max_composite():
    r = Rng(3)
    ir = torch.from_numpy(r.uniform(0, 1, (8, 8)))
    flat = torch.full((8, 8), 0.0, dtype=D)
    g, i = structure_terms(ir, ir, flat)
    assert float(i) == 0 and float(g) < 1e-20


def test_objective_zero_weights():
    r = Rng(4)
    pred, tgt, ir, vi = (torch.from_numpy(r.uniform(0, 1, (2, 1, 12, 12))) for _ in range(4))
    out = stage2_objective(pred, tgt, ir, vi, Stage2LossWeights(0, 0, 0, 0))
    assert float(out["total"]) == 0


def test_objective_single_term_isolated():
    r = Rng(5)
    pred, tgt, ir, vi = (torch.from_numpy(r.uniform(0, 1, (2, 1, 12, 12))) for _ in range(4))
    out = stage2_objective(pred, tgt, ir, vi, Stage2LossWeights(0, 0, 0, 1.0))
    assert float(out["total"]) == float(((pred - torch.maximum(ir, vi)) ** 2).mean())


def test_objective_grad_check_with_feature_term():
    torch.manual_seed(0)
    codec = VQCodec(hidden=4).double()
    r = Rng(6)
    pred, tgt, ir, vi = (torch.from_numpy(r.uniform(0.1, 0.9, (1, 1, 12, 12))) for _ in range(4))
    w = Stage2LossWeights(0.1, 1.0, 1.0, 1.0)
    rep = grad_check(lambda p: stage2_objective(p, tgt, ir, vi, w, feature_fn=codec.encode)["total"], pred, atol=1e-6)
    assert rep.passed, str(rep)


def test_objective_grad_check_without_ssim_on_8x8():
    r = Rng(7)
    pred, tgt, ir, vi = (torch.from_numpy(r.uniform(0.1, 0.9, (1, 1, 8, 8))) for _ in range(4))
    w = Stage2LossWeights(0.0, 0.0, 1.0, 1.0)
    rep = grad_check(lambda p: stage2_objective(p, tgt, ir, vi, w)["total"], pred)
    assert rep.passed, str(rep)


# -- Stage-II step ------------------------------------------------------------------


def tiny_models():
    torch.manual_seed(3)
    codec = freeze(VQCodec(hidden=4).double())
    den = freeze(TemporalDenoiser(DenoiserConfig(width=16, heads=2, blocks=1, history=2)).double())
    ad = ConditionAdapter(width=16, hidden=4).double()
    return FusionModels(codec, den, ad, 1.0)


def tiny_batch(seed=0):
    r = Rng(seed)
    t = lambda *s: torch.from_numpy(r.uniform(0, 1, s))
    return Stage2Batch(
        z=torch.from_numpy(r.normal((2, 8, 8, 8))),
        level=torch.full((2,), 0.5, dtype=D),
        alpha=torch.full((2, 1, 1, 1), 0.7, dtype=D),
        sigma=torch.full((2, 1, 1, 1), math.sqrt(0.51), dtype=D),
        hist=torch.from_numpy(r.normal((2, 2, 8, 8, 8))),
        hist_levels=torch.zeros(2, 2, dtype=D),
        hist_valid=torch.ones(2, 2, dtype=torch.bool),
        ir=t(2, 1, 32, 32),
        target=t(2, 1, 32, 32),
        ir_ref=t(2, 1, 32, 32),
        vi_ref=t(2, 1, 32, 32),
    )


def test_stage2_step_requires_frozen_codec():
    m = tiny_models()
    m.codec.requires_grad_(True)
    opt = torch.optim.AdamW(m.adapter.parameters())
    with pytest.raises(ValueError):
        stage2_train_step(tiny_batch(), m, Stage2LossWeights(), opt)


def test_stage2_step_requires_frozen_denoiser_by_default():
    m = tiny_models()
    m.denoiser.requires_grad_(True)
    opt = torch.optim.AdamW(m.adapter.parameters())
    with pytest.raises(ValueError):
        stage2_train_step(tiny_batch(), m, Stage2LossWeights(), opt)


def test_stage2_step_moves_only_adapter():
    m = tiny_models()
    with torch.no_grad():
        m.denoiser.out.weight.normal_(0, 0.1)
    frozen = [p.detach().clone() for p in list(m.codec.parameters()) + list(m.denoiser.parameters())]
    opt = torch.optim.AdamW(m.adapter.parameters(), lr=1e-2)
    for _ in range(2):
        stage2_train_step(tiny_batch(), m, Stage2LossWeights(), opt)
    after = list(m.codec.parameters()) + list(m.denoiser.parameters())
    assert all(torch.equal(a, b) for a, b in zip(frozen, after))
    assert float(m.adapter.zero_proj.weight.detach().abs().max()) > 0


def test_stage2_end_to_end_grad_check_on_adapter():
    m = tiny_models()
    with torch.no_grad():
        m.denoiser.out.weight.normal_(0, 0.1)
        m.adapter.zero_proj.weight.normal_(0, 0.1)
    b = tiny_batch(1)
    w = Stage2LossWeights()

    def loss():
        c = m.adapter(b.ir)
        v = m.denoiser(b.z, b.level, b.hist, b.hist_levels, b.hist_valid, c)
        pred = m.codec.decode(b.alpha * b.z - b.sigma * v)
        return stage2_objective(pred, b.target, b.ir_ref, b.vi_ref, w, m.codec.encode)["total"]

    rep = grad_check_module(loss, m.adapter.parameters(), eps=1e-5, atol=1e-6, max_coords=200, rng=Rng(2))
    assert rep.passed, str(rep)


def test_fresh_adapter_leaves_prior_unchanged():
    den = randomize_output(tiny_denoiser(seed=8))
    torch.manual_seed(2)
    ad = ConditionAdapter(width=16).double()
    cur, lvl, hist, levels, ok = window(13)
    c = ad(torch.from_numpy(Rng(14).uniform(0, 1, (2, 1, 32, 32))))
    assert torch.equal(den(cur, lvl, hist, levels, ok, c_struct=c), den(cur, lvl, hist, levels, ok))
