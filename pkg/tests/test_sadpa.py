import math

import pytest
import torch
from torch.func import functional_call

from scalematch.errors import EmptyKeyError, ShapeError
from scalematch.sadpa import SADPA, KvPyramidLevel, attend, downsample_mask, linear_attend


def naive_attention(q, keys, values, mask, heads=1, rope=None, q_coords=None, k_coords=None):
    """Explicit per-query, per-key softmax loop."""
    n_s, dim = q.shape
    d = dim // heads
    out = torch.zeros_like(q)
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        qh, kh = q[:, sl], keys[:, sl]
        if rope is not None:
            qh, kh = rope(qh, q_coords), rope(kh, k_coords)
        for n in range(n_s):
            logits = [float(qh[n] @ kh[m]) / math.sqrt(d) if mask[m] else None for m in range(len(keys))]
            live = [l for l in logits if l is not None]
            if not live:
                continue
            top = max(live)
            weights = [math.exp(l - top) if l is not None else 0.0 for l in logits]
            total = sum(weights)
            for m, wgt in enumerate(weights):
                out[n, sl] += wgt / total * values[m, sl]
    return out


def naive_messages(module, feat_s, feat_t, mask_s, mask_t, hw, rope_coords=None):
    h, w = hw
    q = module.q_proj(feat_s[0]) * mask_s[0, :, None]
    fmap = feat_t[0].T.reshape(1, -1, h, w)
    grid = mask_t[0].view(h, w)
    messages = []
    for ratio, conv in zip(module.ratios, module.level_convs):
        pooled = conv(fmap).flatten(2)[0].T
        keys, values = module.k_proj(pooled), module.v_proj(pooled)
        if ratio == 4 and module.attention == "sadpa":
            level_mask = torch.ones(len(pooled), dtype=torch.bool)
        else:
            level_mask = grid[::ratio, ::ratio].reshape(-1)
        k_coords = None
        if rope_coords is not None:
            k_coords = rope_coords(h, w, ratio)
        messages.append(
            naive_attention(q, keys, values, level_mask, module.heads, module.rope,
                            rope_coords(h, w, 1) if rope_coords else None, k_coords)
        )
    return messages


@pytest.fixture
def module():
    torch.manual_seed(0)
    return SADPA(8, heads=1).double()


def test_pyramid_token_counts():
    torch.manual_seed(0)
    sadpa = SADPA(8, heads=2)
    levels = sadpa.build_kv_pyramid(torch.randn(1, 256, 8), torch.ones(1, 256, dtype=torch.bool), (16, 16))
    assert [lvl.keys.shape[1] for lvl in levels] == [16, 64, 256]
    assert [lvl.ratio for lvl in levels] == [4, 2, 1]
    assert all(lvl.mask.all() for lvl in levels)


def test_pyramid_rejects_indivisible_grid(module):
    with pytest.raises(ShapeError):
        module.build_kv_pyramid(torch.randn(1, 36, 8, dtype=torch.float64), torch.ones(1, 36, dtype=torch.bool), (6, 6))


def test_nearest_downsampling_by_hand():
    mask = torch.ones(1, 4, 4, dtype=torch.bool)
    mask[0, 0, 0] = False
    down = downsample_mask(mask, 2)
    expected = torch.tensor([[[False, True], [True, True]]])
    assert torch.equal(down, expected)


def _level(keys, values, mask=None):
    if mask is None:
        mask = torch.ones(keys.shape[:2], dtype=torch.bool)
    return KvPyramidLevel(keys=keys, values=values, mask=mask, ratio=1, coords=None)


def test_zero_query_averages_values():
    values = torch.randn(1, 5, 4, dtype=torch.float64)
    out = attend(torch.zeros(1, 3, 4, dtype=torch.float64), _level(torch.randn(1, 5, 4, dtype=torch.float64), values), heads=2)
    assert torch.allclose(out, values.mean(dim=1, keepdim=True).expand(1, 3, 4), atol=1e-12)


def test_single_key_returns_its_value():
    values = torch.randn(1, 1, 4, dtype=torch.float64)
    out = attend(torch.randn(1, 2, 4, dtype=torch.float64), _level(torch.randn(1, 1, 4, dtype=torch.float64), values), heads=1)
    assert torch.allclose(out, values.expand(1, 2, 4), atol=1e-12)


def test_attend_matches_brute_force():
    gen = torch.Generator().manual_seed(3)
    q = torch.randn(1, 2, 4, generator=gen)
    keys = torch.randn(1, 3, 4, generator=gen)
    values = torch.randn(1, 3, 4, generator=gen)
    mask = torch.tensor([[True, False, True]])
    out = attend(q, _level(keys, values, mask), heads=1)
    assert torch.allclose(out[0], naive_attention(q[0], keys[0], values[0], mask[0]), atol=1e-6)


def test_attend_all_masked_raises():
    keys = torch.randn(1, 3, 4)
    with pytest.raises(EmptyKeyError):
        attend(torch.randn(1, 2, 4), _level(keys, keys, torch.zeros(1, 3, dtype=torch.bool)), heads=1)


def test_linear_attention_ignores_masked_keys():
    gen = torch.Generator().manual_seed(0)
    q = torch.randn(1, 3, 4, generator=gen)
    keys = torch.randn(1, 4, 4, generator=gen)
    values = torch.randn(1, 4, 4, generator=gen)
    mask = torch.tensor([[True, True, False, False]])
    full = linear_attend(q, _level(keys, values, mask), heads=2)
    trimmed = linear_attend(q, _level(keys[:, :2], values[:, :2]), heads=2)
    assert torch.allclose(full, trimmed, atol=1e-6)


def test_messages_match_naive_pyramid_attention(module):
    gen = torch.Generator().manual_seed(1)
    feat_s = torch.randn(1, 64, 8, generator=gen, dtype=torch.float64)
    feat_t = torch.randn(1, 64, 8, generator=gen, dtype=torch.float64)
    mask_s = torch.rand(1, 64, generator=gen) > 0.3
    mask_t = torch.rand(1, 64, generator=gen) > 0.3
    _, messages = module(feat_s, feat_t, mask_s, mask_t, (8, 8), (8, 8), return_messages=True)
    expected = naive_messages(module, feat_s, feat_t, mask_s, mask_t, (8, 8))
    for got, want in zip(messages, expected):
        assert torch.allclose(got[0], want, atol=1e-10)


def test_self_messages_with_rope_match_naive():
    from scalematch.rope import grid_coords

    torch.manual_seed(2)
    sadpa = SADPA(8, heads=2, use_rope=True).double()
    feat = torch.randn(1, 64, 8, dtype=torch.float64)
    mask = torch.rand(1, 64) > 0.2
    _, messages = sadpa(feat, feat, mask, mask, (8, 8), (8, 8), return_messages=True)
    coords = lambda h, w, r: grid_coords(h, w, r, dtype=torch.float64)  # noqa: E731
    expected = naive_messages(sadpa, feat, feat, mask, mask, (8, 8), rope_coords=coords)
    for got, want in zip(messages, expected):
        assert torch.allclose(got[0], want, atol=1e-10)


def test_float32_messages_within_tolerance():
    torch.manual_seed(4)
    sadpa = SADPA(8, heads=1)
    feat_s, feat_t = torch.randn(1, 64, 8), torch.randn(1, 64, 8)
    mask = torch.ones(1, 64, dtype=torch.bool)
    _, messages = sadpa(feat_s, feat_t, mask, mask, (8, 8), (8, 8), return_messages=True)
    expected = naive_messages(sadpa, feat_s, feat_t, mask, mask, (8, 8))
    for got, want in zip(messages, expected):
        assert torch.allclose(got[0], want, atol=1e-5)


def test_fully_pruned_source_is_identity(module):
    feat_s = torch.randn(1, 64, 8, dtype=torch.float64)
    out = module(feat_s, torch.randn(1, 64, 8, dtype=torch.float64), torch.zeros(1, 64, dtype=torch.bool),
                 torch.ones(1, 64, dtype=torch.bool), (8, 8), (8, 8))
    assert torch.equal(out, feat_s)


def test_pruned_rows_unchanged(module):
    feat_s = torch.randn(1, 64, 8, dtype=torch.float64)
    mask_s = torch.rand(1, 64) > 0.5
    out = module(feat_s, torch.randn(1, 64, 8, dtype=torch.float64), mask_s, torch.ones(1, 64, dtype=torch.bool), (8, 8), (8, 8))
    assert torch.equal(out[~mask_s], feat_s[~mask_s])
    assert not torch.equal(out[mask_s], feat_s[mask_s])


def test_fully_masked_target_uses_coarsest_level_only(module):
    feat_s = torch.randn(1, 64, 8, dtype=torch.float64)
    feat_t = torch.randn(1, 64, 8, dtype=torch.float64)
    mask_s = torch.ones(1, 64, dtype=torch.bool)
    mask_t = torch.zeros(1, 64, dtype=torch.bool)
    out, messages = module(feat_s, feat_t, mask_s, mask_t, (8, 8), (8, 8), return_messages=True)
    assert torch.count_nonzero(messages[1]) == 0 and torch.count_nonzero(messages[2]) == 0

    level1 = naive_messages(module, feat_s, feat_t, mask_s, mask_t, (8, 8))[0][None]
    zeros = torch.zeros_like(level1)
    expected = module.norm(feat_s + module.ffn(torch.cat([level1, zeros, zeros, feat_s], dim=-1)))
    assert torch.allclose(out, expected, atol=1e-10)


def test_masked_target_tokens_do_not_leak(module):
    feat_s = torch.randn(1, 64, 8, dtype=torch.float64)
    feat_t = torch.randn(1, 64, 8, dtype=torch.float64)
    mask_t = torch.ones(1, 8, 8, dtype=torch.bool)
    mask_t[0, 2:4, 4:6] = False  # one whole 2x2 pooling cell
    mask_t = mask_t.view(1, 64)
    perturbed = feat_t.clone()
    perturbed[0, 2 * 8 + 5] = 100.0
    zeroed = feat_t.clone()
    zeroed[0, 2 * 8 + 5] = 0.0

    mask_s = torch.ones(1, 64, dtype=torch.bool)
    _, m_zero = module(feat_s, zeroed, mask_s, mask_t, (8, 8), (8, 8), return_messages=True)
    _, m_pert = module(feat_s, perturbed, mask_s, mask_t, (8, 8), (8, 8), return_messages=True)
    assert torch.allclose(m_zero[1], m_pert[1], atol=1e-12)
    assert torch.allclose(m_zero[2], m_pert[2], atol=1e-12)


def test_single_level_mode_has_one_level():
    sadpa = SADPA(8, heads=2, attention="single")
    levels = sadpa.build_kv_pyramid(torch.randn(1, 16, 8), torch.ones(1, 16, dtype=torch.bool), (4, 4))
    assert len(levels) == 1 and levels[0].ratio == 1


def test_gradcheck_projections():
    torch.manual_seed(5)
    sadpa = SADPA(4, heads=1).double()
    feat_s = torch.randn(1, 16, 4, dtype=torch.float64)
    feat_t = torch.randn(1, 16, 4, dtype=torch.float64)
    mask = torch.ones(1, 16, dtype=torch.bool)
    params = {k: v.detach() for k, v in sadpa.named_parameters()}

    def objective(wq, wk, wv):
        override = {**params, "q_proj.weight": wq, "k_proj.weight": wk, "v_proj.weight": wv}
        return functional_call(sadpa, override, (feat_s, feat_t, mask, mask, (4, 4), (4, 4))).pow(2).sum()

    inputs = tuple(params[n].clone().requires_grad_(True) for n in ("q_proj.weight", "k_proj.weight", "v_proj.weight"))
    assert torch.autograd.gradcheck(objective, inputs, eps=1e-6, atol=1e-6, rtol=1e-4)
