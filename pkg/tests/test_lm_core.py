import math

import numpy as np
import pytest
import torch

from conftest import central_difference, relative_error, sample_indices
from smolrgpt.errors import ConfigError, EmptyLossMask, SequenceTooLong
from smolrgpt.lm_core import LmConfig, TinyDecoder, loss, loss_sum, token_nll
from smolrgpt.sequence_builder import END_ID, VOCAB

V = len(VOCAB)


def small(dim=16, layers=2, dtype=torch.float64, **kw):
    return TinyDecoder(LmConfig(lm_dim=dim, n_layers=layers, n_heads=2, max_seq=32, **kw), dtype)


def test_config_validation():
    with pytest.raises(ConfigError):
        LmConfig(lm_dim=10, n_heads=4)
    with pytest.raises(ConfigError):
        LmConfig(vocab_size=10)


def test_too_long():
    m = small()
    with pytest.raises(SequenceTooLong):
        m(torch.zeros(33, 16, dtype=torch.float64))


class TestCausality:
    @pytest.mark.parametrize("dtype", [torch.float64, torch.float32])
    def test_prefix_logits_bitwise(self, dtype):
        m = small(dtype=dtype).eval()
        x = torch.randn(20, 16, dtype=dtype)
        full = m(x)
        for t in range(1, 20):
            assert torch.equal(m(x[:t]), full[:t])

    def test_future_change_leaves_past_bitwise(self):
        m = small().eval()
        x = torch.randn(12, 16, dtype=torch.float64)
        y = x.clone()
        y[8:] += torch.randn(4, 16, dtype=torch.float64)
        assert torch.equal(m(x)[:8], m(y)[:8])

    def test_attention_rows_are_distributions(self):
        m = small().eval()
        x = torch.randn(1, 10, 16, dtype=torch.float64)
        _, probs = m.blocks[0].attn(m.blocks[0].ln1(x), return_probs=True)
        torch.testing.assert_close(probs.sum(-1), torch.ones(1, 2, 10, dtype=torch.float64), rtol=0, atol=1e-12)
        assert torch.all(probs.triu(1) == 0)

    def test_fast_and_reference_attention_agree(self):
        attn = small().blocks[0].attn
        x = torch.randn(2, 9, 16, dtype=torch.float64)
        fast = attn(x)
        ref, _ = attn(x, return_probs=True)
        torch.testing.assert_close(fast, ref, rtol=0, atol=1e-12)

    def test_batched_matches_single(self):
        m = small().eval()
        x = torch.randn(3, 11, 16, dtype=torch.float64)
        out = m(x)
        for i in range(3):
            torch.testing.assert_close(out[i], m(x[i]), rtol=0, atol=1e-12)


class TestLoss:
    def test_uniform_logits_give_log_vocab(self):
        logits = torch.zeros(5, V, dtype=torch.float64)
        value = loss(logits, torch.arange(5), torch.ones(5, dtype=torch.bool))
        assert abs(value.item() - math.log(V)) < 1e-12

    def test_brute_force(self, rng):
        logits = torch.from_numpy(rng.normal(size=(9, V)) * 3)
        targets = torch.from_numpy(rng.integers(0, V, 9))
        mask = torch.tensor([0, 1, 1, 0, 1, 0, 0, 1, 1], dtype=torch.bool)
        ref, n = 0.0, 0
        for i in range(9):
            if mask[i]:
                row = logits[i].numpy()
                ref += -(row[targets[i]] - math.log(sum(math.exp(v) for v in row)))
                n += 1
        assert abs(loss(logits, targets, mask).item() - ref / n) < 1e-10

    def test_large_logits_stay_finite(self):
        logits = torch.full((2, V), 1e4, dtype=torch.float64)
        logits[0, 3] = 2e4
        nll = token_nll(logits, torch.tensor([3, 3]))
        assert torch.isfinite(nll).all() and nll[0] == 0

    def test_empty_mask(self):
        with pytest.raises(EmptyLossMask):
            loss(torch.zeros(3, V), torch.zeros(3, dtype=torch.long), torch.zeros(3, dtype=torch.bool))

    def test_masked_positions_get_exactly_zero_gradient(self, rng):
        logits = torch.from_numpy(rng.normal(size=(2, 8, V))).requires_grad_()
        targets = torch.from_numpy(rng.integers(0, V, (2, 8)))
        targets[0, 2] = -100  # garbage targets under the mask must not leak
        mask = torch.from_numpy(rng.random((2, 8)) < 0.5)
        mask[0, 2] = False
        total, _ = loss_sum(logits, targets, mask)
        total.backward()
        assert torch.all(logits.grad[~mask] == 0)
        assert torch.all(logits.grad[mask].abs().sum(-1) > 0)


def test_finite_difference_gradients(rng):
    m = small(dim=16, layers=2, init_std=0.3)
    x = torch.randn(10, 16, dtype=torch.float64)
    targets = torch.from_numpy(rng.integers(0, V, 10))
    mask = torch.ones(10, dtype=torch.bool)
    mask[:3] = False

    def f():
        return loss(m(x), targets, mask)

    f().backward()
    checked = 0
    for name, p in m.named_parameters():
        for idx in sample_indices(p, 0.01, rng):
            num = central_difference(f, p.data, idx)
            err = relative_error(p.grad[idx].item(), num)
            assert err < 1e-4, (name, idx, p.grad[idx].item(), num)
            checked += 1
    assert checked >= 40


class TestGenerate:
    def test_deterministic(self):
        m = small()
        x = torch.randn(6, 16, dtype=torch.float64)
        assert m.generate(x, 10) == m.generate(x, 10)

    def test_max_new_one(self):
        m = small()
        assert len(m.generate(torch.randn(4, 16, dtype=torch.float64), 1)) == 1

    def test_stops_on_end_token(self):
        m = small()
        with torch.no_grad():
            m.ln_f.weight.zero_()
            m.ln_f.bias.zero_()
            m.ln_f.bias[0] = 1.0
            m.tok_emb.weight.zero_()
            m.tok_emb.weight[END_ID, 0] = 1.0
        assert m.generate(torch.randn(4, 16, dtype=torch.float64), 50) == [END_ID]

    def test_greedy_ties_pick_lowest_id(self):
        m = small()
        with torch.no_grad():
            m.tok_emb.weight.zero_()
        assert m.generate(torch.randn(3, 16, dtype=torch.float64), 2) == [0, 0]

    def test_rejects_zero_budget(self):
        with pytest.raises(ValueError):
            small().generate(torch.randn(3, 16, dtype=torch.float64), 0)


def test_seeded_init_is_reproducible():
    torch.manual_seed(5)
    a = small()
    torch.manual_seed(5)
    b = small()
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert np.isclose(a.tok_emb.weight.std().item(), 0.02, rtol=0.2)
