import math

import numpy as np
import pytest
import torch

from oracles import central_difference_check
from urbanmind.backbone import (
    Backbone,
    BackboneConfig,
    build_backbone,
    finetune_step,
    pfa_partition,
    pretrain_language_model,
    trainable_mask,
)
from urbanmind.errors import FreezeViolation, InvalidArgument, TrainingFailure
from urbanmind.prompts import Vocabulary

VOCAB = Vocabulary.build()


def make(L=2, l_frozen=1, hidden=16, heads=2, ffn=32, **kw):
    return build_backbone(BackboneConfig(L=L, l_frozen=l_frozen, hidden_dim=hidden, n_heads=heads, ffn_dim=ffn, **kw),
                          VOCAB, token_dim=12, seed=0)


def test_config_invariants():
    with pytest.raises(InvalidArgument):
        BackboneConfig(L=2, l_frozen=3)
    with pytest.raises(InvalidArgument):
        BackboneConfig(hidden_dim=10, n_heads=4)


def test_empty_stack_is_identity():
    bb = make(L=0, l_frozen=0)
    x = torch.randn(5, 16)
    assert torch.equal(bb(x), x)


@pytest.mark.parametrize("L", [1, 3])
def test_shape_preserved(L):
    bb = make(L=L, l_frozen=0)
    assert bb(torch.randn(3, 7, 16)).shape == (3, 7, 16)


def test_overlong_sequence():
    bb = make(max_seq_len=8)
    with pytest.raises(InvalidArgument):
        bb(torch.randn(9, 16))


def test_layer_norm_moments():
    bb = make(L=3, l_frozen=0)
    states = bb(torch.randn(6, 16) * 3, return_all=True)
    for s in states[1:]:
        assert torch.allclose(s.mean(-1), torch.zeros(6), atol=1e-5)
        assert torch.allclose(s.var(-1, unbiased=False), torch.ones(6), atol=1e-4)


def test_single_layer_recurrence_reference():
    """Hand-rolled LayerNorm(x + SA(x)) for a 2-token sequence, causal, 2 heads."""
    bb = make(L=1, l_frozen=0, ffn=0).double()
    layer = bb.layers[0]
    x = torch.randn(2, 16, dtype=torch.float64)
    Wq, Wk, Wv, Wo = (getattr(layer.attn, n).weight.detach() for n in ("w_q", "w_k", "w_v", "w_o"))
    q, k, v = x @ Wq.T, x @ Wk.T, x @ Wv.T
    heads = []
    for h in range(2):
        sl = slice(8 * h, 8 * h + 8)
        out = torch.zeros(2, 8, dtype=torch.float64)
        for t in range(2):
            scores = torch.tensor([q[t, sl] @ k[s, sl] / math.sqrt(8) for s in range(t + 1)])
            w = torch.softmax(scores, 0)
            out[t] = sum(w[s] * v[s, sl] for s in range(t + 1))
        heads.append(out)
    y = x + torch.cat(heads, -1) @ Wo.T
    mu = y.mean(-1, keepdim=True)
    var = y.var(-1, unbiased=False, keepdim=True)
    ref = (y - mu) / torch.sqrt(var + layer.norm1.eps) * layer.norm1.weight.detach() + layer.norm1.bias.detach()
    assert torch.allclose(bb(x), ref, atol=1e-5)


def test_pfa_parameter_audit():
    bb = make(L=6, l_frozen=4, hidden=64, heads=4, ffn=128)
    frozen, trainable = pfa_partition(bb)
    attn = [n for n in trainable if ".attn." in n]
    assert sorted(attn) == ["layers.4.attn.w_q.weight", "layers.5.attn.w_q.weight"]
    assert sum(dict(bb.named_parameters())[n].numel() for n in attn) == 2 * 64 * 64
    assert set(trainable) - set(attn) == {"projector.weight", "projector.bias"}
    assert "text.table.weight" in frozen
    mask = trainable_mask(bb)
    assert mask["layers.5.attn.w_k.weight"] is False and mask["layers.5.attn.w_q.weight"] is True


@pytest.mark.parametrize("l_frozen,expected", [(6, 0), (0, 6)])
def test_pfa_boundaries(l_frozen, expected):
    bb = make(L=6, l_frozen=0)
    _, trainable = pfa_partition(bb, l_frozen)
    assert sum(".w_q." in n for n in trainable) == expected


def _step_setup(bb):
    frozen_names, _ = pfa_partition(bb)
    params = [p for p in bb.parameters() if p.requires_grad]
    frozen = {n: p for n, p in bb.named_parameters() if n in frozen_names}
    x = torch.randn(4, 6, 16)
    target = torch.randn(4, 6, 16)
    return params, frozen, lambda: ((bb(bb.projector(torch.randn(4, 6, 12)) + x) - target) ** 2).mean()


def test_finetune_step_freezes_and_updates():
    bb = make(L=2, l_frozen=1)
    params, frozen, loss_fn = _step_setup(bb)
    wq_before = bb.layers[1].attn.w_q.weight.detach().clone()
    wk_before = bb.layers[1].attn.w_k.weight.detach().clone()
    opt = torch.optim.Adam(params, lr=1e-2)
    for _ in range(3):
        finetune_step(params, loss_fn, opt, frozen=frozen, check=True)
    assert torch.equal(bb.layers[1].attn.w_k.weight, wk_before)
    assert not torch.equal(bb.layers[1].attn.w_q.weight, wq_before)


def test_finetune_step_detects_violation():
    bb = make(L=2, l_frozen=1)
    params, frozen, loss_fn = _step_setup(bb)
    rogue = torch.optim.SGD([bb.layers[0].attn.w_k.weight], lr=1.0)
    bb.layers[0].attn.w_k.weight.grad = torch.ones_like(bb.layers[0].attn.w_k.weight)

    def sneaky():
        rogue.step()
        return loss_fn()

    with pytest.raises(FreezeViolation):
        finetune_step(params, sneaky, torch.optim.Adam(params, lr=1e-3), frozen=frozen, check=True)


def test_non_finite_loss():
    bb = make()
    params, _, _ = _step_setup(bb)
    with pytest.raises(TrainingFailure):
        finetune_step(params, lambda: torch.tensor(float("nan"), requires_grad=True), torch.optim.Adam(params))


def test_query_gradient_matches_finite_differences():
    bb = make(L=2, l_frozen=1, hidden=8, heads=2, ffn=0).double()
    pfa_partition(bb)
    assert sum(p.numel() for p in bb.parameters()) <= 2000 + len(VOCAB) * 8 + len(VOCAB)
    x = torch.randn(5, 8, dtype=torch.float64)
    wq = bb.layers[1].attn.w_q.weight
    checks = central_difference_check(lambda: (bb(x) ** 3).sum(), [wq], 10, np.random.default_rng(0))
    assert max(rel for *_, rel in checks) < 1e-3


def test_optional_pretraining_runs():
    bb = make()
    losses = pretrain_language_model(bb, ["City: synthetic. Side: 10. Task: speed."], steps=20, lr=1e-2)
    assert len(losses) == 20 and losses[-1] < losses[0]
