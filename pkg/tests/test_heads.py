import numpy as np
import pytest
import torch

from oracles import central_difference_check
from urbanmind.errors import InvalidArgument
from urbanmind.heads import (
    HeadsConfig,
    build_heads,
    mask_embeddings,
    predict,
    prediction_loss,
    reconstruction_loss,
)


def heads(hidden=16, h=8, m=4, side=10, ffn=32, n_shared=2):
    return build_heads(HeadsConfig(n_shared=n_shared, n_heads=2, ffn_dim=ffn), hidden, h, m, side, seed=0)


def test_predict_shape_and_range():
    P, _ = heads()
    out = predict(P, torch.randn(8, 16) * 5, h=8, m=4)
    assert out.shape == (4, 1, 10, 10)
    assert out.abs().max() <= 1.0


def test_predict_deterministic():
    P, _ = heads()
    e = torch.randn(2, 8, 16)
    assert torch.equal(P(e), P(e))


def test_predict_errors():
    P, _ = heads()
    with pytest.raises(InvalidArgument):
        predict(P, torch.randn(8, 16), h=8, m=3)
    with pytest.raises(InvalidArgument):
        predict(P, torch.randn(5, 16))


def test_reconstructor_shape():
    _, G = heads()
    e = torch.randn(3, 8, 16)
    assert G(e).shape == e.shape


def test_trunk_is_shared():
    P, G = heads()
    assert P.trunk is G.trunk
    e = torch.randn(8, 16)
    before = P(e).detach().clone()
    params = list(G.trunk.parameters()) + list(G.private_parameters())
    opt = torch.optim.Adam(params, lr=1e-2)
    masked, _ = mask_embeddings(e, 0.25, np.random.default_rng(0))
    loss = reconstruction_loss(G, masked, e)
    opt.zero_grad()
    loss.backward()
    opt.step()
    assert not torch.equal(P(e), before)


def test_prediction_loss_examples():
    x = torch.rand(4, 1, 10, 10)
    assert prediction_loss(x, x).item() == 0.0
    assert prediction_loss(x + 0.2, x, m=4).item() == pytest.approx(0.04, rel=1e-4)
    one = torch.zeros(1, 1, 1, 1)
    assert prediction_loss(one + 3, one, m=1).item() == 9.0
    with pytest.raises(InvalidArgument):
        prediction_loss(x, x[:3])


def test_mask_counts_and_preservation():
    e = torch.randn(5, 128)
    masked, mask = mask_embeddings(e, 0.25, np.random.default_rng(0))
    assert torch.all(mask.n_masked_per_vector == 32)
    kept = mask.keep.bool()
    assert torch.equal(masked[kept], e[kept])
    assert torch.all(masked[~kept] == 0)
    assert torch.equal(e, e.clone())


def test_mask_minimum_one():
    _, mask = mask_embeddings(torch.randn(3, 16), 0.001, np.random.default_rng(0))
    assert torch.all(mask.n_masked_per_vector == 1)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.5])
def test_mask_ratio_bounds(p):
    with pytest.raises(InvalidArgument):
        mask_embeddings(torch.randn(3, 16), p, np.random.default_rng(0))


def test_reconstruction_loss_examples():
    e = torch.eye(4)
    assert reconstruction_loss(lambda z: z, e, e).item() == 0.0
    assert reconstruction_loss(lambda z: torch.zeros_like(z), e, e).item() == 1.0
    with pytest.raises(InvalidArgument):
        reconstruction_loss(lambda z: z, e[:3], e)


def test_reconstruction_loss_decreases_during_adaptation():
    _, G = heads()
    e = torch.nn.functional.layer_norm(torch.randn(6, 8, 16), (16,))
    masked, _ = mask_embeddings(e, 0.25, np.random.default_rng(1))
    opt = torch.optim.Adam(list(G.trunk.parameters()) + list(G.private_parameters()), lr=5e-4)
    curve = []
    for _ in range(6):
        loss = reconstruction_loss(G, masked, e)
        curve.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert all(b < a for a, b in zip(curve, curve[1:]))


def test_eq2_eq4_gradients():
    P, G = heads(hidden=8, h=2, m=1, side=2, ffn=0, n_shared=1)
    P.double()
    G.double()
    assert sum(p.numel() for p in set(P.parameters()) | set(G.parameters())) <= 2000
    rng = np.random.default_rng(0)
    e = torch.randn(3, 2, 8, dtype=torch.float64)
    x = torch.rand(3, 1, 1, 2, 2, dtype=torch.float64) * 2 - 1
    checks = central_difference_check(lambda: prediction_loss(P(e), x), list(P.parameters()), 10, rng)
    assert max(rel for *_, rel in checks) < 1e-3
    masked, _ = mask_embeddings(e, 0.25, rng)
    checks = central_difference_check(lambda: reconstruction_loss(G, masked, e), list(G.parameters()), 10, rng)
    assert max(rel for *_, rel in checks) < 1e-3
