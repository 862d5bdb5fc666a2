import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trustcbm.backbone import Backbone, FeatureExtractorConfig, FeatureMaps
from trustcbm.models import (
    PrototypeCBM,
    VanillaCBM,
    concept_localization_map,
    concept_maps,
    proto_forward,
    prototype_activations,
    prototype_similarity_maps,
    top_n_prototypes,
    vanilla_forward,
)

f64 = torch.float64


def _sim_oracle(deep: np.ndarray, protos: np.ndarray) -> np.ndarray:
    D, H, W = deep.shape
    out = np.zeros((len(protos), H, W))
    for j, p in enumerate(protos):
        for u in range(H):
            for v in range(W):
                z = deep[:, u, v]
                nz, npn = math.sqrt(float(z @ z)), math.sqrt(float(p @ p))
                out[j, u, v] = 0.0 if nz == 0 or npn == 0 else float(z @ p) / (nz * npn)
    return out


# ---------------------------------------------------------------- similarity / activation


def test_similarity_parallel_cells():
    p = torch.tensor([[1.0, -2.0, 0.5]], dtype=f64)
    deep = p[0].view(3, 1, 1).expand(3, 4, 5).clone()
    maps = prototype_similarity_maps(deep, p)
    torch.testing.assert_close(maps, torch.ones(1, 4, 5, dtype=f64), rtol=0, atol=1e-12)


def test_similarity_orthogonal_cells():
    p = torch.tensor([[1.0, 0.0, 0.0]], dtype=f64)
    deep = torch.zeros(3, 2, 2, dtype=f64)
    deep[1] = torch.rand(2, 2, dtype=f64) + 0.1
    deep[2] = torch.rand(2, 2, dtype=f64)
    assert torch.equal(prototype_similarity_maps(deep, p), torch.zeros(1, 2, 2, dtype=f64))


def test_similarity_zero_vector_is_zero():
    p = torch.tensor([[1.0, 2.0]], dtype=f64, requires_grad=True)
    deep = torch.zeros(2, 2, 2, dtype=f64, requires_grad=True)
    maps = prototype_similarity_maps(deep, p)
    assert torch.equal(maps, torch.zeros(1, 2, 2, dtype=f64))
    maps.sum().backward()
    assert torch.isfinite(deep.grad).all() and torch.isfinite(p.grad).all()


@pytest.mark.parametrize("seed", range(5))
def test_similarity_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    deep = rng.normal(size=(6, 3, 3))
    protos = rng.normal(size=(4, 6))
    got = prototype_similarity_maps(torch.tensor(deep), torch.tensor(protos)).numpy()
    np.testing.assert_allclose(got, _sim_oracle(deep, protos), rtol=0, atol=1e-12)
    assert np.all(np.abs(got) <= 1 + 1e-12)


@given(st.floats(min_value=1e-3, max_value=1e3), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_similarity_scale_invariance(alpha, seed):
    g = torch.Generator().manual_seed(seed)
    deep = torch.randn(5, 3, 3, dtype=f64, generator=g)
    protos = torch.randn(2, 5, dtype=f64, generator=g)
    a = prototype_similarity_maps(deep, protos)
    b = prototype_similarity_maps(alpha * deep, protos)
    assert float((a - b).abs().max()) < 1e-9


def test_log_similarity_is_available():
    deep = torch.zeros(3, 2, 2, dtype=f64)
    p = torch.zeros(1, 3, dtype=f64)
    maps = prototype_similarity_maps(deep, p, kind="log")
    torch.testing.assert_close(maps, torch.full((1, 2, 2), math.log(1 / 1e-4), dtype=f64))


def test_activation_examples():
    assert float(prototype_activations(torch.tensor([[0.1, 0.9], [0.3, 0.2]]))) == pytest.approx(0.9)
    assert float(prototype_activations(torch.full((3, 3), 0.5))) == 0.5


@pytest.mark.parametrize("seed", range(10))
def test_activation_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    maps = rng.normal(size=(2, 7, 4, 5))
    got = prototype_activations(torch.tensor(maps)).numpy()
    for b in range(2):
        for j in range(7):
            assert got[b, j] == max(maps[b, j].ravel().tolist())


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_activation_ignores_permutation_of_non_max_cells(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(4, 4))
    flat = m.ravel().copy()
    top = int(np.argmax(flat))
    rest = [i for i in range(flat.size) if i != top]
    flat[rest] = flat[rng.permutation(rest)]
    assert float(prototype_activations(torch.tensor(m))) == float(prototype_activations(torch.tensor(flat.reshape(4, 4))))


# ---------------------------------------------------------------- top-N and concept maps


def test_top_n_examples():
    assert top_n_prototypes([0.5, -1.0, 2.0], 2) == [2, 0]
    assert top_n_prototypes([1.0, 1.0, 0.0], 1) == [0]
    assert top_n_prototypes([0.2, 3.0, -1.0, 0.2], 4) == [1, 0, 3, 2]


@pytest.mark.parametrize("n", [0, 4])
def test_top_n_out_of_range(n):
    with pytest.raises(ValueError):
        top_n_prototypes([1.0, 2.0, 3.0], n)


def test_top_n_warns_on_nonpositive(caplog):
    with caplog.at_level("WARNING"):
        top_n_prototypes([1.0, -1.0], 2)
    assert "non-positive" in caplog.text


def _top_n_oracle(row, n):
    return sorted(range(len(row)), key=lambda j: (-row[j], j))[:n]


def test_concept_map_examples():
    maps = torch.rand(3, 4, 4, dtype=f64)
    row = torch.tensor([0.1, 0.7, 0.3], dtype=f64)
    torch.testing.assert_close(concept_localization_map(maps, row, 1), maps[1], rtol=0, atol=0)
    maps[2] = maps[1]
    torch.testing.assert_close(concept_localization_map(maps, row, 2), maps[1], rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_concept_maps_match_oracle_with_ties(seed):
    rng = np.random.default_rng(seed)
    M, C, n = 9, 4, 3
    maps = rng.normal(size=(2, M, 3, 3))
    weight = rng.integers(-2, 3, size=(C, M)).astype(np.float64)  # many ties
    got = concept_maps(torch.tensor(maps), torch.tensor(weight), n).numpy()
    for b in range(2):
        for c in range(C):
            idx = _top_n_oracle(weight[c].tolist(), n)
            expected = sum(maps[b, j] for j in idx) / n
            np.testing.assert_allclose(got[b, c], expected, rtol=0, atol=1e-15)
            single = concept_localization_map(torch.tensor(maps[b]), torch.tensor(weight[c]), n).numpy()
            np.testing.assert_array_equal(single, got[b, c])


# ---------------------------------------------------------------- forward passes


@pytest.fixture
def small_backbone():
    return Backbone(FeatureExtractorConfig(widths=(8, 8, 6), seed=0)).double()


def test_vanilla_constant_map_pools_to_value(small_backbone):
    model = VanillaCBM(small_backbone, 3, 2).double()
    v = torch.tensor([0.5, -1.0, 2.0, 0.0, 1.5, 3.0], dtype=f64)
    deep = v.view(1, 6, 1, 1).expand(1, 6, 4, 4)
    out = model.heads(FeatureMaps(None, deep))
    expected = torch.sigmoid(model.concept_head(v))
    torch.testing.assert_close(out.concept_probs[0], expected, rtol=0, atol=0)


def test_vanilla_zero_weights(small_backbone):
    model = VanillaCBM(small_backbone, 3, 2).double()
    for p in (model.concept_head.weight, model.concept_head.bias):
        p.data.zero_()
    probs, _ = vanilla_forward(model, torch.rand(2, 3, 16, 16, dtype=f64))
    assert torch.equal(probs, torch.full((2, 3), 0.5, dtype=f64))


def test_vanilla_matches_oracle(small_backbone):
    model = VanillaCBM(small_backbone, 5, 3, seed=4).double()
    x = torch.rand(2, 3, 16, 16, dtype=f64)
    probs, logits = vanilla_forward(model, x)
    deep = small_backbone(x).deep.detach().numpy()
    Wg, bg = model.concept_head.weight.detach().numpy(), model.concept_head.bias.detach().numpy()
    Wh, bh = model.class_head.weight.detach().numpy(), model.class_head.bias.detach().numpy()
    for b in range(2):
        zbar = deep[b].reshape(6, -1).mean(axis=1)
        p = 1 / (1 + np.exp(-(Wg @ zbar + bg)))
        np.testing.assert_allclose(probs[b].detach().numpy(), p, rtol=0, atol=1e-10)
        np.testing.assert_allclose(logits[b].detach().numpy(), Wh @ p + bh, rtol=0, atol=1e-10)


def test_proto_zero_concept_weights(small_backbone):
    model = PrototypeCBM(small_backbone, 3, 2, num_prototypes=5, top_n=2).double()
    model.concept_head.weight.data.zero_()
    model.concept_head.bias.data.zero_()
    probs, _, _, _ = proto_forward(model, torch.rand(2, 3, 16, 16, dtype=f64))
    assert torch.equal(probs, torch.full((2, 3), 0.5, dtype=f64))


def test_proto_single_prototype_zero_activation(small_backbone):
    model = PrototypeCBM(small_backbone, 1, 2, num_prototypes=1, top_n=1).double()
    model.concept_head.weight.data.fill_(1.0)
    model.concept_head.bias.data.zero_()
    acts = torch.zeros(1, 1, dtype=f64)
    with torch.no_grad():
        assert float(torch.sigmoid(model.concept_head(acts))) == 0.5


def test_proto_prototypes_unit_norm(small_backbone):
    model = PrototypeCBM(small_backbone, 3, 2, num_prototypes=7, top_n=2)
    torch.testing.assert_close(model.prototypes.norm(dim=1), torch.ones(7, dtype=model.prototypes.dtype))


def test_proto_matches_oracle(small_backbone):
    model = PrototypeCBM(small_backbone, 4, 3, num_prototypes=5, top_n=2, seed=2).double()
    x = torch.rand(2, 3, 16, 16, dtype=f64)
    probs, logits, maps, acts = proto_forward(model, x)
    deep = small_backbone(x).deep.detach().numpy()
    P = model.prototypes.detach().numpy()
    Wg, bg = model.concept_head.weight.detach().numpy(), model.concept_head.bias.detach().numpy()
    Wh, bh = model.class_head.weight.detach().numpy(), model.class_head.bias.detach().numpy()
    for b in range(2):
        m = _sim_oracle(deep[b], P)
        a = m.reshape(5, -1).max(axis=1)
        p = 1 / (1 + np.exp(-(Wg @ a + bg)))
        np.testing.assert_allclose(maps[b].detach().numpy(), m, rtol=0, atol=1e-10)
        np.testing.assert_allclose(acts[b].detach().numpy(), a, rtol=0, atol=1e-10)
        np.testing.assert_allclose(probs[b].detach().numpy(), p, rtol=0, atol=1e-10)
        np.testing.assert_allclose(logits[b].detach().numpy(), Wh @ p + bh, rtol=0, atol=1e-10)


def test_activation_gradient_only_at_argmax(small_backbone):
    model = PrototypeCBM(small_backbone, 3, 2, num_prototypes=4, top_n=2, seed=1).double()
    x = torch.rand(1, 3, 16, 16, dtype=f64)
    deep = small_backbone(x).deep.detach().requires_grad_(True)
    out = model.heads(FeatureMaps(None, deep))
    for j in range(4):
        (g,) = torch.autograd.grad(out.activations[0, j], deep, retain_graph=True)
        cell_norm = g[0].norm(dim=0)
        m = out.maps[0, j].detach()
        u, v = divmod(int(torch.argmax(m)), m.shape[1])
        assert cell_norm[u, v] > 0
        cell_norm[u, v] = 0
        assert torch.count_nonzero(cell_norm) == 0


def test_forward_is_deterministic(small_backbone):
    model = PrototypeCBM(small_backbone, 3, 2, num_prototypes=4, top_n=2).double()
    x = torch.rand(2, 3, 16, 16, dtype=f64)
    a = proto_forward(model, x)
    b = proto_forward(model, x)
    for ta, tb in zip(a, b):
        assert torch.equal(ta, tb)
