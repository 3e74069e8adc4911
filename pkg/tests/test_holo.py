import numpy as np
import pytest

from fdm.autodiff import Tensor, finite_difference_check, no_grad, ops
from fdm.holo import (
    LayerDelta,
    ReferenceBeam,
    cross_gram,
    layer_deltas,
    modulate,
    modulation_factor,
    orthogonality_loss,
    train_layerwise_sequential,
    write_layer_report,
)
from fdm.model import FDM, ModelConfig
from fdm.train.corpus import Corpus, encode


def beam_from(w, lam=0.01):
    return ReferenceBeam(Tensor(np.asarray(w, float), requires_grad=True), lam)


def small_corpus():
    text = "".join(f"line {i} says {i * 7 % 13} and then stops.\n" for i in range(400))
    data = encode(text)
    return Corpus(data[:-2000], data[-2000:])


@pytest.mark.parametrize("heads", [1, 3])
@pytest.mark.parametrize("layer", [0, 1])
def test_zero_beam_leaves_logits_bitwise(heads, layer):
    model = FDM(ModelConfig(T=16))
    toks = np.random.default_rng(0).integers(0, 258, 16)
    with no_grad():
        base = model.forward(toks).data
        model.attach_beam(layer, heads)
        assert np.array_equal(model.forward(toks).data, base)


def test_single_head_formula():
    w = np.array([[[0.5, -1.0], [2.0, 0.0]]])  # (1, D=2, d=2)
    x = np.array([1.0, 2.0])
    h = np.array([1 + 1j, 2.0])
    expected = h * (1 + np.tanh(w[0] @ x))
    assert np.allclose(modulate(Tensor(h), Tensor(x), beam_from(w)).data, expected, atol=1e-15)


def test_single_head_multihead_reduction_is_exact():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(1, 4, 3))
    x = rng.normal(size=(5, 3))
    direct = 1.0 + np.tanh(x @ w[0].T)
    assert np.array_equal(modulation_factor(Tensor(x), beam_from(w)).data, direct)
    assert float(orthogonality_loss(beam_from(w)).data) == 0.0


def test_equal_heads_match_one_head():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(1, 4, 3))
    x = Tensor(rng.normal(size=(3,)))
    one = modulation_factor(x, beam_from(w)).data
    three = modulation_factor(x, beam_from(np.repeat(w, 3, axis=0))).data
    assert np.allclose(one, three, atol=1e-15)


def test_multihead_formula_oracle():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 4, 5))
    x = rng.normal(size=5)
    h = rng.normal(size=4) + 1j * rng.normal(size=4)
    expected = h * np.mean([1 + np.tanh(w[i] @ x) for i in range(3)], axis=0)
    assert np.abs(modulate(Tensor(h), Tensor(x), beam_from(w)).data - expected).max() < 1e-14


def test_orthogonality_example():
    w = np.zeros((2, 1, 2))
    w[0, 0, 0] = w[1, 0, 0] = 1.0
    assert float(orthogonality_loss(beam_from(w, lam=1.0)).data) == 2.0
    assert cross_gram(beam_from(w)) == 2.0


def test_factor_bounds():
    rng = np.random.default_rng(4)
    f = modulation_factor(Tensor(rng.normal(size=(50, 3))), beam_from(rng.normal(0, 3, (2, 4, 3)))).data
    assert f.min() >= 0.0 and f.max() <= 2.0


def test_beam_gradient():
    rng = np.random.default_rng(5)
    beam = ReferenceBeam(Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True), lam=0.3)
    x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    h = Tensor(rng.normal(size=(6, 3)) + 1j * rng.normal(size=(6, 3)), requires_grad=True)

    def loss(_):
        y = modulate(h, x, beam)
        return ops.sum(ops.real(y * ops.conj(y))) + orthogonality_loss(beam)

    assert finite_difference_check(loss, [beam.weight, x, h]) < 1e-6


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        modulate(Tensor(np.ones(3, complex)), Tensor(np.ones(2)), beam_from(np.zeros((1, 4, 2))))
    with pytest.raises(ValueError):
        ReferenceBeam.zeros(0, 4, 2)


def test_zero_steps_give_zero_deltas(tmp_path):
    model = FDM(ModelConfig())
    rows = train_layerwise_sequential(model, small_corpus(), [0, 1], steps_per_layer=0, seq_len=32, eval_windows=4)
    assert [r.layer for r in rows] == [0, 1]
    assert all(r.delta_loss == 0.0 and r.delta_ppl == 0.0 for r in rows)
    write_layer_report(tmp_path / "r.csv", rows)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "layer,loss_before,loss_after,delta_loss,delta_ppl"


def test_layerwise_rejects_bad_layers():
    model = FDM(ModelConfig())
    with pytest.raises(IndexError):
        train_layerwise_sequential(model, small_corpus(), [2], steps_per_layer=0)
    with pytest.raises(ValueError):
        train_layerwise_sequential(model, small_corpus(), [0, 0], steps_per_layer=0)


def test_layerwise_training_touches_only_beams():
    model = FDM(ModelConfig())
    before = model.state_dict()
    rows = train_layerwise_sequential(model, small_corpus(), [1, 0], steps_per_layer=3, heads=2,
                                      batch_size=2, seq_len=32, eval_windows=4)
    after = model.state_dict()
    for n, v in before.items():
        assert np.array_equal(after[n], v), n
    assert sorted(model.beams) == [0, 1]
    assert all(np.any(model.beams[l].weight.data != 0) for l in (0, 1))
    assert [r.layer for r in rows] == [1, 0]


def test_layer_deltas_chain():
    model = FDM(ModelConfig())
    rng = np.random.default_rng(6)
    beams = {l: ReferenceBeam(Tensor(rng.normal(0, 0.1, (1, model.cfg.D, model.cfg.d_model))), layer=l)
             for l in (0, 1)}
    x = rng.integers(0, 258, (2, 16))
    rows = layer_deltas(model, beams, x, np.roll(x, -1, axis=1))
    assert rows[0].loss_after == rows[1].loss_before
    assert model.beams == {}
    assert LayerDelta(0, 1.0, 1.0).delta_ppl == 0.0
