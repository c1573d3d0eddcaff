import numpy as np
import pytest

from mixant import numerics as nx
from mixant.diffusion import build_conditioning
from mixant.errors import ShapeError
from mixant.model import DiffusionAnticipator, MixAntModel, MixMambaLayer, timestep_embedding
from mixant.numerics import Rng, Tensor, no_grad
from mixant.tests.conftest import tiny_config


def _inputs(config, observed=3, horizon=4, seed=0):
    rng = Rng(seed, ("model-inputs",))
    cond = build_conditioning(rng.child("x").normal((observed, config.n_features)), horizon)
    y_t = rng.child("y").normal((observed + horizon, config.n_classes))
    return y_t, cond


def _predict(model, y_t, cond, t=7):
    with no_grad():
        return model(Tensor(y_t), cond, t)


def test_prediction_covers_every_frame(config):
    y_t, cond = _inputs(config)
    result = _predict(MixAntModel(config), y_t, cond)
    assert result.prediction.shape == (7, config.n_classes)
    assert len(result.decisions) == config.n_mixture_blocks
    assert all(0 <= index < config.n_experts for index in result.selections)


def test_shape_mismatch_is_rejected(config):
    y_t, cond = _inputs(config)
    with pytest.raises(ShapeError):
        MixAntModel(config)(Tensor(y_t[:-1]), cond, 3)


def test_single_expert_equals_the_plain_stack_bit_exactly():
    y_t, cond = _inputs(tiny_config())
    mixture = MixAntModel(tiny_config(n_experts=1, n_static_blocks=0), seed=4)
    plain = MixAntModel(tiny_config(n_experts=1, n_static_blocks=2), seed=4)
    a = _predict(mixture, y_t, cond)
    b = _predict(plain, y_t, cond)
    assert len(a.decisions) == 2 and not b.decisions
    assert np.array_equal(a.prediction.data, b.prediction.data)


def test_all_static_blocks_disable_routing():
    model = MixAntModel(tiny_config(n_static_blocks=2))
    assert not model.mixture_blocks
    assert not any("router" in name or "bank" in name for name, _ in model.named_parameters())


def test_parameters_are_named_by_path(config):
    names = [p.name for p in MixAntModel(config).parameters()]
    assert "blocks.1.layer.router.W_g" in names
    assert "blocks.0.layer.fwd.A_log" in names
    assert "blocks.1.layer.fwd.A_log" not in names


def test_zeroed_mlps_leave_only_embedding_and_head(config):
    model = MixAntModel(config)
    for block in model.blocks:
        block.mlp.fc2.W.data[:] = 0.0
        block.mlp.fc2.b.data[:] = 0.0
    y_t, cond = _inputs(config)
    with no_grad():
        step = Tensor(timestep_embedding(7, config.d_model))
        h = model.embed(nx.concat([Tensor(y_t), Tensor(cond.features)], axis=1)) + model.step_proj(step)
        expected = model.head(h).data
    np.testing.assert_array_equal(_predict(model, y_t, cond).prediction.data, expected)


@pytest.mark.parametrize("mixture", [False, True])
def test_tied_layer_commutes_with_time_reversal(mixture):
    config = tiny_config(gate_conditioning="full")
    layer = MixMambaLayer(config, Rng(0, ("layer",)), mixture=mixture)
    for name, param in layer.bwd.named_parameters():
        param.data = getattr(layer.fwd, name).data.copy()
    if mixture:
        layer.bwd_bank.A_log_bank.data = layer.fwd_bank.A_log_bank.data.copy()
    x = Rng(1, ("x",)).normal((6, config.d_model))
    with no_grad():
        out, _ = layer(Tensor(x), 6)
        reversed_out, _ = layer(Tensor(x[::-1].copy()), 6)
    np.testing.assert_allclose(reversed_out.data[::-1], out.data, rtol=1e-10, atol=1e-12)


def test_permuting_experts_permutes_nothing_observable(config):
    model = MixAntModel(config)
    y_t, cond = _inputs(config)
    before = _predict(model, y_t, cond)
    for block in model.mixture_blocks:
        layer = block.layer
        for bank in (layer.fwd_bank, layer.bwd_bank):
            bank.A_log_bank.data = bank.A_log_bank.data[::-1].copy()
        layer.router.W_g.data = layer.router.W_g.data[:, ::-1].copy()
    after = _predict(model, y_t, cond)
    np.testing.assert_allclose(after.prediction.data, before.prediction.data, rtol=1e-12, atol=1e-12)
    assert [config.n_experts - 1 - i for i in before.selections] == after.selections


def test_observed_gating_only_sees_observed_frames():
    y_t, cond = _inputs(tiny_config())
    perturbed = y_t.copy()
    perturbed[cond.observed:] += 3.0
    observed = MixAntModel(tiny_config(n_static_blocks=0))
    full = MixAntModel(tiny_config(n_static_blocks=0, gate_conditioning="full"))
    assert np.array_equal(
        _predict(observed, y_t, cond).decisions[0].gate.data,
        _predict(observed, perturbed, cond).decisions[0].gate.data,
    )
    assert not np.array_equal(
        _predict(full, y_t, cond).decisions[0].gate.data,
        _predict(full, perturbed, cond).decisions[0].gate.data,
    )


def test_timestep_embedding():
    emb = timestep_embedding(0, 6)
    np.testing.assert_array_equal(emb, [0, 0, 0, 1, 1, 1])
    assert timestep_embedding(5, 7).shape == (7,)


def test_f32_models_keep_their_dtype():
    model = MixAntModel(tiny_config(dtype="f32"))
    assert all(p.data.dtype == np.float32 for p in model.parameters())


def test_anticipator_is_deterministic_under_its_stream(config):
    anticipator = DiffusionAnticipator(MixAntModel(config))
    _, cond = _inputs(config)
    a = anticipator.sample(cond, Rng(3, ("s",)))
    b = anticipator.sample(cond, Rng(3, ("s",)))
    assert np.array_equal(a.scores, b.scores)
    assert a.selections == b.selections
    assert len(a.selections) == config.n_mixture_blocks
