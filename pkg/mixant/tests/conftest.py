import pytest

from mixant.config import build_model_config
from mixant.corpus import build_grammar, generate_corpus


def tiny_config(**overrides):
    """A model small enough for exact and finite-difference checks."""
    values = dict(
        n_classes=3,
        n_features=4,
        d_model=8,
        expand=2,
        d_state=4,
        conv_width=2,
        n_blocks=2,
        n_static_blocks=1,
        n_experts=2,
        diffusion_steps=50,
        ddim_steps=5,
        epochs=1,
        batch_size=2,
        learning_rate=1e-2,
        weight_decay=0.0,
        train_alphas=[0.3],
        train_betas=[0.3, 0.5],
    )
    values.update(overrides)
    return build_model_config(**values)


def tiny_grammar(feature_noise=0.1):
    return build_grammar(
        {
            "n_classes": 3,
            "n_features": 4,
            "feature_noise": feature_noise,
            "activities": [
                {"name": "a", "segments": [
                    {"action": 0, "min_frames": 3, "max_frames": 5},
                    {"action": 1, "min_frames": 3, "max_frames": 5},
                    {"action": 2, "min_frames": 3, "max_frames": 5},
                ]},
                {"name": "b", "segments": [
                    {"action": 2, "min_frames": 3, "max_frames": 5},
                    {"action": 0, "min_frames": 3, "max_frames": 5},
                    {"action": 1, "min_frames": 3, "max_frames": 5},
                ]},
            ],
        }
    )


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def grammar():
    return tiny_grammar()


@pytest.fixture
def videos(grammar):
    return generate_corpus(grammar, 6, seed=3)
