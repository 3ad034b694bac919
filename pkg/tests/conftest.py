"""Shared fixtures: small models and cached traces for the whole suite."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import sparse_engine as se

settings.register_profile(
    "suite",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


SMALL_CONFIG = se.ModelConfig(
    n_layers=2, d_model=64, d_ff=128, n_heads=4, n_kv_heads=2,
    vocab_size=211, max_seq_len=192, seed=42,
)

# Mid-size model for the statistical acceptance checks: kv heads kept narrow
# so the full/selective activated-parameter gap stays within the matching band.
MID_CONFIG = se.ModelConfig(
    n_layers=2, d_model=256, d_ff=1024, n_heads=8, n_kv_heads=2,
    vocab_size=512, max_seq_len=512, seed=1234,
)


@pytest.fixture(scope="session")
def small_model():
    return se.init_model(SMALL_CONFIG)


@pytest.fixture(scope="session")
def small_tokens():
    return se.make_rng(7).integers(0, SMALL_CONFIG.vocab_size, size=48, dtype=np.int64)


@pytest.fixture(scope="session")
def small_traces(small_model, small_tokens):
    return se.collect_traces(small_model, small_tokens)


@pytest.fixture(scope="session")
def mid_model():
    return se.init_model(MID_CONFIG)


@pytest.fixture(scope="session")
def mid_model_homogeneous():
    return se.init_model(MID_CONFIG, up_channels="homogeneous")


# Independent 16-token segments: the attention-context site needs many fresh
# context windows for its pooled quantiles to transfer to held-out streams.
def _token_segments(config, seed, n_segments=16, segment_len=16):
    return se.make_rng(seed).integers(
        0, config.vocab_size, size=(n_segments, segment_len), dtype=np.int64
    )


@pytest.fixture(scope="session")
def mid_calib_traces(mid_model):
    return se.collect_traces(mid_model, _token_segments(MID_CONFIG, 100))


@pytest.fixture(scope="session")
def mid_holdout_traces(mid_model):
    return se.collect_traces(mid_model, _token_segments(MID_CONFIG, 101))


@pytest.fixture(scope="session")
def mid_homog_calib_traces(mid_model_homogeneous):
    return se.collect_traces(mid_model_homogeneous, _token_segments(MID_CONFIG, 100))


@pytest.fixture(scope="session")
def mid_homog_holdout_traces(mid_model_homogeneous):
    return se.collect_traces(mid_model_homogeneous, _token_segments(MID_CONFIG, 101))
