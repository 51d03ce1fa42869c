import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from aliasim import tensor as T
from aliasim.dataset import ChunkBatch
from aliasim.flow import (FlowConfig, TrainingError, euler_integrate, flow_loss, interpolate,
                          sample_chunk)
from aliasim.gradcheck import grad_check
from aliasim.tensor import Tensor

from conftest import jitter_params, tiny_model

finite = st.floats(-1e3, 1e3, allow_nan=False)


def _batch(spec, model, B=4, seed=0):
    rng = np.random.default_rng(seed)
    H, K = model.config.H, model.config.K
    return ChunkBatch(
        obs=rng.uniform(0, 1, (B, spec.obs_dim)),
        instruction=np.full(B, spec.instruction),
        history=rng.uniform(0, 1, (B, K, spec.obs_dim)),
        chunk=rng.uniform(-0.08, 0.08, (B, H, spec.action_dim)),
        in_ambiguity=np.zeros(B, dtype=bool), z=np.zeros(B, dtype=np.int64),
        episode=np.arange(B), t=np.zeros(B, dtype=np.int64),
    )


def test_interpolate_examples():
    eps, tau = np.random.default_rng(0).normal(size=(2, 3, 4))
    np.testing.assert_array_equal(interpolate(eps, tau, 0.0), eps)
    np.testing.assert_array_equal(interpolate(eps, tau, 1.0), tau)
    np.testing.assert_array_equal(interpolate(np.zeros(2), np.array([2.0, 2.0]), 0.5), [1.0, 1.0])
    with pytest.raises(ValueError):
        interpolate(eps, tau, 1.5)
    with pytest.raises(ValueError):
        interpolate(eps, tau[:2], 0.5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_interpolate_endpoints_exact(eps, tau):
    np.testing.assert_array_equal(interpolate(eps, tau, 0.0), eps)
    np.testing.assert_array_equal(interpolate(eps, tau, 1.0), tau)


@pytest.mark.parametrize("S", [1, 4, 10])
def test_euler_constant_field_is_exact(S):
    rng = np.random.default_rng(S)
    eps, v = rng.normal(size=(2, 5, 3)), rng.normal(size=(5, 3))
    np.testing.assert_array_equal(euler_integrate(lambda X, s: v, eps, S), eps + v)
    np.testing.assert_array_equal(euler_integrate(lambda X, s: np.zeros_like(X), eps, S), eps)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4,), elements=finite), arrays(np.float64, (4,), elements=finite),
       st.integers(1, 50))
def test_euler_constant_field_property(eps, v, S):
    np.testing.assert_array_equal(euler_integrate(lambda X, s: v, eps, S), eps + v)


def test_euler_matches_plain_recursion():
    # a state- and time-dependent field: the running-mean form is the same recursion
    field = lambda X, s: -X * (1.0 + s)
    eps = np.random.default_rng(1).normal(size=6)
    X = eps.copy()
    for i in range(10):
        X = X + 0.1 * field(X, i / 10)
    np.testing.assert_allclose(euler_integrate(field, eps, 10), X, rtol=1e-13, atol=1e-15)
    times = []
    euler_integrate(lambda X, s: times.append(s) or X * 0, eps, 4)
    assert times == [0.0, 0.25, 0.5, 0.75]
    with pytest.raises(ValueError):
        euler_integrate(field, eps, 0)


def test_flow_config_validation():
    assert FlowConfig().steps == 10
    with pytest.raises(ValueError):
        FlowConfig(steps=0)
    with pytest.raises(ValueError):
        FlowConfig(time_dist="beta")


def test_zero_predictor_loss_is_mean_squared_target():
    spec, m = tiny_model("frame_only")
    b = _batch(spec, m)
    tau = m.normalize(b.chunk)
    loss = flow_loss(m, b, eps=np.zeros_like(tau), s=0.5)     # fresh head outputs exactly zero
    assert loss.data == pytest.approx(np.mean(np.sum(tau ** 2, axis=(1, 2))), rel=1e-12)


def test_target_equal_noise_leaves_velocity_norm():
    spec, m = tiny_model("intent", seed=2)
    jitter_params(m, 3)
    b = _batch(spec, m)
    tau = m.normalize(b.chunk)
    s = np.full(len(b), 0.3)
    loss = flow_loss(m, b, eps=tau, s=s)
    with T.no_grad():
        v = m.velocity(Tensor(tau), s, m.context(b.obs, b.instruction, b.history)).data
    assert loss.data == pytest.approx(np.mean(np.sum(v ** 2, axis=(1, 2))), rel=1e-12)


def test_loss_invariant_to_batch_order():
    spec, m = tiny_model("intent", seed=4)
    jitter_params(m, 5)
    b = _batch(spec, m, B=6)
    rng = np.random.default_rng(6)
    eps = rng.normal(size=b.chunk.shape)
    s = rng.uniform(size=6)
    perm = rng.permutation(6)
    a = flow_loss(m, b, eps=eps, s=s).data
    c = flow_loss(m, b[perm], eps=eps[perm], s=s[perm]).data
    assert abs(a - c) <= 1e-12 * abs(a)


@pytest.mark.parametrize("variant", ["intent", "frame_only", "fusion_only", "raw_uniform"])
def test_flow_loss_gradients(variant):
    spec, m = tiny_model(variant, seed=7, raw_k=2)
    jitter_params(m, 8)
    b = _batch(spec, m, B=2)
    rng = np.random.default_rng(9)
    eps = rng.normal(size=b.chunk.shape)
    s = rng.uniform(size=2)
    params = [p for _, p in m.parameters()]
    rep = grad_check(lambda: flow_loss(m, b, eps=eps, s=s), params, max_coords=3,
                     rng=np.random.default_rng(0))
    assert rep.max_rel_error < 1e-4


def test_flow_loss_rejects_non_finite():
    spec, m = tiny_model("frame_only")
    b = _batch(spec, m)
    m.head.out.bias.data[:] = np.inf
    with pytest.raises(TrainingError):
        flow_loss(m, b, np.random.default_rng(0))


def test_sampler_is_seeded_and_fixed_context():
    spec, m = tiny_model("intent", seed=1)
    jitter_params(m, 2)
    b = _batch(spec, m, B=3)
    with T.no_grad():
        C = m.context(b.obs, b.instruction, b.history)
    a = sample_chunk(m, C, 10, np.random.default_rng(11))
    c = sample_chunk(m, C, 10, np.random.default_rng(11))
    np.testing.assert_array_equal(a, c)
    assert a.shape == (3, m.config.H, spec.action_dim)
    # zero field: the fresh head returns the noise unchanged
    _, fresh = tiny_model("frame_only")
    eps = np.random.default_rng(3).normal(size=(3, fresh.config.H, spec.action_dim))
    np.testing.assert_array_equal(
        sample_chunk(fresh, fresh.context(b.obs, b.instruction, b.history), 5, eps=eps), eps)
