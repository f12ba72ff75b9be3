import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from spikekit import tensor as T
from spikekit.errors import ConfigError, NumericError, UsageError
from spikekit.gradcheck import check_input_gradient
from spikekit.neuron import (LIF, LifConfig, arctan_surrogate_grad, lif_backward, lif_forward,
                             relaxed)
from spikekit.tensor import Tensor


def reference_lif(x, cfg):
    """Scalar loop of the update rule."""
    out = np.zeros_like(x)
    flat = x.reshape(x.shape[0], -1)
    o = out.reshape(x.shape[0], -1)
    for n in range(flat.shape[1]):
        v = cfg.v_reset
        for t in range(flat.shape[0]):
            h = v + (flat[t, n] - (v - cfg.v_reset)) / cfg.tau
            s = 1.0 if h >= cfg.v_threshold else 0.0
            v = cfg.v_reset if (s and cfg.reset_mode == "hard") else (h - cfg.v_threshold * s
                                                                       if cfg.reset_mode == "soft" else h)
            o[t, n] = s
    return out


def test_zero_input_no_spikes():
    assert not lif_forward(Tensor(np.zeros((5, 3)))).data.any()


def test_hand_example_spike_at_threshold():
    s = lif_forward(Tensor(np.array([[2.0]])))
    assert s.data[0, 0] == 1.0


def test_subthreshold_never_fires():
    assert not lif_forward(Tensor(np.full((200, 1), 0.4))).data.any()


def test_hard_reset_then_refire():
    # H0 = 1 -> spike, V = 0; same input again -> spike
    s = lif_forward(Tensor(np.full((3, 1), 2.0))).data[:, 0]
    np.testing.assert_array_equal(s, [1, 1, 1])


@pytest.mark.parametrize("mode", ["hard", "soft"])
def test_matches_scalar_reference(rng, mode):
    cfg = LifConfig(reset_mode=mode, v_reset=0.0 if mode == "hard" else 0.0)
    x = rng.standard_normal((6, 4, 5)) * 2
    np.testing.assert_array_equal(lif_forward(Tensor(x, dtype=np.float64), cfg).data,
                                  reference_lif(x, cfg))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
                  elements=st.floats(-10, 10)))
@settings(max_examples=50, deadline=None)
def test_binary_and_deterministic(x):
    a = lif_forward(Tensor(x)).data
    b = lif_forward(Tensor(x)).data
    assert set(np.unique(a)) <= {0.0, 1.0}
    assert np.array_equal(a, b)


@given(hnp.arrays(np.float64, 8, elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, 8, elements=st.floats(0, 3)))
@settings(max_examples=50, deadline=None)
def test_monotone_first_step(x, dx):
    s1 = lif_forward(Tensor(x[None], dtype=np.float64)).data[0]
    s2 = lif_forward(Tensor((x + dx)[None], dtype=np.float64)).data[0]
    assert np.all(s2 >= s1)


def test_nonfinite_input():
    with pytest.raises(NumericError):
        lif_forward(Tensor(np.array([[np.nan]])))


def test_config_validation():
    with pytest.raises(ConfigError):
        LifConfig(tau=1.0)
    with pytest.raises(ConfigError):
        LifConfig(surrogate_alpha=0)
    with pytest.raises(ConfigError):
        LifConfig(reset_mode="none")


def test_surrogate_at_threshold():
    assert arctan_surrogate_grad(0.0, 2.0) == pytest.approx(1.0)
    assert arctan_surrogate_grad(0.0, 3.0) == pytest.approx(1.5)


def test_backward_zero_and_missing_context():
    cfg = LifConfig()
    x = np.random.default_rng(0).standard_normal((4, 3))
    saved = {"h": x, "s": (x >= 1).astype(float)}
    np.testing.assert_array_equal(lif_backward(np.zeros((4, 3)), saved, cfg), 0)
    with pytest.raises(UsageError):
        lif_backward(np.zeros((4, 3)), None, cfg)


@pytest.mark.parametrize("mode", ["hard", "soft"])
def test_relaxed_layer_gradcheck(f64, rng, mode):
    cfg = LifConfig(reset_mode=mode, detach_reset=False)
    x = rng.standard_normal((5, 3, 4)) * 1.5 + 0.8
    with relaxed():
        r = check_input_gradient(lambda t: lif_forward(t, cfg), x, n_coords=60)
    assert r.max_rel_error <= 1e-3


def test_single_step_gradient_is_surrogate(f64):
    x = Tensor(np.array([[0.5, 2.0, 3.0]]), requires_grad=True)
    lif_forward(x).sum().backward()
    h = x.data / 2
    np.testing.assert_allclose(x.grad, arctan_surrogate_grad(h - 1, 2.0) / 2)


def test_layer_rate_and_ledger():
    from spikekit.profiler import counting

    layer = LIF()
    layer.name = "sn"
    with counting() as led:
        out = layer(Tensor(np.array([[2.0, 0.0], [2.0, 0.0]])))
    assert layer.last_rate == 0.5
    rec = led.find("sn")[0]
    assert rec.spikes == int(out.data.sum()) and rec.elements == 4
