import numpy as np
import pytest

from rectseg.model import (ArchConfig, combined_prediction, forward, forward_logits, init_params,
                           load_checkpoint, save_checkpoint)
from rectseg.uncertainty import kl_variance


@pytest.fixture(scope="module")
def net():
    return init_params(11, ArchConfig())


def test_same_seed_bit_identical():
    a, b = init_params(5), init_params(5)
    for name in a.param_names():
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()


def test_seed_sensitivity():
    a, b = init_params(1), init_params(2)
    assert not np.array_equal(a.params["trunk0.w"].data, b.params["trunk0.w"].data)


def test_biases_zero_weights_centred():
    net = init_params(3)
    assert not net.params["trunk1.b"].data.any()
    w = net.params["trunk3.w"].data
    bound = np.sqrt(6.0 / (9 * 32))
    assert np.abs(w).max() <= bound
    assert abs(w.mean()) < 0.1 * bound


def test_default_shapes(net, rng):
    P, P_aux = forward(net, rng.uniform(size=(32, 32, 3)))
    assert P.shape == P_aux.shape == (32, 32, 5)


@pytest.mark.parametrize("widths,tap", [((8,), None), ((8, 8), 1), ((4, 6, 8, 10, 12), 3)])
def test_output_shape_any_depth(widths, tap, rng):
    if tap is None:
        with pytest.raises(ValueError, match="aux_tap"):
            ArchConfig(widths=widths, aux_tap=1)
        return
    net = init_params(0, ArchConfig(widths=widths, aux_tap=tap, num_classes=3))
    P, P_aux = forward(net, rng.uniform(size=(2, 7, 9, 3)))
    assert P.shape == P_aux.shape == (2, 7, 9, 3)


@pytest.mark.parametrize("tap", [0, 4, 7])
def test_aux_tap_out_of_range(tap):
    with pytest.raises(ValueError):
        init_params(0, ArchConfig(aux_tap=tap))


def test_eval_is_pure(net, rng):
    x = rng.uniform(size=(16, 16, 3))
    a = forward(net, x, "eval")
    b = forward(net, x, "eval")
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_train_mode_dropout_changes_output(net, rng):
    x = rng.uniform(size=(16, 16, 3))
    a, _ = forward(net, x, "train", np.random.default_rng(1))
    b, _ = forward(net, x, "train", np.random.default_rng(2))
    assert not np.array_equal(a, b)


def test_probabilities_normalised(net, rng):
    P, P_aux = forward(net, rng.uniform(size=(12, 12, 3)))
    np.testing.assert_allclose(P.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(P_aux.sum(-1), 1.0, atol=1e-6)
    assert P.min() >= 0 and P.max() <= 1


def test_heads_disagree_at_random_init(rng):
    kls = []
    for seed in range(3):
        P, P_aux = forward(init_params(seed), rng.uniform(size=(8, 8, 3)))
        kls.append(kl_variance(P, P_aux).values.mean())
    assert min(kls) > 0


def test_train_mode_needs_rng(net):
    with pytest.raises(ValueError):
        forward_logits(net, np.zeros((4, 4, 3)), "train")


class TestCombinedPrediction:
    def test_beta_zero_is_primary_argmax(self, rng):
        P = rng.dirichlet(np.ones(4), size=(6, 6))
        Q = rng.dirichlet(np.ones(4), size=(6, 6))
        np.testing.assert_array_equal(combined_prediction(P, Q, 1.0, 0.0), P.argmax(-1))

    def test_weighted_example(self):
        P = np.array([[0.4, 0.6]])
        Q = np.array([[0.9, 0.1]])
        assert combined_prediction(P, Q, 1.0, 0.5)[0] == 0
        assert combined_prediction(P, Q, 1.0, 0.0)[0] == 1

    @pytest.mark.parametrize("c", [0.001, 0.3, 2.0, 7.0, 1e6])
    def test_joint_rescaling_invariance(self, c, rng):
        P = rng.dirichlet(np.ones(5), size=(10, 10))
        Q = rng.dirichlet(np.ones(5), size=(10, 10))
        np.testing.assert_array_equal(combined_prediction(P, Q, 1.0, 0.5),
                                      combined_prediction(P, Q, c * 1.0, c * 0.5))

    def test_ties_go_low(self):
        P = np.full((1, 3), 1 / 3)
        assert combined_prediction(P, P, 1.0, 1.0)[0] == 0

    def test_zero_weights_rejected(self):
        P = np.full((1, 2), 0.5)
        with pytest.raises(ValueError):
            combined_prediction(P, P, 0.0, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            combined_prediction(np.ones((2, 2)), np.ones((3, 2)), 1, 1)


def test_checkpoint_roundtrip(tmp_path):
    net = init_params(9, ArchConfig(widths=(4, 6, 8), aux_tap=1, dropout_rate=0.3, num_classes=3))
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.config == net.config
    for name in net.param_names():
        assert back.params[name].data.tobytes() == net.params[name].data.tobytes()
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(p)
    net = init_params(0)
    save_checkpoint(net, p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(p)
