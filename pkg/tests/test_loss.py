import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import micro_instance, numeric_grad, ref_ce, ref_distance, ref_rectified, rel_error
from rectseg.loss import (DISTANCES, EmptyMaskError, RectifiedLossConfig, cross_entropy, loss_floor_probe,
                          pixel_distance, rectified_loss, rectified_loss_terms)
from rectseg.tensor import Tensor, tsum


def _logits(p):
    return Tensor(np.log(np.asarray(p, dtype=np.float64)))


def _value(fn, *arrays):
    return fn(*[Tensor(a) for a in arrays]).item()


class TestCrossEntropy:
    def test_single_pixel(self):
        ce = cross_entropy(_logits([[[0.25, 0.75]]]), np.array([[1]]), np.array([[True]]))
        assert ce.item() == pytest.approx(-math.log(0.75), abs=1e-12)
        assert ce.item() == pytest.approx(0.2877, abs=1e-4)

    def test_perfect_fit_is_small_but_clamped(self):
        z = np.full((2, 2, 3), -50.0)
        z[..., 1] = 50.0
        ce = cross_entropy(Tensor(z), np.ones((2, 2), int), np.ones((2, 2), bool)).item()
        assert 0 <= ce < 1e-12
        # wrong labels saturate at -log(1e-8)
        wrong = cross_entropy(Tensor(z), np.zeros((2, 2), int), np.ones((2, 2), bool)).item()
        assert wrong == pytest.approx(-math.log(1e-8))

    def test_masked_pixels_ignored(self, rng):
        z = rng.normal(size=(3, 3, 4))
        labels = rng.integers(0, 4, (3, 3))
        valid = np.zeros((3, 3), bool)
        valid[1, 2] = True
        assert cross_entropy(Tensor(z), labels, valid).item() == pytest.approx(ref_ce(z, labels)[1, 2])

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            cross_entropy(Tensor(np.zeros((2, 2, 2))), np.zeros((2, 2), int), np.zeros((2, 2), bool))

    def test_gradient(self, rng):
        for _ in range(10):
            z, _, labels, valid = micro_instance(rng)
            t = Tensor(z.copy(), requires_grad=True)
            cross_entropy(t, labels, valid).backward()
            fd = numeric_grad(lambda a: ref_ce(a, labels)[valid].mean(), z)
            assert rel_error(t.grad, fd).max() < 1e-4


class TestDistance:
    def test_closed_forms(self):
        p, q = _logits([[[0.8, 0.2]]]), _logits([[[0.5, 0.5]]])
        fwd = pixel_distance(p, q, "kl_forward").data[0, 0]
        rev = pixel_distance(p, q, "kl_reversed").data[0, 0]
        mse = pixel_distance(p, q, "mse").data[0, 0]
        assert fwd == pytest.approx(0.8 * math.log(1.6) + 0.2 * math.log(0.4), abs=1e-12)
        assert fwd == pytest.approx(0.1927, abs=1e-4)
        assert rev == pytest.approx(0.5 * math.log(0.5 / 0.8) + 0.5 * math.log(0.5 / 0.2), abs=1e-12)
        assert rev == pytest.approx(0.2231, abs=1e-4)
        assert mse == pytest.approx(0.18, abs=1e-12)

    @pytest.mark.parametrize("kind", DISTANCES)
    def test_identical_heads_give_zero(self, kind, rng):
        z = rng.normal(size=(3, 2, 4))
        assert np.all(pixel_distance(Tensor(z), Tensor(z.copy()), kind).data == 0)

    def test_unknown_kind(self):
        z = Tensor(np.zeros((1, 1, 2)))
        with pytest.raises(ValueError, match="distance"):
            pixel_distance(z, z, "js")
        with pytest.raises(ValueError):
            RectifiedLossConfig(distance="js")

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pixel_distance(Tensor(np.zeros((1, 1, 2))), Tensor(np.zeros((1, 1, 3))), "mse")

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31), kind=st.sampled_from(DISTANCES))
    def test_nonnegative_and_matches_reference(self, seed, kind):
        rng = np.random.default_rng(seed)
        z, za, _, _ = micro_instance(rng, scale=8.0)
        d = pixel_distance(Tensor(z), Tensor(za), kind).data
        assert d.min() >= 0
        np.testing.assert_allclose(d, ref_distance(z, za, kind), atol=1e-12)


class TestRectified:
    def test_single_pixel_value(self):
        p, q = _logits([[[0.8, 0.2]]]), _logits([[[0.5, 0.5]]])
        loss = rectified_loss(p, q, np.array([[0]]), np.array([[True]])).item()
        d = 0.8 * math.log(1.6) + 0.2 * math.log(0.4)
        assert loss == pytest.approx(math.exp(-d) * -math.log(0.8) + d, abs=1e-12)
        assert loss == pytest.approx(0.3767, abs=1e-4)

    @pytest.mark.parametrize("kind", DISTANCES)
    @pytest.mark.parametrize("mode", ["detached", "full"])
    def test_equal_heads_reduce_to_ce(self, kind, mode, rng):
        z, _, labels, valid = micro_instance(rng, 4, 4, 3)
        cfg = RectifiedLossConfig(kind, mode)
        a = Tensor(z)
        assert rectified_loss(a, a, labels, valid, cfg).item() == cross_entropy(a, labels, valid).item()

    def test_terms(self, rng):
        z, za, labels, valid = micro_instance(rng, 3, 3, 3)
        loss, ce_term, var_term = rectified_loss_terms(Tensor(z), Tensor(za), labels, valid)
        assert loss.item() == pytest.approx(ce_term + var_term, abs=1e-12)
        assert var_term == pytest.approx(ref_distance(z, za, "kl_forward")[valid].mean())

    def test_aux_ce_weight(self, rng):
        z, za, labels, valid = micro_instance(rng, 3, 3, 3)
        base = rectified_loss(Tensor(z), Tensor(za), labels, valid).item()
        extra = rectified_loss(Tensor(z), Tensor(za), labels, valid, RectifiedLossConfig(aux_ce_weight=0.3)).item()
        assert extra - base == pytest.approx(0.3 * ref_ce(za, labels)[valid].mean())

    @pytest.mark.parametrize("kind", DISTANCES)
    @pytest.mark.parametrize("mode", ["detached", "full"])
    def test_gradients_match_finite_differences(self, kind, mode, rng):
        cfg = RectifiedLossConfig(kind, mode)
        for _ in range(8):
            z, za, labels, valid = micro_instance(rng)
            a = Tensor(z.copy(), requires_grad=True)
            b = Tensor(za.copy(), requires_grad=True)
            rectified_loss(a, b, labels, valid, cfg).backward()
            z0, za0 = z.copy(), za.copy()
            if mode == "full":
                fz = lambda x: ref_rectified(x, za0, labels, valid, kind)
                fa = lambda x: ref_rectified(z0, x, labels, valid, kind)
            else:
                # weight held at its value for the unperturbed logits
                fz = lambda x: ref_rectified(x, za0, labels, valid, kind, weight_from=(z0, za0))
                fa = lambda x: ref_rectified(z0, x, labels, valid, kind, weight_from=(z0, za0))
            assert rel_error(a.grad, numeric_grad(fz, z)).max() < 1e-4
            assert rel_error(b.grad, numeric_grad(fa, za)).max() < 1e-4

    def test_large_disagreement_mutes_label_gradient(self):
        # detached mode: grad(loss) - grad(D term) is the CE path, which equals exp(-D) * grad(ce)
        z = np.log(np.array([[[0.6, 0.4]]]))
        labels, valid = np.array([[1]]), np.array([[True]])

        def grad_of(fn):
            a = Tensor(z.copy(), requires_grad=True)
            fn(a).backward()
            return a.grad

        g_ce = grad_of(lambda a: cross_entropy(a, labels, valid))
        muted = []
        for far in (0.0, 2.0, 4.0, 8.0):
            za = Tensor(np.array([[[far, -far]]]))
            g_full = grad_of(lambda a: rectified_loss(a, za, labels, valid))
            g_d = grad_of(lambda a: tsum(pixel_distance(a, za, "kl_forward")))
            d = ref_distance(z, za.data, "kl_forward")[0, 0]
            np.testing.assert_allclose(g_full - g_d, math.exp(-d) * g_ce, atol=1e-12)
            muted.append(np.abs(g_full - g_d).sum())
        assert all(x > y for x, y in zip(muted, muted[1:]))
        assert muted[-1] < 1e-2 * muted[0]


class TestFloorProbe:
    def test_constant(self):
        r = loss_floor_probe([0.4] * 200)
        assert r["floor"] == pytest.approx(0.4) and not r["converged_to_zero"]

    def test_decaying(self):
        assert loss_floor_probe(np.geomspace(1.0, 1e-5, 300))["converged_to_zero"]

    def test_too_short(self):
        with pytest.raises(ValueError):
            loss_floor_probe([0.1] * 50)
