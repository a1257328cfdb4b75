import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from coattn_affect.errors import LengthMismatch
from coattn_affect.metrics import CccReport, ccc, ccc_flagged, ccc_loss, evaluate, pearson
from coattn_affect.tensor import GradTape, Tensor

from gradcheck import numeric_grads, relative_error
from oracles import ccc_double_loop

sequences = hnp.arrays(np.float64, st.integers(2, 40), elements=st.floats(-10, 10))


def paired(draw_len=st.integers(2, 40)):
    return draw_len.flatmap(lambda n: st.tuples(
        hnp.arrays(np.float64, n, elements=st.floats(-10, 10)),
        hnp.arrays(np.float64, n, elements=st.floats(-10, 10)),
    ))


class TestCcc:
    def test_perfect_agreement(self):
        assert ccc([1, 2, 3], [1, 2, 3]) == 1.0

    def test_unit_shift(self):
        # population moments: 2*(2/3) / (2/3 + 2/3 + 1)
        assert ccc([1, 2, 3], [2, 3, 4]) == pytest.approx(4 / 7, abs=1e-15)

    def test_constant_pair_with_mean_gap(self):
        assert ccc([1, 1, 1], [2, 2, 2]) == 0.0

    def test_degenerate_is_flagged_not_raised(self):
        assert ccc_flagged([2, 2, 2], [2, 2, 2]) == (0.0, True)
        assert ccc_flagged([1, 2, 3], [1, 2, 3]) == (1.0, False)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            ccc([1, 2, 3], [1, 2])
        with pytest.raises(LengthMismatch):
            ccc([1], [1])

    @settings(max_examples=200, deadline=None)
    @given(paired())
    def test_symmetric_exactly(self, xy):
        x, y = xy
        assert ccc(x, y) == ccc(y, x)

    @settings(max_examples=200, deadline=None)
    @given(paired())
    def test_bounded_by_pearson(self, xy):
        x, y = xy
        value = ccc(x, y)
        assert -1.0 <= value <= 1.0
        assert abs(value) <= abs(pearson(x, y)) + 1e-12

    @settings(max_examples=200, deadline=None)
    @given(sequences, st.floats(-5, 5))
    def test_shift_closed_form(self, x, a):
        sigma2 = np.var(x)
        assume(sigma2 > 1e-6)
        expected = 2 * sigma2 / (2 * sigma2 + a * a)
        assert abs(ccc(x, x + a) - expected) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(paired(), st.floats(0.1, 10), st.floats(-10, 10))
    def test_positive_affine_invariance(self, xy, scale, offset):
        x, y = xy
        assume(np.var(x) > 1e-6 and np.var(y) > 1e-6)
        assert abs(ccc(scale * x + offset, scale * y + offset) - ccc(x, y)) <= 1e-10

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n = int(rng.integers(2, 30))
            x = rng.standard_normal(n) * rng.uniform(0.1, 3)
            y = 0.5 * x + rng.standard_normal(n) + rng.uniform(-1, 1)
            assert abs(ccc(x, y) - ccc_double_loop(list(x), list(y))) <= 1e-10


class TestCccLoss:
    def test_zero_at_agreement(self):
        loss = ccc_loss(Tensor([0.1, -0.3, 0.8]), [0.1, -0.3, 0.8])
        assert abs(loss.item()) <= 1e-15

    def test_unit_shift(self):
        assert ccc_loss(Tensor([1.0, 2.0, 3.0]), [2, 3, 4]).item() == pytest.approx(3 / 7, abs=1e-15)

    def test_degenerate_window_contributes_no_gradient(self):
        pred = Tensor([0.5, 0.5, 0.5], requires_grad=True)
        with GradTape() as tape:
            loss = ccc_loss(pred, [0.5, 0.5, 0.5])
        tape.backward(loss)
        assert loss.item() == 1.0
        assert np.array_equal(pred.grad, np.zeros(3))

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            ccc_loss(Tensor([1.0, 2.0]), [1, 2, 3])

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(3, 40))
            gold = rng.uniform(-1, 1, n)
            p = 0.3 * gold + rng.standard_normal(n) * 0.5
            pred = Tensor(p, requires_grad=True)
            with GradTape() as tape:
                loss = ccc_loss(pred, gold)
            tape.backward(loss)
            (numeric,) = numeric_grads(lambda a: 1.0 - ccc(a, gold), [p.copy()], h=1e-5)
            assert relative_error(pred.grad, numeric) < 1e-5


class TestEvaluate:
    def test_identical(self):
        seq = [0.1, 0.4, -0.2]
        report = evaluate((seq, seq), (seq, seq))
        assert (report.ccc_valence, report.ccc_arousal, report.mean_ccc) == (1.0, 1.0, 1.0)

    def test_mean_is_arithmetic(self):
        assert CccReport(0.5, 0.7).mean_ccc == pytest.approx(0.6, abs=1e-15)

    def test_thousand_points_against_oracle(self):
        rng = np.random.default_rng(2022)
        gold = rng.uniform(-1, 1, (2, 1000))
        pred = 0.6 * gold + 0.3 * rng.standard_normal((2, 1000))
        report = evaluate(pred, gold)
        assert abs(report.ccc_valence - ccc_double_loop(list(pred[0]), list(gold[0]))) <= 1e-10
        assert abs(report.ccc_arousal - ccc_double_loop(list(pred[1]), list(gold[1]))) <= 1e-10
