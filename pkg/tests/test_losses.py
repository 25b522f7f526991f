import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from unimos.errors import NumericError, ShapeError, ValidationError
from unimos.losses import (
    LossReport,
    PseudoLabel,
    combine_total,
    combine_unsup,
    make_pseudo_labels,
    tal_loss,
    unsup_stream_loss,
)

from oracles import (
    cross_entropy_reference,
    pseudo_reference,
    random_instance,
    tal_reference,
    unsup_reference,
)


def pixel(probs):
    return torch.tensor(probs, dtype=torch.float64).view(1, -1, 1, 1)


class TestTAL:
    def test_annotated_pixel(self):
        loss = tal_loss(pixel([0.1, 0.8, 0.05, 0.05]), torch.tensor([[[1]]]), {1})
        assert float(loss) == pytest.approx(0.22314355131420976, abs=1e-12)

    def test_background_merges_unannotated_organs(self):
        loss = tal_loss(pixel([0.5, 0.3, 0.1, 0.1]), torch.tensor([[[0]]]), {1})
        assert float(loss) == pytest.approx(-math.log(0.7), abs=1e-12)
        assert float(loss) == pytest.approx(0.35667494393873245, abs=1e-12)

    def test_one_hot_is_zero(self):
        probs = torch.zeros(1, 4, 2, 2, dtype=torch.float64)
        labels = torch.tensor([[[0, 1], [2, 3]]])
        probs.scatter_(1, labels.unsqueeze(1), 1.0)
        assert float(tal_loss(probs, labels, {1, 2, 3})) == pytest.approx(0.0, abs=1e-6)

    def test_label_outside_annotated_rejected(self):
        with pytest.raises(ValidationError, match="outside annotated"):
            tal_loss(pixel([0.25] * 4), torch.tensor([[[2]]]), {1})

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tal_loss(torch.rand(1, 4, 2, 2), torch.zeros(1, 3, 2, dtype=torch.long), {1})

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            probs, labels, annotated, _ = random_instance(rng)
            got = float(tal_loss(torch.from_numpy(probs), torch.from_numpy(labels), annotated))
            assert got == pytest.approx(tal_reference(probs, labels, annotated), rel=1e-9)

    def test_full_annotation_is_cross_entropy(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            probs, _, _, full = random_instance(rng)
            k = probs.shape[1] - 1
            got = float(tal_loss(torch.from_numpy(probs), torch.from_numpy(full), range(1, k + 1)))
            assert got == pytest.approx(cross_entropy_reference(probs, full), rel=1e-9)
            ref = torch.nn.functional.nll_loss(torch.from_numpy(probs).log(), torch.from_numpy(full))
            assert got == pytest.approx(float(ref), rel=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        h = 1e-5
        for _ in range(20):
            probs, labels, annotated, _ = random_instance(rng)
            p = torch.from_numpy(probs).requires_grad_(True)
            lab = torch.from_numpy(labels)
            tal_loss(p, lab, annotated).backward()
            fd = np.zeros_like(probs)
            for idx in np.ndindex(probs.shape):
                up, dn = probs.copy(), probs.copy()
                up[idx] += h
                dn[idx] -= h
                fd[idx] = (tal_reference(up, labels, annotated) - tal_reference(dn, labels, annotated)) / (2 * h)
            err = np.linalg.norm(p.grad.numpy() - fd) / max(np.linalg.norm(fd), 1e-12)
            assert err < 1e-4

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_non_negative(self, seed):
        probs, labels, annotated, _ = random_instance(np.random.default_rng(seed))
        assert float(tal_loss(torch.from_numpy(probs), torch.from_numpy(labels), annotated)) >= 0.0


class TestPseudoLabels:
    @pytest.mark.parametrize("tau, keep", [(0.5, True), (0.95, False)])
    def test_argmax_and_threshold(self, tau, keep):
        y = make_pseudo_labels(pixel([0.2, 0.6, 0.1, 0.1]), tau)
        assert int(y.labels) == 1
        assert bool(y.keep) is keep

    def test_uniform_tie_breaks_to_background(self):
        y = make_pseudo_labels(pixel([0.25] * 4), 0.3)
        assert int(y.labels) == 0
        assert not bool(y.keep)

    def test_matches_reference(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            probs, *_ = random_instance(rng)
            tau = float(rng.uniform(0.2, 1.0))
            y = make_pseudo_labels(torch.from_numpy(probs), tau)
            labels, keep = pseudo_reference(probs, tau)
            np.testing.assert_array_equal(y.labels.numpy(), labels)
            np.testing.assert_array_equal(y.keep.numpy(), keep)

    def test_no_gradient(self):
        p = torch.softmax(torch.randn(1, 3, 4, 4, requires_grad=True), dim=1)
        y = make_pseudo_labels(p, 0.5)
        assert not y.labels.requires_grad and not y.keep.requires_grad

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_kept_fraction_monotone_in_tau(self, seed):
        probs, *_ = random_instance(np.random.default_rng(seed), max_side=6)
        p = torch.from_numpy(probs)
        fractions = [make_pseudo_labels(p, t).kept_fraction for t in (0.0, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99, 1.0)]
        assert all(a >= b for a, b in zip(fractions, fractions[1:]))


class TestUnsupStream:
    def test_all_masked_is_zero(self):
        p = torch.softmax(torch.randn(2, 4, 3, 3, dtype=torch.float64), 1)
        y = PseudoLabel(torch.ones(2, 3, 3, dtype=torch.long), torch.zeros(2, 3, 3, dtype=torch.bool), 0.9)
        assert float(unsup_stream_loss(p, y)) == 0.0

    def test_single_kept_pixel(self):
        p = torch.full((1, 4, 2, 2), 0.25, dtype=torch.float64)
        labels = torch.full((1, 2, 2), 2)
        keep = torch.zeros(1, 2, 2, dtype=torch.bool)
        keep[0, 0, 1] = True
        loss = unsup_stream_loss(p, PseudoLabel(labels, keep, 0.5))
        assert float(loss) == pytest.approx(-math.log(0.25) / 4, abs=1e-12)
        assert float(loss) == pytest.approx(0.34657359027997264, abs=1e-12)

    def test_perfect_agreement_is_zero(self):
        labels = torch.randint(0, 4, (2, 3, 3))
        p = torch.zeros(2, 4, 3, 3, dtype=torch.float64).scatter_(1, labels.unsqueeze(1), 1.0)
        y = PseudoLabel(labels, torch.ones(2, 3, 3, dtype=torch.bool), 0.9)
        assert float(unsup_stream_loss(p, y)) == pytest.approx(0.0, abs=1e-6)

    def test_matches_reference(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            probs, *_ = random_instance(rng)
            k1 = probs.shape[1]
            pseudo = rng.integers(0, k1, size=(probs.shape[0],) + probs.shape[2:])
            keep = rng.random(pseudo.shape) < 0.6
            y = PseudoLabel(torch.from_numpy(pseudo), torch.from_numpy(keep), 0.5)
            got = float(unsup_stream_loss(torch.from_numpy(probs), y))
            ref = unsup_reference(probs, pseudo.tolist(), keep.tolist())
            assert got == pytest.approx(ref, rel=1e-9, abs=1e-300)

    def test_shape_mismatch(self):
        y = PseudoLabel(torch.zeros(1, 2, 2, dtype=torch.long), torch.ones(1, 2, 2, dtype=torch.bool), 0.5)
        with pytest.raises(ShapeError):
            unsup_stream_loss(torch.rand(1, 3, 3, 3), y)


class TestCombination:
    def test_unit_weights(self):
        assert combine_unsup(1.0, 1.0, 1.0) == 1.0
        assert combine_total(1.0, combine_unsup(1.0, 1.0, 1.0)) == 1.0

    def test_unsup_arithmetic(self):
        assert combine_unsup(0.2, 0.4, 0.6) == pytest.approx(0.45, abs=1e-15)

    def test_total_arithmetic(self):
        assert combine_total(0.8, combine_unsup(0.0, 0.0, 0.0)) == pytest.approx(0.4, abs=1e-15)

    @pytest.mark.parametrize("bad, stream", [((math.nan, 0, 0), "s1"), ((0, math.inf, 0), "s2"), ((0, 0, -math.inf), "fp")])
    def test_non_finite_names_stream(self, bad, stream):
        with pytest.raises(NumericError) as info:
            combine_unsup(*bad)
        assert info.value.stream == stream

    def test_non_finite_supervised(self):
        with pytest.raises(NumericError) as info:
            combine_total(math.nan, 0.0)
        assert info.value.stream == "sup"

    def test_report_roundtrip_and_check(self):
        l_u = combine_unsup(0.3, 0.5, 0.7)
        rep = LossReport(3, 1.2, 0.3, 0.5, 0.7, l_u, combine_total(1.2, l_u), 0.1, 0.2, 0.3, 5e-4)
        rep.check()
        row = dict(zip(("step", "l_sup", "l_s1", "l_s2", "l_fp", "l_u", "total", "kept_s1", "kept_s2", "kept_fp", "lr"), rep.csv_row()))
        assert LossReport.from_row(row) == rep
        bad = LossReport(3, 1.2, 0.3, 0.5, 0.7, l_u + 1e-3, rep.total, 0, 0, 0, 5e-4)
        with pytest.raises(NumericError):
            bad.check()
