import math

import numpy as np
import pytest
import torch

from segland.core import ArchConfig, PrototypeBank
from segland.errors import DegenerateBasisError, DegenerateError, DimensionMismatchError, ShapeError, UnknownArchError
from segland.model import (
    DECODERS,
    ReferenceEncoder,
    SegmentationNetwork,
    build_decoder,
    build_encoder,
    cosine_scores,
    extract_features,
    images_to_tensor,
    init_novel_prototypes,
    initial_prototypes,
    orthogonality_loss,
    predict,
    project_residual,
    score_classes,
    upernetplus_decode,
)


def bank_of(rows, temperature=0.1) -> PrototypeBank:
    rows = torch.as_tensor(rows, dtype=torch.float32)
    return PrototypeBank(prototypes=rows, frozen_mask=[False] * rows.shape[0], temperature=temperature)


class TestFeatureExtraction:
    def test_output_shape(self, tiny_arch):
        encoder, decoder = build_encoder(tiny_arch).eval(), build_decoder(tiny_arch).eval()
        with torch.no_grad():
            fmap = extract_features(torch.zeros(1, 3, 64, 64), encoder, decoder)
        assert tuple(fmap.shape) == (1, tiny_arch.embed_dim, 64, 64)

    def test_pyramid_strides(self):
        levels = ReferenceEncoder((8, 16, 16, 32))(torch.zeros(1, 3, 64, 64))
        assert [tuple(l.shape[-2:]) for l in levels] == [(16, 16), (8, 8), (4, 4), (2, 2)]

    def test_indivisible_input(self, tiny_arch):
        with pytest.raises(ShapeError):
            extract_features(torch.zeros(1, 3, 65, 64), build_encoder(tiny_arch), build_decoder(tiny_arch))

    @pytest.mark.parametrize("decoder", sorted(DECODERS))
    def test_zero_pyramid_decodes_to_zero(self, decoder):
        arch = ArchConfig(widths=(8, 16, 16, 32), fpn_dim=16, ppm_dim=8, embed_dim=16, decoder=decoder)
        dec = build_decoder(arch).eval()
        pyramid = [torch.zeros(1, w, 16 // 2 ** i, 16 // 2 ** i) for i, w in enumerate(arch.widths)]
        with torch.no_grad():
            out = upernetplus_decode(pyramid, dec)
        assert tuple(out.shape) == (1, 16, 64, 64)
        assert torch.count_nonzero(out) == 0

    def test_replay_is_bit_identical(self, tiny_arch):
        torch.manual_seed(0)
        net_a = SegmentationNetwork(tiny_arch, bank_of(torch.eye(4, 16)), 4).eval()
        torch.manual_seed(0)
        net_b = SegmentationNetwork(tiny_arch, bank_of(torch.eye(4, 16)), 4).eval()
        x = images_to_tensor(np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8))
        with torch.no_grad():
            assert torch.equal(net_a(x), net_b(x))

    def test_unknown_arch(self):
        with pytest.raises(UnknownArchError):
            build_encoder(ArchConfig(encoder="hrnet48"))
        with pytest.raises(UnknownArchError):
            build_decoder(ArchConfig(decoder="segformer"))


class TestScoring:
    def test_cosine_examples(self):
        p = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
        f = torch.tensor([[1.0, 0.0, 0.0]])
        logits = score_classes(f, bank_of(p, temperature=0.1))
        torch.testing.assert_close(logits, torch.tensor([[10.0, 0.0, -10.0]]))

    def test_zero_vectors_score_zero(self):
        logits = cosine_scores(torch.zeros(1, 3), torch.tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]), 0.1)
        assert torch.count_nonzero(logits) == 0
        logits = cosine_scores(torch.ones(1, 3), torch.zeros(1, 3), 0.1)
        assert torch.count_nonzero(logits) == 0

    def test_width_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            score_classes(torch.zeros(1, 4, 2, 2), bank_of(torch.eye(3)))

    def test_appending_rows_keeps_base_logits(self):
        g = torch.Generator().manual_seed(0)
        fmap = torch.randn(2, 8, 4, 4, generator=g)
        bank = bank_of(torch.randn(4, 8, generator=g))
        grown = bank.append(torch.randn(3, 8, generator=g))
        assert torch.equal(score_classes(fmap, grown)[:, :4], score_classes(fmap, bank))

    def test_row_rescaling_invariance(self):
        g = torch.Generator().manual_seed(1)
        fmap = torch.randn(1, 8, 4, 4, generator=g)
        rows = torch.randn(5, 8, generator=g)
        scaled = rows * torch.tensor([[0.5], [2.0], [3.0], [10.0], [0.1]])
        a = score_classes(fmap, bank_of(rows, temperature=1.0))
        b = score_classes(fmap, bank_of(scaled, temperature=1.0))
        torch.testing.assert_close(a, b, atol=1e-6, rtol=0)
        assert torch.equal(a.argmax(dim=1), b.argmax(dim=1))


class TestProjection:
    def test_hand_example(self):
        residual = project_residual(torch.tensor([[1.0, 2.0, 3.0]]), torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
        torch.testing.assert_close(residual, torch.tensor([[0.0, 0.0, 3.0]]))

    def test_in_span_and_full_basis(self):
        base = torch.tensor([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]])
        f = 2.0 * base[0:1] - base[1:2]
        assert project_residual(f, base).abs().max() < 1e-6
        f = torch.randn(5, 3)
        assert project_residual(f, torch.eye(3)).abs().max() < 1e-6

    def test_orthogonal_and_idempotent(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(100):
            base = torch.randn(int(torch.randint(1, 12, (1,), generator=g)), 64, generator=g)
            f = torch.randn(3, 64, 2, 2, generator=g)
            r = project_residual(f, base)
            unit = base / base.norm(dim=1, keepdim=True)
            dots = torch.einsum("nd...,bd->nb...", r.double(), unit.double()).abs()
            bound = 1e-6 * f.double().norm(dim=1, keepdim=True)
            assert bool((dots <= bound).all())
            torch.testing.assert_close(project_residual(r, base), r, atol=1e-6, rtol=0)

    def test_degenerate_basis(self):
        with pytest.raises(DegenerateBasisError):
            project_residual(torch.ones(1, 3), torch.tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))

    def test_novel_init_lies_in_residual(self):
        g = torch.Generator().manual_seed(0)
        base = torch.eye(4, 8)
        features = torch.randn(1, 8, 4, 4, generator=g)
        labels = torch.zeros(1, 4, 4, dtype=torch.long)
        labels[0, :2] = 5
        rows = init_novel_prototypes(features, labels, base, [5, 6], generator=g)
        assert tuple(rows.shape) == (2, 8)
        torch.testing.assert_close(rows.norm(dim=1), torch.ones(2))
        assert rows[:, :4].abs().max() < 1e-6


class TestOrthogonalityLoss:
    def test_orthonormal_bank(self):
        for seed in range(10):
            rows = initial_prototypes(6, 16, torch.Generator().manual_seed(seed)).double()
            assert float(orthogonality_loss(rows)) <= 1e-12

    def test_analytic_values(self):
        assert float(orthogonality_loss(torch.ones(2, 3, dtype=torch.float64))) == pytest.approx(1.0, abs=1e-9)
        # three unit vectors with pairwise cosine 0.5
        rows = torch.tensor([[1.0, 0.0, 0.0], [0.5, math.sqrt(3) / 2, 0.0], [0.5, math.sqrt(3) / 6, math.sqrt(2 / 3)]],
                            dtype=torch.float64)
        assert float(orthogonality_loss(rows)) == pytest.approx(0.75, abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(20):
            rows = torch.randn(4, 8, generator=g, dtype=torch.float64, requires_grad=True)
            assert torch.autograd.gradcheck(orthogonality_loss, (rows,), eps=1e-6, atol=1e-6, rtol=1e-4)

    def test_degenerate(self):
        with pytest.raises(DegenerateError):
            orthogonality_loss(torch.eye(1, 3))
        with pytest.raises(DegenerateError):
            orthogonality_loss(torch.tensor([[1.0, 0.0], [0.0, 0.0]]))


class TestPredict:
    def test_tie_goes_to_lowest_id(self):
        probs, labels = predict(torch.zeros(2, 1, 1))
        np.testing.assert_allclose(probs.probs[0, 0], [0.5, 0.5])
        assert labels.labels[0, 0] == 0

    def test_softmax_by_hand(self):
        probs, labels = predict(torch.tensor([[[math.log(2)]], [[0.0]]]))
        np.testing.assert_allclose(probs.probs[0, 0], [2 / 3, 1 / 3], rtol=1e-6)
        assert labels.labels[0, 0] == 0

    def test_shift_invariance(self):
        logits = torch.randn(5, 3, 3, generator=torch.Generator().manual_seed(0))
        a, _ = predict(logits)
        b, _ = predict(logits + 7.5)
        np.testing.assert_allclose(a.probs, b.probs, atol=1e-6)
