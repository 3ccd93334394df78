import math

import pytest
import torch

from semiuformer.core import ShapeError
from semiuformer.metrics import EvalReport, evaluate_pairs, psnr, ssim


class TestPsnr:
    def test_identical_images_hit_cap(self):
        a = torch.rand(3, 16, 16)
        assert psnr(a, a) == 99.0

    def test_uniform_error(self):
        a = torch.zeros(3, 16, 16, dtype=torch.float64)
        assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9

    def test_constant_half_vs_zero(self):
        a = torch.full((3, 16, 16), 0.5)
        b = torch.zeros(3, 16, 16)
        assert abs(psnr(a, b) - 10 * math.log10(4.0)) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(torch.rand(3, 8, 8), torch.rand(3, 8, 9))

    def test_strictly_decreasing_in_noise(self):
        g = torch.Generator().manual_seed(0)
        img = torch.rand(3, 32, 32, generator=g) * 0.5 + 0.25
        noise = torch.randn(3, 32, 32, generator=g)
        vals = [psnr(img, (img + s * noise).clamp(0, 1)) for s in (0.01, 0.05, 0.1)]
        assert vals[0] > vals[1] > vals[2]

    def test_invariant_under_shared_permutation(self):
        g = torch.Generator().manual_seed(1)
        a = torch.rand(3, 8, 8, generator=g)
        b = torch.rand(3, 8, 8, generator=g)
        perm = torch.randperm(64, generator=g)
        ap = a.reshape(3, -1)[:, perm].reshape(3, 8, 8)
        bp = b.reshape(3, -1)[:, perm].reshape(3, 8, 8)
        assert psnr(a, b) == psnr(ap, bp)


class TestSsim:
    def test_identical_images(self):
        a = torch.rand(3, 16, 16)
        assert abs(ssim(a, a) - 1.0) < 1e-12

    def test_constant_images_closed_form(self):
        a = torch.zeros(3, 16, 16)
        b = torch.ones(3, 16, 16)
        c1 = 0.01**2
        assert abs(ssim(a, b) - c1 / (1 + c1)) < 1e-9

    def test_symmetry(self):
        g = torch.Generator().manual_seed(2)
        a = torch.rand(3, 16, 16, generator=g)
        b = torch.rand(3, 16, 16, generator=g)
        assert ssim(a, b) == ssim(b, a)

    def test_range(self):
        g = torch.Generator().manual_seed(3)
        for _ in range(5):
            a = torch.rand(3, 16, 16, generator=g)
            b = torch.rand(3, 16, 16, generator=g)
            assert -1.0 <= ssim(a, b) <= 1.0

    def test_too_small_rejected(self):
        with pytest.raises(ShapeError):
            ssim(torch.rand(3, 8, 8), torch.rand(3, 8, 8))


class TestEvaluate:
    def test_identity_network_on_clean_data(self, tmp_path):
        clean = torch.rand(4, 3, 16, 16)
        out = tmp_path / "report.tsv"
        report = evaluate_pairs(lambda x: x, clean, clean, out=out)
        assert report.mean_psnr == 99.0
        assert abs(report.mean_ssim - 1.0) < 1e-9
        rows = out.read_text().splitlines()
        assert len(rows) == 1 + 4 + 1  # header + per-image + aggregate
        assert rows[-1].startswith("AGGREGATE")

    def test_aggregate_is_arithmetic_mean(self):
        g = torch.Generator().manual_seed(4)
        hazy = torch.rand(3, 3, 16, 16, generator=g)
        clean = torch.rand(3, 3, 16, 16, generator=g)
        report = evaluate_pairs(lambda x: x, hazy, clean)
        assert abs(report.mean_psnr - sum(p for _, p, _ in report.per_image) / 3) < 1e-9
        assert abs(report.mean_ssim - sum(s for _, _, s in report.per_image) / 3) < 1e-9

    def test_report_file_deterministic(self, tmp_path):
        g = torch.Generator().manual_seed(5)
        hazy = torch.rand(2, 3, 16, 16, generator=g)
        clean = torch.rand(2, 3, 16, 16, generator=g)
        p1, p2 = tmp_path / "a.tsv", tmp_path / "b.tsv"
        evaluate_pairs(lambda x: x * 0.9, hazy, clean, out=p1)
        evaluate_pairs(lambda x: x * 0.9, hazy, clean, out=p2)
        assert p1.read_bytes() == p2.read_bytes()
