import math

import numpy as np
import pytest

from faor.geometry import latitude_weights
from faor.metrics import (
    PSNR_CAP,
    MetricReport,
    evaluate_pair,
    psnr,
    quantize,
    ssim_map,
    to_luminance,
    ws_psnr,
    ws_ssim,
)

OFFSET_16_DB = 20 * math.log10(255 / 16)  # 24.0478...


def pair(h, w, seed=0, channels=None):
    rng = np.random.default_rng(seed)
    shape = (h, w) if channels is None else (h, w, channels)
    return rng.uniform(0, 255, shape), rng.uniform(0, 255, shape)


def loop_ws_psnr(a, b):
    """Explicit double loop over rows and columns."""
    h, w = a.shape
    num = den = 0.0
    for i in range(h):
        wi = math.cos((i + 0.5 - h / 2) / h * math.pi)
        for j in range(w):
            num += wi * (a[i, j] - b[i, j]) ** 2
            den += wi
    return 10 * math.log10(255.0 ** 2 / (num / den))


class TestPsnr:
    def test_offset_16(self):
        a = np.random.default_rng(0).uniform(0, 200, (8, 16))
        assert psnr(a, a + 16) == pytest.approx(24.048, abs=1e-3)
        assert ws_psnr(a, a + 16) == pytest.approx(24.048, abs=1e-3)
        assert ws_psnr(a, a + 16) == pytest.approx(OFFSET_16_DB, abs=1e-12)

    def test_identical_capped(self):
        a, _ = pair(8, 16)
        assert psnr(a, a) == PSNR_CAP
        assert ws_psnr(a, a) == PSNR_CAP

    def test_tiny_error_capped(self):
        a, _ = pair(8, 16)
        assert ws_psnr(a, a + 1e-6) == PSNR_CAP

    def test_loop_oracle(self):
        a, b = pair(8, 16, seed=1)
        assert abs(ws_psnr(a, b) - loop_ws_psnr(a, b)) < 1e-10

    def test_single_row_matches_psnr(self):
        a, b = pair(1, 32, seed=2)
        assert ws_psnr(a, b) == psnr(a, b)

    def test_symmetry(self):
        a, b = pair(6, 12, seed=3, channels=3)
        assert ws_psnr(a, b) == ws_psnr(b, a)
        assert psnr(a, b) == psnr(b, a)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            ws_psnr(np.zeros((4, 8)), np.zeros((4, 9)))

    def test_equator_error_counts_more(self):
        h = 16
        base = np.zeros((h, 32))
        pole, equator = base.copy(), base.copy()
        pole[0] = 10.0
        equator[h // 2] = 10.0
        assert ws_psnr(base, equator) < ws_psnr(base, pole)
        # the dB gap is exactly the log of the weight ratio
        w = latitude_weights(h)
        assert ws_psnr(base, pole) - ws_psnr(base, equator) == pytest.approx(10 * math.log10(w[h // 2] / w[0]), abs=1e-10)

    def test_monotone_in_equator_error(self):
        base = np.zeros((8, 16))
        vals = []
        for e in (1.0, 2.0, 4.0, 8.0):
            b = base.copy()
            b[0] = 3.0
            b[4] = e
            vals.append(ws_psnr(base, b))
        assert np.all(np.diff(vals) < 0)


class TestWsSsim:
    def test_identical_exactly_one(self):
        a, _ = pair(32, 64, seed=4)
        assert ws_ssim(a, a) == 1.0
        a3, _ = pair(16, 32, seed=5, channels=3)
        assert ws_ssim(a3, a3) == 1.0

    def test_inverted_negative(self):
        rng = np.random.default_rng(6)
        a = np.where(rng.uniform(size=(24, 48)) < 0.5, 20.0, 230.0)
        assert ws_ssim(a, 255 - a) < 0

    def test_matches_reference_ssim_with_unit_weights(self):
        structural_similarity = pytest.importorskip("skimage.metrics").structural_similarity
        a, b = pair(32, 64, seed=7)
        ref = structural_similarity(a, b, data_range=255, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        assert ws_ssim(a, b, weights=np.ones(32)) == pytest.approx(ref, abs=1e-12)

    def test_weighted_mean_of_map(self):
        a, b = pair(20, 30, seed=8)
        m = ssim_map(a, b)
        w = latitude_weights(20)[5:15]
        expected = np.sum(w[:, None] * m) / (np.sum(w) * m.shape[1])
        assert ws_ssim(a, b) == pytest.approx(expected, abs=1e-14)

    def test_symmetry(self):
        a, b = pair(16, 24, seed=9)
        assert ws_ssim(a, b) == pytest.approx(ws_ssim(b, a), abs=1e-15)

    def test_too_small(self):
        with pytest.raises(ValueError):
            ws_ssim(np.zeros((10, 40)), np.zeros((10, 40)))

    def test_mismatch(self):
        with pytest.raises(ValueError):
            ws_ssim(np.zeros((12, 40)), np.zeros((12, 41)))


class TestEvaluatePair:
    def test_quantize(self):
        np.testing.assert_array_equal(quantize([0.0, 0.5 / 255, 1.0, 1.2, -0.1]), [0, 1, 255, 255, 0])

    def test_luminance_range(self):
        assert to_luminance([0, 0, 0]) == 16.0
        assert to_luminance([255, 255, 255]) == pytest.approx(235.0, abs=1e-12)

    def test_identical(self):
        img = np.random.default_rng(0).uniform(size=(16, 32, 3))
        r = evaluate_pair(img, img)
        assert r == {"ws_psnr": 99.0, "ws_ssim": 1.0, "psnr": 99.0}

    def test_matches_manual_pipeline(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(12, 24, 3)), rng.uniform(size=(12, 24, 3))
        ya, yb = to_luminance(quantize(a)), to_luminance(quantize(b))
        assert evaluate_pair(a, b)["ws_psnr"] == ws_psnr(ya, yb)
        assert evaluate_pair(a, b, channel="rgb")["ws_psnr"] == ws_psnr(quantize(a), quantize(b))

    def test_bad_channel(self):
        with pytest.raises(ValueError):
            evaluate_pair(np.zeros((12, 12, 3)), np.zeros((12, 12, 3)), channel="lab")


class TestMetricReport:
    def test_mean_and_csv(self):
        r = MetricReport()
        r.add("a", {"ws_psnr": 30.0, "ws_ssim": 0.8, "psnr": 31.0})
        r.add("b", {"ws_psnr": 32.0, "ws_ssim": 0.9, "psnr": 33.0})
        assert r.mean() == pytest.approx({"ws_psnr": 31.0, "ws_ssim": 0.85, "psnr": 32.0})
        lines = r.to_csv().splitlines()
        assert lines[0] == "image,ws_psnr,ws_ssim,psnr"
        assert lines[-1] == "mean,31.000000,0.850000,32.000000"
        assert len(lines) == 4

    def test_table(self):
        r = MetricReport()
        r.add("pano", {"ws_psnr": 99.0, "ws_ssim": 1.0, "psnr": 99.0})
        t = r.table().splitlines()
        assert "WS-PSNR" in t[0]
        assert t[2].startswith("pano") and "99.000" in t[2]
