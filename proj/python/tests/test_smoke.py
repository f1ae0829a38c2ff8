import numpy as np
import pytest

import difuzcam as dz


def test_mseq_properties():
    for order in range(3, 9):
        s = dz.generate_mseq(order)
        bits = np.array(s.bits)
        n = 2**order - 1
        assert s.period == n
        assert bits.sum() == 2 ** (order - 1)
        x = 2.0 * bits - 1.0
        for k in range(1, n):
            assert np.dot(x, np.roll(x, k)) == -1


def test_factors_match_numpy_circulant():
    s = dz.generate_mseq(5)
    f = dz.build_separable_factors(s, 20, 12)
    bits = np.array(s.bits)
    want = np.array([[bits[(c - r) % 31] for c in range(12)] for r in range(20)])
    np.testing.assert_array_equal(f, want)
    with pytest.raises(ValueError):
        dz.build_separable_factors(s, 40, 12)


def test_forward_project_is_kronecker():
    sys = dz.make_system({"scene": 16, "sensor": 32, "mseq_order": 6})
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 16))
    y = dz.forward_project(x, sys)
    dense = np.kron(sys.phi_r.T, sys.phi_l)
    vec = dense @ x.reshape(-1, order="F")
    np.testing.assert_allclose(y.reshape(-1, order="F"), vec, rtol=1e-10, atol=1e-10)


def test_tikhonov_matches_dense_ridge():
    rng = np.random.default_rng(1)
    L, R = rng.standard_normal((7, 4)), rng.standard_normal((5, 6))
    y = rng.standard_normal((7, 6))
    lam = 0.3
    x = dz.tikhonov_reconstruct(y, L, R, lam)
    A = np.kron(R.T, L)
    ref = np.linalg.solve(A.T @ A + lam * np.eye(A.shape[1]), A.T @ y.reshape(-1, order="F"))
    np.testing.assert_allclose(x.reshape(-1, order="F"), ref, rtol=1e-9)


def test_capture_and_reconstruct():
    sys = dz.make_system({"scene": 16, "sensor": 32, "mseq_order": 6})
    assert len(sys.fingerprint) == 64
    rgb, caption = dz.generate_scene(16, 3)
    assert rgb.shape == (3, 16, 16)
    assert caption
    raw = dz.simulate_capture(rgb, sys, 5)
    assert raw.dtype == np.uint16
    assert raw.shape == (32, 32)
    assert raw.max() < 2**12
    np.testing.assert_array_equal(raw, dz.simulate_capture(rgb, sys, 5))
    rec = dz.tikhonov_rgb(raw, sys, 1000.0)
    assert rec.shape == (3, 16, 16)
    assert 0.0 <= rec.min() and rec.max() <= 1.0


def test_metrics():
    a = np.full((3, 8, 8), 0.5)
    assert dz.psnr(a, np.zeros_like(a)) == pytest.approx(6.0206, abs=1e-4)
    rng = np.random.default_rng(2)
    x = rng.random((3, 16, 16))
    assert dz.ssim(x, x) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        dz.psnr(a, np.zeros((3, 4, 4)))


def test_config_validation():
    cfg = {"seed": 1, "system": {"scene": 16, "sensor": 32, "mseq_order": 6}}
    assert dz.config_hash(cfg) == dz.config_hash(dict(cfg))
    with pytest.raises(ValueError, match="colour"):
        dz.config_hash({**cfg, "colour": 1})
