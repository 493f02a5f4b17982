import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from vcae.autoencoder import (AeConfig, AutoencoderModel, ModelFormatError, TrainingError, decode,
                              encode, encode_all, init_model, load_model, loss_and_grads, save_model,
                              train)
from vcae.dataset import synth_digits
from vcae.numerics import ShapeError


def matmul_loops(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


@pytest.fixture
def model():
    return init_model(AeConfig(m=20, p=8, n=3, seed=4))


@pytest.fixture(scope="module")
def digits():
    return synth_digits(50, seed=1)


class TestMaps:
    def test_zero(self, model):
        assert_array_equal(encode(model, np.zeros(20)), np.zeros(3))
        assert_array_equal(decode(model, np.zeros(3)), np.zeros(20))

    def test_linearity(self, model):
        rng = np.random.default_rng(0)
        x, y = rng.random((2, 20))
        assert_allclose(encode(model, 2.5 * x), 2.5 * encode(model, x), atol=1e-10)
        h1, h2 = rng.normal(size=(2, 3))
        assert_allclose(decode(model, h1 + h2), decode(model, h1) + decode(model, h2), atol=1e-10)

    def test_against_loop_oracle(self, model):
        x = np.random.default_rng(1).random((4, 20))
        h = matmul_loops(matmul_loops(x, model.W1), model.W2)
        assert np.max(np.abs(encode(model, x) - h)) <= 1e-12
        r = matmul_loops(matmul_loops(h, model.W3), model.W4)
        assert np.max(np.abs(decode(model, h) - r)) <= 1e-12

    def test_shape_errors(self, model):
        with pytest.raises(ShapeError):
            encode(model, np.zeros(19))
        with pytest.raises(ShapeError):
            decode(model, np.zeros(4))

    def test_encode_all(self, model):
        x = np.random.default_rng(2).random((30, 20))
        H = encode_all(model, x)
        assert H.shape == (30, 3)
        for i in (0, 11, 29):
            assert np.max(np.abs(H[i] - encode(model, x[i]))) <= 1e-12
        assert_array_equal(encode_all(model, x[:1])[0], encode(model, x[0]))
        assert_allclose(encode_all(model, x[::-1]), H[::-1], rtol=0, atol=1e-12)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(m=5, p=5, n=2), dict(m=8, p=4, n=1), dict(learning_rate=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AeConfig(**kw)

    def test_model_shapes_checked(self):
        c = AeConfig(m=6, p=4, n=3)
        ws = init_model(c).weights
        with pytest.raises(ShapeError):
            AutoencoderModel(ws[0].T, *ws[1:], config=c)


class TestGradients:
    @pytest.mark.parametrize("relu", [False, True])
    def test_central_differences(self, relu):
        rng = np.random.default_rng(3)
        ws = [rng.normal(size=s) for s in [(6, 4), (4, 3), (3, 4), (4, 6)]]
        x = rng.random((2, 6))
        _, grads = loss_and_grads(ws, x, relu)
        eps = 1e-6
        for w, g in zip(ws, grads):
            num = np.zeros_like(w)
            for idx in np.ndindex(w.shape):
                keep = w[idx]
                w[idx] = keep + eps
                up, _ = loss_and_grads(ws, x, relu)
                w[idx] = keep - eps
                down, _ = loss_and_grads(ws, x, relu)
                w[idx] = keep
                num[idx] = (up - down) / (2 * eps)
            rel = np.linalg.norm(g - num) / np.linalg.norm(num)
            assert rel <= 1e-5


class TestTraining:
    def test_loss_decreases(self):
        data = synth_digits(50, seed=0)
        _, report = train(data, AeConfig(epochs=20, p=32, seed=0))
        assert len(report.epoch_losses) == 20
        assert report.final_loss < report.epoch_losses[0]

    def test_zero_learning_rate(self, digits):
        model, report = train(digits, AeConfig(epochs=4, learning_rate=0.0))
        assert np.ptp(report.epoch_losses) <= 1e-12
        for a, b in zip(model.weights, init_model(AeConfig(learning_rate=0.0)).weights):
            assert_array_equal(a, b)

    def test_bitwise_reproducible(self, digits):
        cfg = AeConfig(epochs=2, p=16, seed=7)
        a, ra = train(digits, cfg)
        b, rb = train(digits, cfg)
        for wa, wb in zip(a.weights, b.weights):
            assert_array_equal(wa, wb)
        assert ra.epoch_losses == rb.epoch_losses

    def test_zero_epochs(self, digits):
        model, report = train(digits, AeConfig(epochs=0))
        assert report.epoch_losses == []

    def test_nan_names_epoch_and_batch(self, digits):
        # the first step is finite; the huge update blows up the next batch
        with pytest.raises(TrainingError, match=r"epoch 1, batch 2"):
            train(digits, AeConfig(epochs=1, learning_rate=1e300))

    def test_rejects_bad_input(self, digits):
        with pytest.raises(ShapeError):
            train(digits, AeConfig(m=100, p=10, n=3))
        with pytest.raises(ValueError):
            train(np.zeros((0, 784)), AeConfig())
        with pytest.raises(ValueError):
            train(np.full((3, 784), 2.0), AeConfig())


class TestPersistence:
    def test_round_trip_bytes(self, model, tmp_path):
        save_model(model, tmp_path / "a")
        back = load_model(tmp_path / "a")
        save_model(back, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        probe = np.random.default_rng(5).random(20)
        assert_array_equal(encode(back, probe), encode(model, probe))
        assert (back.config.m, back.config.p, back.config.n) == (20, 8, 3)

    def test_header_layout(self, model, tmp_path):
        save_model(model, tmp_path / "a")
        buf = (tmp_path / "a").read_bytes()
        assert len(buf) == 16 + 12 + 8 * (20 * 8 * 2 + 8 * 3 * 2)
        assert np.frombuffer(buf, "<u4", count=3, offset=16).tolist() == [20, 8, 3]

    def test_bad_magic(self, model, tmp_path):
        save_model(model, tmp_path / "a")
        buf = bytearray((tmp_path / "a").read_bytes())
        buf[0] ^= 0xFF
        (tmp_path / "a").write_bytes(bytes(buf))
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "a")

    def test_bad_version_and_size(self, model, tmp_path):
        save_model(model, tmp_path / "a")
        buf = bytearray((tmp_path / "a").read_bytes())
        (tmp_path / "b").write_bytes(bytes(buf[:-8]))
        with pytest.raises(ModelFormatError, match="expected"):
            load_model(tmp_path / "b")
        buf[12] = 2
        (tmp_path / "c").write_bytes(bytes(buf))
        with pytest.raises(ModelFormatError, match="version"):
            load_model(tmp_path / "c")
