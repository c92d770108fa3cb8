import math

import numpy as np
import pytest

from signsal import nn
from signsal.data import synthetic_dataset
from signsal.errors import ConfigError, ShapeError

from oracles import FD_TOL, finite_difference, model_signature, rel_error


def random_images(seed, shape, n=2):
    return np.random.default_rng(seed).uniform(-1, 1, (n, *shape)).astype(np.float32)


class TestBuild:
    def test_same_seed_same_store(self):
        a = nn.build_model(nn.basic_cnn(), 3)
        b = nn.build_model(nn.basic_cnn(), 3)
        assert a.params.keys() == b.params.keys()
        for name in a.params:
            assert a.params[name].tobytes() == b.params[name].tobytes()

    def test_different_seed_differs(self):
        a = nn.build_model(nn.tiny_cnn(), 0)
        b = nn.build_model(nn.tiny_cnn(), 1)
        assert not np.array_equal(a.params["0.weight"], b.params["0.weight"])

    def test_zero_layers_rejected(self):
        with pytest.raises(ConfigError, match="no layers"):
            nn.build_model(nn.ModelConfig((), (3, 8, 8), 2), 0)

    def test_basic_cnn_parameter_count(self):
        # conv 3->32, 32->64, 64->128 (3x3, with bias), then 128*4*4 -> 10
        expected = (3 * 32 * 9 + 32) + (32 * 64 * 9 + 64) + (64 * 128 * 9 + 128) + (128 * 4 * 4 * 10 + 10)
        assert expected == 113738
        assert nn.build_model(nn.basic_cnn(), 0).num_parameters() == expected

    def test_resnet_lite_parameter_count(self):
        w = 16
        expected = (3 * w * 9 + w) + 3 * 2 * (w * w * 9 + w) + (w * 10 + 10)
        assert nn.build_model(nn.resnet_lite(), 0).num_parameters() == expected

    def test_biases_zero_and_weights_bounded(self):
        store = nn.build_model(nn.basic_cnn(), 0)
        assert not store.params["0.bias"].any()
        assert np.abs(store.params["0.weight"]).max() <= math.sqrt(6 / 27)

    def test_shape_chain_error_names_layer(self):
        layers = (nn.conv(4), nn.LayerSpec("relu"), nn.LayerSpec("linear", units=2))
        with pytest.raises(ConfigError, match=r"layer 2 \(linear\)"):
            nn.build_model(nn.ModelConfig(layers, (3, 8, 8), 2), 0)

    def test_final_width_must_match_classes(self):
        layers = (nn.LayerSpec("flatten"), nn.LayerSpec("linear", units=3))
        with pytest.raises(ConfigError, match="logits"):
            nn.build_model(nn.ModelConfig(layers, (1, 2, 2), 2), 0)

    def test_residual_channel_mismatch(self):
        layers = (nn.conv(4), nn.LayerSpec("residual-block", channels=8), nn.LayerSpec("flatten"),
                  nn.LayerSpec("linear", units=2))
        with pytest.raises(ConfigError, match="layer 1"):
            nn.build_model(nn.ModelConfig(layers, (3, 4, 4), 2), 0)


class TestForward:
    def test_argmax(self):
        assert nn.predict([[0.1, 2.0, -1.0]])[0].predicted_class == 1

    def test_tie_goes_to_lowest_index(self):
        assert nn.predict([[0.5, 0.5]])[0].predicted_class == 0

    def test_reproducible(self):
        x = random_images(0, (3, 8, 8))
        a = nn.forward(nn.build_model(nn.tiny_cnn(), 5), x).logits
        b = nn.forward(nn.build_model(nn.tiny_cnn(), 5), x).logits
        assert a.tobytes() == b.tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nn.forward(nn.build_model(nn.tiny_cnn(), 0), np.zeros((1, 3, 9, 9)))

    def test_bias_shift_keeps_argmax(self):
        store = nn.build_model(nn.tiny_cnn(num_classes=5), 0)
        x = random_images(1, (3, 8, 8), n=32)
        before = nn.predicted_classes(nn.forward(store, x).logits)
        store.params["4.bias"] = store.params["4.bias"] + np.float32(3.0)
        after = nn.predicted_classes(nn.forward(store, x).logits)
        np.testing.assert_array_equal(before, after)


class TestCrossEntropy:
    def test_uniform(self):
        loss, _ = nn.cross_entropy_loss(np.zeros((1, 2)), [0])
        assert loss == pytest.approx(math.log(2), abs=1e-6)

    def test_large_logits_stable(self):
        loss, grad = nn.cross_entropy_loss(np.array([[1000.0, 0.0]]), [0])
        assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-6)
        assert np.isfinite(grad).all()

    def test_cotangent_finite_differences(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4, 5)).astype(np.float32)
        labels = np.array([0, 3, 2, 4])
        _, grad = nn.cross_entropy_loss(logits, labels)
        num, _ = finite_difference(lambda z: np.array(nn.cross_entropy_loss(z, labels)[0]), logits, np.array(1.0))
        assert rel_error(grad, num) < FD_TOL


def small_configs():
    return {
        "conv-max": nn.ModelConfig((nn.conv(3), nn.LayerSpec("relu"), nn.LayerSpec("maxpool", window=2, stride=2),
                                    nn.LayerSpec("flatten"), nn.LayerSpec("linear", units=3)), (2, 6, 6), 3),
        "conv-avg-stride": nn.ModelConfig((nn.conv(4, kernel=3, padding=0, stride=2), nn.LayerSpec("relu"),
                                           nn.LayerSpec("avgpool", window=2, stride=1),
                                           nn.LayerSpec("flatten"), nn.LayerSpec("linear", units=2)), (3, 7, 7), 2),
        "residual": nn.resnet_lite((2, 4, 4), 3, width=3),
    }


class TestBackward:
    @pytest.mark.parametrize("name", list(small_configs()))
    def test_input_gradient_matches_finite_differences(self, name):
        config = small_configs()[name]
        store = nn.build_model(config, 11)
        x = random_images(2, config.input_shape)
        for c in range(config.num_classes):
            cot = np.zeros((2, config.num_classes), dtype=np.float32)
            cot[:, c] = 1
            analytic = nn.backward_input(store, nn.forward(store, x), cot)
            num, valid = finite_difference(lambda v: nn.forward(store, v).logits, x, cot,
                                           signature=model_signature(store, nn.forward))
            assert valid.mean() > 0.8
            assert rel_error(analytic[valid], num[valid]) < FD_TOL

    def test_parameter_gradients_match_finite_differences(self):
        config = small_configs()["residual"]
        store = nn.build_model(config, 4)
        x = random_images(3, config.input_shape, n=3)
        labels = np.array([0, 1, 2])
        trace = nn.forward(store, x)
        _, dlogits = nn.cross_entropy_loss(trace.logits, labels)
        _, grads = nn.backward(store, trace, dlogits)
        for name in ["0.weight", "2.conv1.weight", "2.conv2.bias", "7.weight"]:
            def loss_of(v, name=name):
                s = nn.ParamStore(config, {**store.params, name: v})
                return np.array(nn.cross_entropy_loss(nn.forward(s, x).logits, labels)[0])
            num, _ = finite_difference(loss_of, store.params[name], np.array(1.0))
            assert rel_error(grads[name], num) < FD_TOL, name

    def test_zero_cotangent(self):
        store = nn.build_model(nn.tiny_cnn(), 0)
        trace = nn.forward(store, random_images(0, (3, 8, 8)))
        assert not nn.backward_input(store, trace, np.zeros((2, 2))).any()

    def test_linearity_in_cotangent(self):
        store = nn.build_model(nn.tiny_cnn(num_classes=3), 1)
        trace = nn.forward(store, random_images(5, (3, 8, 8)))
        e0, e2 = np.zeros((2, 3)), np.zeros((2, 3))
        e0[:, 0] = 1
        e2[:, 2] = 1
        g0 = nn.backward_input(store, trace, e0)
        g2 = nn.backward_input(store, trace, e2)
        np.testing.assert_allclose(nn.backward_input(store, trace, e0 + e2), g0 + g2, atol=1e-5)

    def test_cotangent_shape_mismatch(self):
        store = nn.build_model(nn.tiny_cnn(), 0)
        trace = nn.forward(store, random_images(0, (3, 8, 8)))
        with pytest.raises(ShapeError):
            nn.backward_input(store, trace, np.zeros((2, 3)))


class TestAdamW:
    @staticmethod
    def scalar_store(value=1.0):
        config = nn.tiny_cnn()
        return nn.ParamStore(config, {"p": np.array([value], dtype=np.float32)})

    def test_zero_gradient_no_decay(self):
        store = self.scalar_store(0.7)
        out = nn.adamw_step(store, {"p": np.zeros(1, np.float32)}, weight_decay=0.0)
        assert out.params["p"][0] == np.float32(0.7)
        assert out.step == 1

    def test_first_step_hand_value(self):
        # decay: 1 - 0.001 * 0.01 = 0.99999; update: 0.001 * m_hat / (sqrt(v_hat) + eps) = 0.001
        out = nn.adamw_step(self.scalar_store(), {"p": np.ones(1, np.float32)},
                            lr=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8, weight_decay=0.01)
        assert out.params["p"][0] == pytest.approx(0.99899, abs=1e-6)

    def test_input_store_untouched(self):
        store = self.scalar_store()
        nn.adamw_step(store, {"p": np.ones(1, np.float32)})
        assert store.params["p"][0] == 1.0 and store.step == 0

    def test_ten_steps_deterministic(self):
        def run():
            store = nn.build_model(nn.tiny_cnn(), 0)
            rng = np.random.default_rng(9)
            for _ in range(10):
                grads = {k: rng.normal(size=v.shape).astype(np.float32) for k, v in store.params.items()}
                store = nn.adamw_step(store, grads)
            return store
        a, b = run(), run()
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


class TestTraining:
    def test_overfits_eight_images(self):
        data = synthetic_dataset(8, 2, 0, (3, 8, 8))
        store, log = nn.train(nn.build_model(nn.tiny_cnn(), 0), data, epochs=200, batch_size=8, lr=1e-3, seed=0)
        assert nn.evaluate_accuracy(store, data) == 1.0
        losses = np.array([e.train_loss for e in log])
        assert losses[-1] < 0.05
        assert np.all(np.diff(losses[5:]) <= 1e-3)

    def test_zero_epochs_returns_input(self):
        store = nn.build_model(nn.tiny_cnn(), 0)
        out, log = nn.train(store, synthetic_dataset(8, 2, 0, (3, 8, 8)), epochs=0)
        assert out is store and log == []

    def test_same_seed_same_log(self):
        data = synthetic_dataset(12, 2, 1, (3, 8, 8))
        test = synthetic_dataset(6, 2, 2, (3, 8, 8))
        runs = [nn.train(nn.build_model(nn.tiny_cnn(), 0), data, 3, 4, 1e-3, 7, test=test) for _ in range(2)]
        assert runs[0][1] == runs[1][1]
        assert all(runs[0][0].params[k].tobytes() == runs[1][0].params[k].tobytes() for k in runs[0][0].params)

    def test_empty_dataset(self):
        with pytest.raises(ConfigError):
            nn.train(nn.build_model(nn.tiny_cnn(), 0), synthetic_dataset(0, 2, 0, (3, 8, 8)), epochs=1)

    def test_evaluate_empty_split(self):
        with pytest.raises(ConfigError):
            nn.evaluate_accuracy(nn.build_model(nn.tiny_cnn(), 0), synthetic_dataset(0, 2, 0, (3, 8, 8)))

    def test_evaluate_all_correct(self):
        data = synthetic_dataset(6, 2, 0, (3, 8, 8))
        store = nn.build_model(nn.tiny_cnn(), 0)
        preds = nn.predicted_classes(nn.logits_for(store, data.images))
        data.labels = preds
        assert nn.evaluate_accuracy(store, data) == 1.0
