import numpy as np
import pytest
from PIL import Image

from ssdr import container
from ssdr.kernels import ShapeError, softmax_cross_entropy
from ssdr.network import (
    backward,
    build_classifier,
    build_feature_extractor,
    build_full_network,
    dump_feature_maps,
    forward,
    load_weights,
    save_weights,
)
from ssdr.training import InitMethod, init_params
from oracles import numeric_grad, rel_err


@pytest.fixture(scope="module")
def extractor():
    return build_feature_extractor()


@pytest.fixture(scope="module")
def classifier():
    return build_classifier()


class TestArchitectures:
    def test_extractor_layer_counts(self, extractor):
        kinds = [l.kind for l in extractor.layers]
        assert kinds.count("conv") == 7
        assert kinds.count("maxpool") == 3

    def test_extractor_shapes_and_parameter_count(self, extractor):
        shapes = extractor.param_shapes()
        assert len(shapes) == 14
        assert shapes["conv1_1.weight"] == (64, 3, 3, 3)
        assert shapes["conv3_3.weight"] == (256, 256, 3, 3)
        total = sum(int(np.prod(s)) for s in shapes.values())
        assert total == 1_735_488

    def test_extractor_output_shape(self, extractor):
        rng = np.random.default_rng(0)
        params = init_params(extractor, InitMethod("msra"), rng)
        x = np.zeros((1, 3, 224, 224), np.float32)
        out, _ = forward(extractor, params, x, "eval")
        assert out.shape == (1, 256, 28, 28)
        assert np.all(np.isfinite(out))

    def test_classifier_shape_chain(self, classifier):
        rng = np.random.default_rng(1)
        params = init_params(classifier, InitMethod("gaussian"), rng)
        x = rng.standard_normal((2, 256, 28, 28)).astype(np.float32)
        out, _ = forward(classifier, params, x, "eval")
        assert out.shape == (2, 6)

    def test_classifier_dropout_layers(self, classifier):
        drops = [l for l in classifier.layers if l.kind == "dropout"]
        assert [d.keep_prob for d in drops] == [0.6, 0.8]

    def test_classifier_has_no_fully_connected_layer(self, classifier):
        assert all(l.kind in ("batchnorm", "conv", "relu", "dropout", "global_avg_pool")
                   for l in classifier.layers)
        assert classifier.layers[-1].kind == "global_avg_pool"

    def test_full_network_chains(self):
        full = build_full_network()
        assert full.input_shape == (3, 224, 224)
        assert full.output_channels == 6


class TestForwardBackward:
    def test_eval_forward_is_deterministic(self, classifier):
        rng = np.random.default_rng(2)
        params = init_params(classifier, InitMethod("xavier"), rng)
        x = rng.standard_normal((2, 256, 8, 8)).astype(np.float32)
        a, _ = forward(classifier, params, x, "eval")
        b, _ = forward(classifier, params, x, "eval")
        assert a.tobytes() == b.tobytes()

    def test_channel_mismatch_names_layer(self, classifier):
        rng = np.random.default_rng(3)
        params = init_params(classifier, InitMethod("gaussian"), rng)
        with pytest.raises(ShapeError):
            forward(classifier, params, np.zeros((1, 3, 8, 8), np.float32), "eval")

    def test_zero_grad_output_changes_nothing(self, classifier):
        rng = np.random.default_rng(4)
        params = init_params(classifier, InitMethod("gaussian"), rng)
        x = rng.standard_normal((2, 256, 8, 8)).astype(np.float32)
        out, tape = forward(classifier, params, x, "train", rng)
        backward(classifier, params, tape, np.zeros_like(out))
        assert all(not p.grad.any() for _, p in params.items())

    def test_frozen_prefix_slots_stay_zero(self):
        full = build_full_network()
        rng = np.random.default_rng(5)
        params = init_params(full, InitMethod("gaussian"), rng)
        for name, p in params.items():
            if not name.startswith("cls."):
                p.trainable = False
        x = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
        out, tape = forward(full, params, x, "train", rng)
        _, _, g = softmax_cross_entropy(out, [2])
        backward(full, params, tape, g)
        for name, p in params.items():
            if not name.startswith("cls."):
                assert not p.grad.any(), name
        assert params["cls.conv3.weight"].grad.any()

    def test_backward_rejects_mismatched_tape(self, classifier, extractor):
        rng = np.random.default_rng(6)
        params = init_params(classifier, InitMethod("gaussian"), rng)
        x = rng.standard_normal((1, 256, 8, 8)).astype(np.float32)
        _, tape = forward(classifier, params, x, "train", rng)
        with pytest.raises(ValueError, match="tape"):
            backward(extractor, params, tape, np.zeros((1, 6), np.float32))

    def test_backward_rejects_eval_tape(self, classifier):
        rng = np.random.default_rng(7)
        params = init_params(classifier, InitMethod("gaussian"), rng)
        x = rng.standard_normal((1, 256, 8, 8)).astype(np.float32)
        out, tape = forward(classifier, params, x, "eval")
        with pytest.raises(ValueError, match="train"):
            backward(classifier, params, tape, np.zeros_like(out))

    def test_end_to_end_gradient_matches_finite_differences(self, classifier):
        rng = np.random.default_rng(8)
        params = init_params(classifier, InitMethod("xavier"), rng).astype(np.float64)
        x = rng.standard_normal((2, 256, 4, 4))
        labels = [1, 4]
        drop_rng = lambda: np.random.default_rng(99)

        out, tape = forward(classifier, params, x, "train", drop_rng())
        _, _, g = softmax_cross_entropy(out, labels)
        backward(classifier, params, tape, g)

        w = params["cls.conv2.weight"]
        probe = w.value.reshape(-1)[:40].reshape(1, -1)  # view into the tensor

        def loss():
            o, _ = forward(classifier, params, x, "train", drop_rng())
            return softmax_cross_entropy(o, labels)[0]

        numeric = numeric_grad(loss, probe)
        analytic = w.grad.reshape(-1)[:40]
        assert rel_err(analytic, numeric.reshape(-1)) < 1e-2


class TestWeightsIO:
    def test_save_load_round_trip(self, classifier, tmp_path):
        rng = np.random.default_rng(9)
        params = init_params(classifier, InitMethod("uniform"), rng)
        path = tmp_path / "cls.ssdr"
        save_weights(params, path)
        loaded = load_weights(path, classifier)
        assert loaded.names() == params.names()
        for name, p in params.items():
            assert loaded[name].value.tobytes() == p.value.tobytes()

    def test_classifier_container_names(self, classifier, tmp_path):
        rng = np.random.default_rng(10)
        params = init_params(classifier, InitMethod("uniform"), rng)
        path = tmp_path / "cls.ssdr"
        save_weights(params, path)
        names = set(container.read_tensors(path))
        assert names == {
            "cls.bn.gamma", "cls.bn.beta", "cls.bn.running_mean", "cls.bn.running_var",
            "cls.conv1.weight", "cls.conv1.bias", "cls.conv2.weight", "cls.conv2.bias",
            "cls.conv3.weight", "cls.conv3.bias",
        }

    def test_load_validates_against_spec(self, classifier, extractor, tmp_path):
        rng = np.random.default_rng(11)
        params = init_params(classifier, InitMethod("uniform"), rng)
        path = tmp_path / "cls.ssdr"
        save_weights(params, path)
        with pytest.raises(container.ContainerError):
            load_weights(path, extractor)

    def test_frozen_load(self, extractor, tmp_path):
        rng = np.random.default_rng(12)
        params = init_params(extractor, InitMethod("msra"), rng)
        path = tmp_path / "ext.ssdr"
        save_weights(params, path)
        loaded = load_weights(path, extractor, trainable=False)
        assert all(not p.trainable for _, p in loaded.items())
        assert loaded.parameter_count() == 1_735_488


@pytest.fixture(scope="module")
def ext_params():
    return init_params(build_feature_extractor(), InitMethod("msra"),
                       np.random.default_rng(13))


class TestFeatureMaps:
    def test_pool1_dump(self, ext_params, tmp_path):
        rng = np.random.default_rng(14)
        image = rng.standard_normal((3, 224, 224)).astype(np.float32)
        paths = dump_feature_maps(ext_params, image, 1, tmp_path)
        assert len(paths) == 64
        with Image.open(paths[0]) as im:
            assert im.size == (112, 112) and im.mode == "L"

    def test_pool3_dump_channel_count(self, ext_params, tmp_path):
        image = np.zeros((3, 224, 224), np.float32)
        paths = dump_feature_maps(ext_params, image, 3, tmp_path)
        assert len(paths) == 256
        with Image.open(paths[-1]) as im:
            assert im.size == (28, 28)

    def test_constant_channel_maps_to_black(self, ext_params, tmp_path):
        # A zero input propagates bias-only responses; after relu some
        # channels are exactly constant and must render as black.
        image = np.zeros((3, 224, 224), np.float32)
        paths = dump_feature_maps(ext_params, image, 1, tmp_path)
        arrays = [np.asarray(Image.open(p)) for p in paths]
        constant = [a for a in arrays if a.min() == a.max()]
        assert constant and all(a.max() == 0 for a in constant)

    def test_raw_dump(self, ext_params, tmp_path):
        rng = np.random.default_rng(15)
        image = rng.standard_normal((3, 224, 224)).astype(np.float32)
        raw = tmp_path / "fm.ssdr"
        dump_feature_maps(ext_params, image, 2, tmp_path, raw_path=raw)
        tensors = container.read_tensors(raw)
        assert tensors["pool2"].shape == (128, 56, 56)
