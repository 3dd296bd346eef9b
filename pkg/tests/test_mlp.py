import json
import math

import numpy as np
import pytest

from hybrid_dae import mlp
from hybrid_dae.mlp import (
    InputSpec,
    SurrogateNet,
    WeightFileError,
    default_input_spec,
    forward,
    input_jacobian,
    load_weights,
    random_net,
    save_weights,
)


def zero_net(hidden=(4,), n_out=2):
    spec = default_input_spec()
    sizes = [6, *hidden, n_out]
    layers = tuple(
        (np.zeros((b, a)), np.zeros(b)) for a, b in zip(sizes[:-1], sizes[1:])
    )
    return SurrogateNet(
        layers=layers,
        input_spec=spec,
        output_scale=np.ones(n_out),
        h_max=0.04,
    )


ARGS = dict(x_n=np.array([0.3, 0.004]), y_n=(1.01, 0.1), y_np1=(0.99, 0.13))


class TestForward:
    def test_zero_weights_identity(self, rng):
        net = zero_net()
        for _ in range(5):
            x_n = rng.normal(size=2)
            out = forward(net, 0.02, x_n, (1.0, 0.0), (1.0, 0.1))
            assert np.array_equal(out, x_n)

    def test_single_neuron_hand_value(self):
        # one hidden neuron reading the normalized step size, unit output layer
        spec = default_input_spec()
        w1 = np.zeros((1, 6))
        w1[0, 0] = 1.0
        w2 = np.array([[1.0], [0.0]])
        net = SurrogateNet(
            layers=((w1, np.zeros(1)), (w2, np.zeros(2))),
            input_spec=spec,
            output_scale=np.ones(2),
            h_max=0.04,
        )
        lo, hi = spec[0].lo, spec[0].hi
        h = lo + 0.75 * (hi - lo)  # normalizes to +0.5
        out = forward(net, h, np.zeros(2), (1.0, 0.0), (1.0, 0.0))
        expect = h * math.tanh(math.tanh(0.5))
        assert out[0] == pytest.approx(expect, rel=1e-14)
        assert out[1] == 0.0
        # frozen from the two-tanh composition itself
        assert math.tanh(math.tanh(0.5)) == pytest.approx(0.4318081805950961, abs=1e-15)

    def test_hard_constraint_bitwise(self, rng):
        for _ in range(50):
            net = random_net(rng)
            x_n = rng.normal(size=2)
            out = forward(net, 0.0, x_n, (1.0, 0.2), (0.98, -0.1))
            assert out[0] == x_n[0] and out[1] == x_n[1]

    def test_determinism(self, rng):
        net = random_net(rng)
        a = forward(net, 0.02, **ARGS)
        b = forward(net, 0.02, **ARGS)
        assert np.array_equal(a, b)

    def test_increment_bounded_by_scale(self, rng):
        # tanh output layer: |x1 - x0| <= h * max(scale)
        for _ in range(20):
            net = random_net(rng, scale=3.0, output_scale=(5.65, 1.2))
            h = rng.uniform(0.001, 0.04)
            x_n = rng.normal(size=2)
            out = forward(net, h, x_n, (1.0, 0.0), (1.0, 0.0))
            assert np.all(np.abs(out - x_n) <= h * np.max(net.output_scale) + 1e-15)


class TestInputJacobian:
    def test_zero_weights(self):
        net = zero_net()
        jac = input_jacobian(net, 0.02, **ARGS)
        assert np.array_equal(jac.dx_n, np.eye(2))
        assert np.all(jac.dy_n == 0) and np.all(jac.dy_np1 == 0)
        assert np.all(jac.dh == 0)

    def test_dh_at_zero_equals_rate(self, rng):
        net = random_net(rng)
        jac = input_jacobian(net, 0.0, **ARGS)
        g = mlp.rate(net, mlp.encode_features(net, 0.0, ARGS["x_n"], ARGS["y_n"], ARGS["y_np1"]))
        assert np.allclose(jac.dh, g, atol=1e-15)

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = random_net(rng, hidden=(8, 8), scale=1.0)
        h0 = 0.021
        x_n = np.array([0.4, 0.002])
        y_n = np.array([1.005, 0.05])
        y_np1 = np.array([0.985, 0.09])
        jac = input_jacobian(net, h0, x_n, y_n, y_np1)
        eps = 1e-6

        def num(fun, a, k):
            up = np.array(a, dtype=float)
            dn = np.array(a, dtype=float)
            up[k] += eps
            dn[k] -= eps
            return (fun(up) - fun(dn)) / (2 * eps)

        fd_h = (forward(net, h0 + eps, x_n, y_n, y_np1) - forward(net, h0 - eps, x_n, y_n, y_np1)) / (2 * eps)
        assert np.allclose(jac.dh, fd_h, rtol=1e-6, atol=1e-10)
        for k in range(2):
            fd = num(lambda a: forward(net, h0, a, y_n, y_np1), x_n, k)
            assert np.allclose(jac.dx_n[:, k], fd, rtol=1e-6, atol=1e-10)
            fd = num(lambda a: forward(net, h0, x_n, a, y_np1), y_n, k)
            assert np.allclose(jac.dy_n[:, k], fd, rtol=1e-6, atol=1e-10)
            fd = num(lambda a: forward(net, h0, x_n, y_n, a), y_np1, k)
            assert np.allclose(jac.dy_np1[:, k], fd, rtol=1e-6, atol=1e-10)


class TestWeightFile:
    def test_round_trip_exact(self, rng, tmp_path):
        net = random_net(rng, hidden=(16, 8))
        path = tmp_path / "net.json"
        save_weights(net, path)
        loaded = load_weights(path)
        for (w1, b1), (w2, b2) in zip(net.layers, loaded.layers):
            assert np.array_equal(w1, w2)
            assert np.array_equal(b1, b2)
        assert np.array_equal(loaded.output_scale, np.asarray(net.output_scale))
        assert loaded.h_max == net.h_max
        assert [s.name for s in loaded.input_spec] == [s.name for s in net.input_spec]
        # outputs identical in value on a random point
        a = forward(net, 0.02, **ARGS)
        b = forward(loaded, 0.02, **ARGS)
        assert np.array_equal(a, b)

    def test_dimension_chain_error(self, rng, tmp_path):
        net = random_net(rng)
        path = tmp_path / "net.json"
        save_weights(net, path)
        doc = json.loads(path.read_text())
        doc["layers"][1]["cols"] = doc["layers"][1]["cols"] + 1
        path.write_text(json.dumps(doc))
        with pytest.raises(WeightFileError, match="layers\\[1\\]"):
            load_weights(path)

    def test_schema_version_rejected(self, rng, tmp_path):
        net = random_net(rng)
        path = tmp_path / "net.json"
        save_weights(net, path)
        doc = json.loads(path.read_text())
        doc["schema"] = "hybrid-dae-weights/999"
        path.write_text(json.dumps(doc))
        with pytest.raises(WeightFileError, match="incompatible schema"):
            load_weights(path)

    def test_missing_normalization_rejected(self, rng, tmp_path):
        net = random_net(rng)
        path = tmp_path / "net.json"
        save_weights(net, path)
        doc = json.loads(path.read_text())
        del doc["inputs"]
        path.write_text(json.dumps(doc))
        with pytest.raises(WeightFileError, match="inputs"):
            load_weights(path)

    def test_provenance_preserved(self, rng, tmp_path):
        net = random_net(rng)
        net = SurrogateNet(
            layers=net.layers,
            input_spec=net.input_spec,
            output_scale=net.output_scale,
            h_max=net.h_max,
            provenance={"machine_params_hash": "abc123", "epochs": 10, "seed": 7},
        )
        path = tmp_path / "net.json"
        save_weights(net, path)
        assert load_weights(path).provenance["machine_params_hash"] == "abc123"

    def test_bad_input_name_rejected(self, rng, tmp_path):
        net = random_net(rng)
        path = tmp_path / "net.json"
        save_weights(net, path)
        doc = json.loads(path.read_text())
        doc["inputs"][0]["name"] = "gremlin"
        path.write_text(json.dumps(doc))
        with pytest.raises(WeightFileError, match="gremlin"):
            load_weights(path)
