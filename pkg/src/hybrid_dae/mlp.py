"""Dense tanh network that predicts a per-unit-time state increment.

The network maps (h, start state, boundary values at both ends of the step)
to an increment rate g; the predicted end state is ``x_n + h * g``, so the
start state is an exact hard constraint at h = 0. Inputs are affinely
normalized to [-1, 1] from the ranges stored in the weight file; outputs are
scaled by per-output factors so the tanh-bounded rate can represent the
largest state derivative in the trained domain.

The weight file is decimal-text JSON whose floats round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import wrap_angle

# Feature vocabulary: how raw step arguments map into network inputs.
# delta_rel_n = wrap(delta_n - theta_n); dtheta = wrap(theta_np1 - theta_n).
INPUT_NAMES = ("h_s", "delta_rel_n", "domega_n", "v_n", "v_np1", "dtheta")
OUTPUT_NAMES = ("delta", "d_omega")

SCHEMA = "hybrid-dae-weights/1"


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class InputSpec:
    name: str
    lo: float
    hi: float


@dataclass(frozen=True)
class SurrogateNet:
    layers: tuple            # ((W, b), ...) hidden layers then output layer
    input_spec: tuple        # InputSpec per network input
    output_scale: np.ndarray
    h_max: float
    provenance: dict = field(default_factory=dict)
    activation: str = "tanh"

    @property
    def n_in(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_out(self) -> int:
        return self.layers[-1][0].shape[0]

    def __post_init__(self):
        if self.activation != "tanh":
            raise WeightFileError(f"unsupported activation {self.activation!r}")
        if len(self.input_spec) != self.n_in:
            raise WeightFileError("input_spec length does not match first layer")
        prev = self.n_in
        for k, (w, b) in enumerate(self.layers):
            if w.shape[1] != prev:
                raise WeightFileError(
                    f"layers[{k}]: expected {prev} columns, got {w.shape[1]}"
                )
            if b.shape != (w.shape[0],):
                raise WeightFileError(f"layers[{k}]: bias length {b.shape} mismatch")
            prev = w.shape[0]
        if len(self.output_scale) != prev:
            raise WeightFileError("output_scale length does not match output layer")
        if not np.all(np.asarray(self.output_scale) > 0):
            raise WeightFileError("output_scale entries must be positive")
        if not self.h_max > 0:
            raise WeightFileError("h_max_s must be positive")
        for spec in self.input_spec:
            if not spec.hi > spec.lo:
                raise WeightFileError(f"input {spec.name}: empty range [{spec.lo}, {spec.hi}]")

    def domain(self) -> dict:
        return {s.name: (s.lo, s.hi) for s in self.input_spec}


def encode_features(net: SurrogateNet, h, x_n, y_n, y_np1) -> np.ndarray:
    """Raw (un-normalized) feature vector in the net's input order."""
    delta, domega = float(x_n[0]), float(x_n[1])
    v_n, th_n = float(y_n[0]), float(y_n[1])
    v_p, th_p = float(y_np1[0]), float(y_np1[1])
    values = {
        "h_s": float(h),
        "delta_rel_n": float(wrap_angle(delta - th_n)),
        "domega_n": domega,
        "v_n": v_n,
        "v_np1": v_p,
        "dtheta": float(wrap_angle(th_p - th_n)),
    }
    try:
        return np.array([values[s.name] for s in net.input_spec])
    except KeyError as exc:
        raise WeightFileError(f"unknown input name {exc}") from exc


# Feature partials w.r.t. (h, delta, domega, v_n, th_n, v_np1, th_np1);
# wrap() has unit slope away from the branch cut.
_FEATURE_PARTIALS = {
    "h_s": np.array([1.0, 0, 0, 0, 0, 0, 0]),
    "delta_rel_n": np.array([0.0, 1, 0, 0, -1, 0, 0]),
    "domega_n": np.array([0.0, 0, 1, 0, 0, 0, 0]),
    "v_n": np.array([0.0, 0, 0, 1, 0, 0, 0]),
    "v_np1": np.array([0.0, 0, 0, 0, 0, 1, 0]),
    "dtheta": np.array([0.0, 0, 0, 0, -1, 0, 1]),
}


def _normalize(net: SurrogateNet, u: np.ndarray):
    lo = np.array([s.lo for s in net.input_spec])
    hi = np.array([s.hi for s in net.input_spec])
    scale = 2.0 / (hi - lo)
    return (u - lo) * scale - 1.0, scale


def rate(net: SurrogateNet, features: np.ndarray) -> np.ndarray:
    """Increment-per-unit-time for a raw feature vector."""
    z, _ = _normalize(net, features)
    for w, b in net.layers[:-1]:
        z = np.tanh(w @ z + b)
    w, b = net.layers[-1]
    return np.asarray(net.output_scale) * np.tanh(w @ z + b)


def rate_jacobian(net: SurrogateNet, features: np.ndarray):
    """Rate and its exact Jacobian w.r.t. the raw features."""
    z, norm_scale = _normalize(net, features)
    zs = [z]
    for w, b in net.layers[:-1]:
        z = np.tanh(w @ z + b)
        zs.append(z)
    w, b = net.layers[-1]
    out_pre = w @ z + b
    t = np.tanh(out_pre)
    g = np.asarray(net.output_scale) * t
    jac = (np.asarray(net.output_scale) * (1.0 - t * t))[:, None] * w
    for (w_k, _), z_k in zip(reversed(net.layers[:-1]), reversed(zs[1:])):
        jac = (jac * (1.0 - z_k * z_k)[None, :]) @ w_k
    jac = jac * norm_scale[None, :]
    return g, jac


def forward(net: SurrogateNet, h: float, x_n, y_n, y_np1) -> np.ndarray:
    """Predicted end-of-step state; returns x_n exactly at h = 0."""
    x_n = np.asarray(x_n, dtype=float)
    if h == 0.0:
        return x_n.copy()
    g = rate(net, encode_features(net, h, x_n, y_n, y_np1))
    return x_n + h * g


@dataclass
class SurrogateJacobian:
    x_hat: np.ndarray
    rate: np.ndarray
    dh: np.ndarray        # (n_out,)
    dx_n: np.ndarray      # (n_out, 2) w.r.t. (delta_n, domega_n)
    dy_n: np.ndarray      # (n_out, 2) w.r.t. (V_n, theta_n)
    dy_np1: np.ndarray    # (n_out, 2) w.r.t. (V_np1, theta_np1)
    drate_dy_np1: np.ndarray


def input_jacobian(net: SurrogateNet, h: float, x_n, y_n, y_np1) -> SurrogateJacobian:
    """Exact chain-rule partials of the prediction w.r.t. every argument."""
    x_n = np.asarray(x_n, dtype=float)
    feats = encode_features(net, h, x_n, y_n, y_np1)
    g, jac_feat = rate_jacobian(net, feats)
    # argument order: (h, delta, domega, v_n, th_n, v_np1, th_np1)
    chain = np.vstack([_FEATURE_PARTIALS[s.name] for s in net.input_spec])
    jac_arg = jac_feat @ chain
    n_out = len(g)
    eye = np.eye(n_out)
    dh = g + h * jac_arg[:, 0]
    dx_n = eye + h * jac_arg[:, 1:3]
    dy_n = h * jac_arg[:, 3:5]
    dy_np1 = h * jac_arg[:, 5:7]
    return SurrogateJacobian(
        x_hat=x_n + h * g,
        rate=g,
        dh=dh,
        dx_n=dx_n,
        dy_n=dy_n,
        dy_np1=dy_np1,
        drate_dy_np1=jac_arg[:, 5:7],
    )


def save_weights(net: SurrogateNet, path) -> None:
    doc = {
        "schema": SCHEMA,
        "activation": net.activation,
        "h_max_s": net.h_max,
        "inputs": [{"name": s.name, "lo": s.lo, "hi": s.hi} for s in net.input_spec],
        "outputs": list(OUTPUT_NAMES[: net.n_out]),
        "output_scale": [float(v) for v in net.output_scale],
        "layers": [
            {
                "rows": int(w.shape[0]),
                "cols": int(w.shape[1]),
                "w": [float(v) for v in w.reshape(-1)],
                "b": [float(v) for v in b],
            }
            for w, b in net.layers
        ],
        "provenance": dict(net.provenance),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_weights(path) -> SurrogateNet:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"cannot read weight file {path}: {exc}") from exc
    if doc.get("schema") != SCHEMA:
        raise WeightFileError(
            f"incompatible schema {doc.get('schema')!r}, expected {SCHEMA!r}"
        )
    for key in ("inputs", "layers", "output_scale", "h_max_s"):
        if key not in doc:
            raise WeightFileError(f"weight file missing {key!r}")
    try:
        inputs = tuple(
            InputSpec(str(i["name"]), float(i["lo"]), float(i["hi"])) for i in doc["inputs"]
        )
        layers = []
        for k, layer in enumerate(doc["layers"]):
            rows, cols = int(layer["rows"]), int(layer["cols"])
            w = np.array(layer["w"], dtype=float)
            if w.size != rows * cols:
                raise WeightFileError(f"layers[{k}]: expected {rows * cols} weights, got {w.size}")
            b = np.array(layer["b"], dtype=float)
            layers.append((w.reshape(rows, cols), b))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, WeightFileError):
            raise
        raise WeightFileError(f"malformed weight file: {exc}") from exc
    for s in inputs:
        if s.name not in INPUT_NAMES:
            raise WeightFileError(f"unknown input name {s.name!r}")
    return SurrogateNet(
        layers=tuple(layers),
        input_spec=inputs,
        output_scale=np.array(doc["output_scale"], dtype=float),
        h_max=float(doc["h_max_s"]),
        provenance=dict(doc.get("provenance", {})),
        activation=str(doc.get("activation", "tanh")),
    )


def default_input_spec(h_max: float = 0.040) -> tuple:
    """Trained-domain input ranges (step size, rotor state, boundary voltages)."""
    return (
        InputSpec("h_s", 0.001, h_max),
        InputSpec("delta_rel_n", 0.0, np.pi / 3),
        InputSpec("domega_n", -0.015, 0.015),
        InputSpec("v_n", 0.97, 1.03),
        InputSpec("v_np1", 0.97, 1.03),
        InputSpec("dtheta", -np.pi, np.pi),
    )


def random_net(rng, hidden=(8, 8), n_in=6, n_out=2, input_spec=None,
               output_scale=(1.0, 1.0), h_max=0.040, scale=0.5) -> SurrogateNet:
    """Small random net for self-checks and tests (Xavier-ish init)."""
    if input_spec is None:
        input_spec = default_input_spec(h_max)[:n_in]
    sizes = [n_in, *hidden, n_out]
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(scale=scale / np.sqrt(a), size=(b, a))
        bias = rng.normal(scale=0.1, size=b)
        layers.append((w, bias))
    return SurrogateNet(
        layers=tuple(layers),
        input_spec=tuple(input_spec),
        output_scale=np.array(output_scale, dtype=float)[:n_out],
        h_max=h_max,
    )
