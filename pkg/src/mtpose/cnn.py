"""Small dense CNN with manual backpropagation.

Layers: valid convolution (stride 1), 2x2 max pooling (stride 2), fully
connected, and a linear output head.  Activations: ReLU, sigmoid, tanh.
The default architecture is three conv+pool blocks (32x5x5, 32x3x3,
24x3x3), a 512-unit fully connected layer, and a linear output, sized for
64x64 single-channel input.

Batches are 4-D float64 arrays in (n, c, h, w) order.  Forward passes are
pure; training returns a new state and never mutates the old one.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import MtposeError, NumericsError, ShapeError

__all__ = [
    "Activation",
    "Conv",
    "MaxPool",
    "FullyConnected",
    "Output",
    "NetworkSpec",
    "default_spec",
    "activate",
    "init_state",
    "conv_forward",
    "maxpool_forward",
    "forward",
    "backward",
    "sgd_step",
    "train_epoch",
    "extract_features",
    "save_checkpoint",
    "load_checkpoint",
]


class Activation(enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"


def activate(kind: Activation, x):
    x = np.asarray(x, dtype=np.float64)
    if kind is Activation.RELU:
        return np.maximum(x, 0.0)
    if kind is Activation.SIGMOID:
        return 1.0 / (1.0 + np.exp(-x))
    if kind is Activation.TANH:
        return 2.0 / (1.0 + np.exp(-2.0 * x)) - 1.0
    raise MtposeError(f"unknown activation {kind}")


def _activate_grad(kind: Activation, pre, post):
    """Derivative of the activation w.r.t. its pre-activation input."""
    if kind is Activation.RELU:
        return (pre >= 0.0).astype(np.float64)
    if kind is Activation.SIGMOID:
        return post * (1.0 - post)
    if kind is Activation.TANH:
        return 1.0 - post * post
    raise MtposeError(f"unknown activation {kind}")


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kh: int
    kw: int
    activation: Activation = Activation.RELU


@dataclass(frozen=True)
class MaxPool:
    pass  # 2x2 window, stride 2


@dataclass(frozen=True)
class FullyConnected:
    units: int
    activation: Activation = Activation.RELU


@dataclass(frozen=True)
class Output:
    units: int  # linear: targets are signed angles


@dataclass(frozen=True)
class NetworkSpec:
    input: tuple[int, int, int]  # (channels, height, width)
    layers: tuple = field(default_factory=tuple)

    def shape_trace(self) -> list[tuple]:
        """Shape after every layer; raises if any dimension degenerates."""
        c, h, w = self.input
        shapes = []
        flat = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if flat is not None:
                    raise ShapeError(f"layer {i}: conv after flattening")
                if layer.kh > h or layer.kw > w:
                    raise ShapeError(
                        f"layer {i}: kernel {layer.kh}x{layer.kw} exceeds "
                        f"input {h}x{w}"
                    )
                c, h, w = layer.out_channels, h - layer.kh + 1, w - layer.kw + 1
                shapes.append((c, h, w))
            elif isinstance(layer, MaxPool):
                if flat is not None:
                    raise ShapeError(f"layer {i}: pool after flattening")
                if h % 2 or w % 2:
                    raise ShapeError(f"layer {i}: pooling odd dims {h}x{w}")
                h, w = h // 2, w // 2
                shapes.append((c, h, w))
            elif isinstance(layer, (FullyConnected, Output)):
                if flat is None:
                    flat = c * h * w
                flat = layer.units
                shapes.append((flat,))
            else:
                raise MtposeError(f"unknown layer {layer!r}")
        if not self.layers or not isinstance(self.layers[-1], Output):
            raise ShapeError("network must end with an Output layer")
        return shapes


def default_spec(
    d2: int = 2, activation: Activation = Activation.RELU, input_hw: int = 64,
    channels: int = 1,
) -> NetworkSpec:
    return NetworkSpec(
        input=(channels, input_hw, input_hw),
        layers=(
            Conv(32, 5, 5, activation), MaxPool(),
            Conv(32, 3, 3, activation), MaxPool(),
            Conv(24, 3, 3, activation), MaxPool(),
            FullyConnected(512, activation),
            Output(d2),
        ),
    )


def init_state(spec: NetworkSpec, seed: int = 0) -> dict:
    """Glorot-uniform weights, zero biases; keyed by layer index."""
    spec.shape_trace()
    rng = np.random.default_rng(seed)
    state = {}
    cur: tuple | int = tuple(spec.input)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            c, h, w = cur
            fan_in = c * layer.kh * layer.kw
            fan_out = layer.out_channels * layer.kh * layer.kw
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            state[i] = {
                "w": rng.uniform(-lim, lim, (layer.out_channels, c, layer.kh, layer.kw)),
                "b": np.zeros(layer.out_channels),
            }
            cur = (layer.out_channels, h - layer.kh + 1, w - layer.kw + 1)
        elif isinstance(layer, MaxPool):
            c, h, w = cur
            cur = (c, h // 2, w // 2)
        elif isinstance(layer, (FullyConnected, Output)):
            n_in = cur if isinstance(cur, int) else int(np.prod(cur))
            lim = np.sqrt(6.0 / (n_in + layer.units))
            state[i] = {
                "w": rng.uniform(-lim, lim, (n_in, layer.units)),
                "b": np.zeros(layer.units),
            }
            cur = layer.units
    return state


def _check_batch(spec: NetworkSpec, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"batch must be 4-D (n,c,h,w), got ndim={x.ndim}")
    if x.shape[1:] != tuple(spec.input):
        raise ShapeError(f"batch shape {x.shape[1:]} != spec input {tuple(spec.input)}")
    return x


def _windows(x: np.ndarray, kh: int, kw: int):
    """Strided (n, c, oh, ow, kh, kw) view of all valid kernel positions."""
    return np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))


def conv_forward(x, weights, bias, activation: Activation):
    """Valid convolution, stride 1, plus activation.

    weights: (k, c, kh, kw); bias: (k,).  Returns (post, pre) tensors of
    shape (n, k, oh, ow).
    """
    x = np.asarray(x, dtype=np.float64)
    k, c, kh, kw = weights.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"input shape {x.shape} incompatible with kernel {weights.shape}")
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {x.shape[2]}x{x.shape[3]}")
    win = _windows(x, kh, kw)
    pre = np.tensordot(win, weights, axes=([1, 4, 5], [1, 2, 3])) + bias
    pre = np.ascontiguousarray(pre.transpose(0, 3, 1, 2))
    return activate(activation, pre), pre


def maxpool_forward(x):
    """2x2 max pooling, stride 2.  Returns (pooled, argmax map).

    The argmax map holds, per output cell, the flat index (0..3) of the
    window maximum, ties broken by first index.
    """
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pooling needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1)
    pooled = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return pooled, arg


def _maxpool_backward(grad_out, arg, in_shape):
    n, c, h, w = in_shape
    win_grad = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(win_grad, arg[..., None], grad_out[..., None], axis=-1)
    win_grad = win_grad.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win_grad.reshape(n, c, h, w)


def _conv_backward(x, weights, grad_pre, need_dx: bool = True):
    """Gradients of the convolution w.r.t. weights, bias and input."""
    k, c, kh, kw = weights.shape
    n, _, oh, ow = grad_pre.shape
    win = _windows(x, kh, kw)
    # dw[k,c,p,q] = sum_{n,i,j} g[n,k,i,j] * x[n,c,i+p,j+q]
    dw = np.tensordot(grad_pre, win, axes=([0, 2, 3], [0, 2, 3]))
    db = grad_pre.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dx = np.zeros_like(x)
        gmat = grad_pre.transpose(0, 2, 3, 1).reshape(n * oh * ow, k)
        for p in range(kh):
            for q in range(kw):
                contrib = (gmat @ weights[:, :, p, q]).reshape(n, oh, ow, c)
                dx[:, :, p : p + oh, q : q + ow] += contrib.transpose(0, 3, 1, 2)
    return dw, db, dx


def forward(spec: NetworkSpec, state: dict, batch):
    """Run the network; returns (predictions (n, d_out), cache for backward)."""
    x = _check_batch(spec, batch)
    cache = []
    cur = x
    flat_from = None
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            post, pre = conv_forward(cur, state[i]["w"], state[i]["b"], layer.activation)
            cache.append({"kind": "conv", "x": cur, "pre": pre, "post": post})
            cur = post
        elif isinstance(layer, MaxPool):
            pooled, arg = maxpool_forward(cur)
            cache.append({"kind": "pool", "x_shape": cur.shape, "arg": arg})
            cur = pooled
        elif isinstance(layer, (FullyConnected, Output)):
            if cur.ndim == 4:
                flat_from = cur.shape
                cur = cur.reshape(cur.shape[0], -1)
            pre = cur @ state[i]["w"] + state[i]["b"]
            if isinstance(layer, FullyConnected):
                post = activate(layer.activation, pre)
            else:
                post = pre  # linear output head
            cache.append(
                {
                    "kind": "fc" if isinstance(layer, FullyConnected) else "out",
                    "x": cur,
                    "pre": pre,
                    "post": post,
                    "flat_from": flat_from,
                }
            )
            flat_from = None
            cur = post
    return cur, cache


def backward(spec: NetworkSpec, state: dict, cache: list, targets):
    """Gradients of 0.5 * mean_i ||y_i - yhat_i||^2 w.r.t. all parameters."""
    targets = np.asarray(targets, dtype=np.float64)
    pred = cache[-1]["post"]
    if targets.shape != pred.shape:
        raise ShapeError(f"targets shape {targets.shape} != predictions {pred.shape}")
    n = pred.shape[0]
    grads = {}
    grad = (pred - targets) / n
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        entry = cache[i]
        if isinstance(layer, (FullyConnected, Output)):
            if isinstance(layer, FullyConnected):
                grad = grad * _activate_grad(layer.activation, entry["pre"], entry["post"])
            grads[i] = {"w": entry["x"].T @ grad, "b": grad.sum(axis=0)}
            grad = grad @ state[i]["w"].T
            if entry["flat_from"] is not None:
                grad = grad.reshape(entry["flat_from"])
        elif isinstance(layer, MaxPool):
            grad = _maxpool_backward(grad, entry["arg"], entry["x_shape"])
        elif isinstance(layer, Conv):
            grad_pre = grad * _activate_grad(layer.activation, entry["pre"], entry["post"])
            dw, db, grad = _conv_backward(
                entry["x"], state[i]["w"], grad_pre, need_dx=i > 0
            )
            grads[i] = {"w": dw, "b": db}
    return grads


def loss_value(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    d = predictions - targets
    return 0.5 * float(np.sum(d * d)) / predictions.shape[0]


def sgd_step(state: dict, grads: dict, eta: float) -> dict:
    """W <- W - eta * grad for every parameter; returns a new state."""
    if eta < 0:
        raise MtposeError(f"learning rate must be >= 0, got {eta}")
    new_state = {}
    for i, params in state.items():
        new_state[i] = {}
        for key, val in params.items():
            g = grads.get(i, {}).get(key)
            if g is None:
                new_state[i][key] = val.copy()
                continue
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for layer {i} '{key}'")
            new_state[i][key] = val - eta * g
    return new_state


def train_epoch(
    spec: NetworkSpec,
    state: dict,
    images,
    targets,
    eta: float = 0.01,
    batch_size: int = 32,
    rng: np.random.Generator | None = None,
):
    """One shuffled pass over the data; returns (new state, mean batch loss)."""
    x = _check_batch(spec, images)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} images but {y.shape[0]} target rows")
    if x.shape[0] == 0:
        raise MtposeError("dataset is empty")
    rng = rng or np.random.default_rng(0)
    order = rng.permutation(x.shape[0])
    losses = []
    for start in range(0, x.shape[0], batch_size):
        idx = order[start : start + batch_size]
        pred, cache = forward(spec, state, x[idx])
        losses.append(loss_value(pred, y[idx]))
        grads = backward(spec, state, cache, y[idx])
        state = sgd_step(state, grads, eta)
    return state, float(np.mean(losses))


def extract_features(spec: NetworkSpec, state: dict, batch) -> np.ndarray:
    """Post-activation values of the last fully connected layer."""
    fc_idx = [i for i, l in enumerate(spec.layers) if isinstance(l, FullyConnected)]
    if not fc_idx:
        raise MtposeError("spec has no fully connected layer")
    _, cache = forward(spec, state, batch)
    return cache[fc_idx[-1]]["post"].copy()


_LAYER_TAGS = {"Conv": Conv, "MaxPool": MaxPool, "FullyConnected": FullyConnected,
               "Output": Output}


def _spec_to_json(spec: NetworkSpec) -> str:
    layers = []
    for layer in spec.layers:
        d = {"type": type(layer).__name__}
        for f in getattr(layer, "__dataclass_fields__", {}):
            v = getattr(layer, f)
            d[f] = v.value if isinstance(v, Activation) else v
        layers.append(d)
    return json.dumps({"input": list(spec.input), "layers": layers})


def _spec_from_json(text: str) -> NetworkSpec:
    raw = json.loads(text)
    layers = []
    for d in raw["layers"]:
        cls = _LAYER_TAGS[d.pop("type")]
        if "activation" in d:
            d["activation"] = Activation(d["activation"])
        layers.append(cls(**d))
    return NetworkSpec(input=tuple(raw["input"]), layers=tuple(layers))


def save_checkpoint(spec: NetworkSpec, state: dict, path) -> None:
    arrays = {"spec": np.frombuffer(_spec_to_json(spec).encode(), dtype=np.uint8)}
    for i, params in state.items():
        for key, val in params.items():
            arrays[f"layer{i}_{key}"] = val
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[NetworkSpec, dict]:
    with np.load(path) as z:
        spec = _spec_from_json(bytes(z["spec"]).decode())
        state: dict = {}
        for name in z.files:
            if name == "spec":
                continue
            idx, key = name[len("layer"):].split("_", 1)
            state.setdefault(int(idx), {})[key] = z[name]
    return spec, state
