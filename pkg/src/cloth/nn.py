"""Small multilayer perceptrons with hand-written backprop, Adam and Polyak averaging."""
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, ParameterError, TrainingError
from .numerics import softmax

ACTIVATIONS = ("relu", "tanh")
HEADS = ("linear", "softmax")


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    hidden_activation: str = "relu"
    output_head: str = "linear"
    dropout_keep: float = 1.0
    # also drop units of the (linear) output layer; used for the adapted layer of G
    dropout_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ParameterError("an MLP needs at least input and output widths")
        if any(w < 1 for w in self.layer_widths):
            raise ParameterError(f"layer widths must be positive: {self.layer_widths}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.hidden_activation!r}")
        if self.output_head not in HEADS:
            raise ParameterError(f"unknown output head {self.output_head!r}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ParameterError(f"dropout_keep must lie in (0, 1], got {self.dropout_keep}")

    @property
    def n_in(self):
        return self.layer_widths[0]

    @property
    def n_out(self):
        return self.layer_widths[-1]

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    def to_dict(self):
        return {
            "layer_widths": list(self.layer_widths),
            "hidden_activation": self.hidden_activation,
            "output_head": self.output_head,
            "dropout_keep": self.dropout_keep,
            "dropout_output": self.dropout_output,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MlpParams:
    """Weights are stored (fan_in, fan_out) so a batch maps as ``x @ W + b``."""

    weights: list
    biases: list

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    @property
    def size(self):
        return sum(a.size for a in self.arrays())

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise DimensionError(f"flat vector has {vec.size} entries, params have {self.size}")
        i = 0
        for a in self.arrays():
            a[...] = vec[i:i + a.size].reshape(a.shape)
            i += a.size

    def check_shapes(self, spec):
        if len(self.weights) != spec.n_layers:
            raise DimensionError(f"{len(self.weights)} layers of params for a {spec.n_layers}-layer spec")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (spec.layer_widths[k], spec.layer_widths[k + 1])
            if w.shape != want or b.shape != (want[1],):
                raise DimensionError(f"layer {k}: weight {w.shape}, bias {b.shape}, expected {want}")

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(spec, stream):
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for k in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[k], spec.layer_widths[k + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        u = stream.uniform(fan_in * fan_out).reshape(fan_in, fan_out)
        weights.append((2.0 * u - 1.0) * limit)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


@dataclass
class ForwardCache:
    spec: MlpSpec
    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer
    masks: list  # inverted-dropout masks per hidden layer (None when unused)
    out_mask: object
    outputs: np.ndarray
    param_shapes: tuple


def _activate(a, kind):
    if kind == "relu":
        return np.maximum(a, 0.0)
    return np.tanh(a)


def _activate_grad(a, h, kind):
    if kind == "relu":
        return (a > 0).astype(np.float64)
    return 1.0 - h * h


def _dropout_mask(shape, keep, stream):
    if stream is None:
        raise ContractError("train-mode dropout needs a SeededStream")
    return (stream.uniform(int(np.prod(shape))).reshape(shape) < keep) / keep


def forward(params, spec, batch, mode="eval", stream=None):
    """Run the network on a (n, n_in) batch.

    Train mode applies inverted dropout (mask / keep) so eval mode needs no
    rescaling and is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise DimensionError(f"batch shape {x.shape} does not match input width {spec.n_in}")
    use_dropout = mode == "train" and spec.dropout_keep < 1.0
    inputs, pre, masks = [], [], []
    h = x
    last = spec.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = h @ w + b
        pre.append(a)
        if k < last:
            h = _activate(a, spec.hidden_activation)
            if use_dropout:
                m = _dropout_mask(h.shape, spec.dropout_keep, stream)
                h = h * m
                masks.append(m)
            else:
                masks.append(None)
    out_mask = None
    a = pre[-1]
    if spec.output_head == "softmax":
        out = softmax(a)
    else:
        out = a
        if use_dropout and spec.dropout_output:
            out_mask = _dropout_mask(out.shape, spec.dropout_keep, stream)
            out = out * out_mask
    shapes = tuple(w.shape for w in params.weights)
    return out, ForwardCache(spec, inputs, pre, masks, out_mask, out, shapes)


def backward(params, spec, cache, grad_outputs):
    """Gradients of sum(grad_outputs * outputs) w.r.t. parameters and inputs."""
    if cache.spec != spec or cache.param_shapes != tuple(w.shape for w in params.weights):
        raise ContractError("forward cache does not belong to these params/spec")
    g = np.asarray(grad_outputs, dtype=np.float64)
    if g.shape != cache.outputs.shape:
        raise ContractError(f"grad_outputs shape {g.shape} != cached outputs {cache.outputs.shape}")
    if spec.output_head == "softmax":
        p = cache.outputs
        g = p * (g - np.sum(p * g, axis=1, keepdims=True))
    elif cache.out_mask is not None:
        g = g * cache.out_mask
    gw = [None] * spec.n_layers
    gb = [None] * spec.n_layers
    for k in range(spec.n_layers - 1, -1, -1):
        gw[k] = cache.inputs[k].T @ g
        gb[k] = g.sum(axis=0)
        gh = g @ params.weights[k].T
        if k > 0:
            if cache.masks[k - 1] is not None:
                gh = gh * cache.masks[k - 1]
            a = cache.pre[k - 1]
            h = _activate(a, spec.hidden_activation)
            g = gh * _activate_grad(a, h, spec.hidden_activation)
        else:
            g = gh
    return MlpParams(gw, gb), g


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()],
                   0, beta1, beta2, eps)


@dataclass
class PolyakShadow:
    params: MlpParams
    rho: float = 0.998

    @classmethod
    def of(cls, params, rho=0.998):
        if not 0.0 <= rho < 1.0:
            raise ParameterError(f"Polyak decay must lie in [0, 1), got {rho}")
        return cls(params.copy(), rho)


def adam_polyak_step(params, grads, adam, shadow, lr):
    """Bias-corrected Adam update, then ``shadow <- rho*shadow + (1-rho)*params``.

    Arrays are updated in place; the same objects are returned for convenience.
    """
    arrays, garrays = params.arrays(), grads.arrays()
    if len(arrays) != len(garrays) or any(a.shape != g.shape for a, g in zip(arrays, garrays)):
        raise DimensionError("gradient shapes do not match parameters")
    for k, g in enumerate(garrays):
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise TrainingError(f"non-finite gradient in parameter array {k} ({bad} entries) at Adam step {adam.step + 1}")
    adam.step += 1
    t = adam.step
    c1 = 1.0 - adam.beta1 ** t
    c2 = 1.0 - adam.beta2 ** t
    for a, g, m, v in zip(arrays, garrays, adam.m, adam.v):
        m *= adam.beta1
        m += (1.0 - adam.beta1) * g
        v *= adam.beta2
        v += (1.0 - adam.beta2) * g * g
        a -= lr * (m / c1) / (np.sqrt(v / c2) + adam.eps)
    rho = shadow.rho
    for s, a in zip(shadow.params.arrays(), arrays):
        s *= rho
        s += (1.0 - rho) * a
    return params, adam, shadow


def grad_check(loss, params, h=1e-5, max_coords=None, stream=None):
    """Max relative error between analytic and central-difference gradients.

    ``loss(params)`` must return ``(value, grads)`` where ``grads`` is an
    ``MlpParams`` (or a list of them when ``params`` is a list). Coordinates
    are all checked unless ``max_coords`` is given, in which case a random
    subset is drawn from ``stream``.
    """
    plist = params if isinstance(params, (list, tuple)) else [params]
    _, grads = loss(params)
    glist = grads if isinstance(grads, (list, tuple)) else [grads]
    analytic = np.concatenate([g.flat() for g in glist])
    base = np.concatenate([p.flat() for p in plist])
    sizes = [p.size for p in plist]

    def load(vec):
        i = 0
        for p, n in zip(plist, sizes):
            p.set_flat(vec[i:i + n])
            i += n

    coords = np.arange(base.size)
    if max_coords is not None and max_coords < base.size:
        if stream is None:
            raise ContractError("sampling coordinates needs a SeededStream")
        coords = np.sort(stream.permutation(base.size)[:max_coords])
    worst = 0.0
    try:
        for j in coords:
            vec = base.copy()
            vec[j] = base[j] + h
            load(vec)
            fp = loss(params)[0]
            vec[j] = base[j] - h
            load(vec)
            fm = loss(params)[0]
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[j] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    finally:
        load(base)
    return worst


# -- serialisation: floats travel as C99 hex strings so round trips are exact --

def _hex_list(a):
    return [float(x).hex() for x in np.asarray(a, dtype=np.float64).ravel()]


def _from_hex(items, shape):
    return np.array([float.fromhex(s) for s in items], dtype=np.float64).reshape(shape)


def params_to_dict(params):
    return {
        "layers": [
            {"shape": list(w.shape), "weight": _hex_list(w), "bias": _hex_list(b)}
            for w, b in zip(params.weights, params.biases)
        ]
    }


def params_from_dict(d):
    weights, biases = [], []
    for layer in d["layers"]:
        shape = tuple(layer["shape"])
        weights.append(_from_hex(layer["weight"], shape))
        biases.append(_from_hex(layer["bias"], (shape[1],)))
    return MlpParams(weights, biases)


def adam_to_dict(adam):
    return {
        "step": adam.step,
        "beta1": adam.beta1,
        "beta2": adam.beta2,
        "eps": adam.eps,
        "m": [{"shape": list(a.shape), "data": _hex_list(a)} for a in adam.m],
        "v": [{"shape": list(a.shape), "data": _hex_list(a)} for a in adam.v],
    }


def adam_from_dict(d):
    m = [_from_hex(x["data"], tuple(x["shape"])) for x in d["m"]]
    v = [_from_hex(x["data"], tuple(x["shape"])) for x in d["v"]]
    return AdamState(m, v, d["step"], d["beta1"], d["beta2"], d["eps"])
