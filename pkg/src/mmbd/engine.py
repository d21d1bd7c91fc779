"""Small feed-forward network engine on float64 numpy arrays.

Arrays are batched: dense inputs are ``(N, d)``, conv inputs ``(N, C, H, W)``.
A forward pass returns a cache that the matching backward pass consumes, so
a :class:`Classifier` carries no per-call state and can be read from many
threads at once.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"MMBDMODL"
FORMAT_VERSION = 1
MAX_CONV_SIDE = 32
MAX_CONV_CHANNELS = 16


class InvalidInputError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


# ---------------------------------------------------------------- layers


class Dense:
    kind = "dense"

    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.W = np.zeros((self.n_out, self.n_in))
        self.b = np.zeros(self.n_out)

    @property
    def params(self):
        return [self.W, self.b]

    def init(self, rng: np.random.Generator):
        lim = np.sqrt(6.0 / self.n_in)
        self.W[...] = rng.uniform(-lim, lim, self.W.shape)
        self.b[...] = 0.0

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise InvalidInputError(f"dense expects ({self.n_in},), got {tuple(in_shape)}")
        return (self.n_out,)

    def forward(self, x):
        return x @ self.W.T + self.b, x

    def backward(self, cache, dout):
        x = cache
        return dout @ self.W, [dout.T @ x, dout.sum(axis=0)]

    def spec(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}


class Conv2d:
    """Valid (unpadded) 2-D convolution with a square kernel."""

    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1):
        if max(in_ch, out_ch) > MAX_CONV_CHANNELS:
            raise InvalidInputError(f"conv2d limited to {MAX_CONV_CHANNELS} channels")
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride = int(kernel), int(stride)
        self.W = np.zeros((self.out_ch, self.in_ch, self.kernel, self.kernel))
        self.b = np.zeros(self.out_ch)

    @property
    def params(self):
        return [self.W, self.b]

    def init(self, rng: np.random.Generator):
        fan_in = self.in_ch * self.kernel * self.kernel
        lim = np.sqrt(6.0 / fan_in)
        self.W[...] = rng.uniform(-lim, lim, self.W.shape)
        self.b[...] = 0.0

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise InvalidInputError(f"conv2d expects ({self.in_ch}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        if max(h, w) > MAX_CONV_SIDE:
            raise InvalidInputError(f"conv2d limited to {MAX_CONV_SIDE}x{MAX_CONV_SIDE} inputs")
        ho = (h - self.kernel) // self.stride + 1
        wo = (w - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise InvalidInputError("conv2d kernel larger than input")
        return (self.out_ch, ho, wo)

    def _patches(self, x):
        s = self.stride
        # (N, C, Ho, Wo, k, k)
        return sliding_window_view(x, (self.kernel, self.kernel), axis=(2, 3))[:, :, ::s, ::s]

    def forward(self, x):
        p = self._patches(x)
        out = np.einsum("nchwij,ocij->nohw", p, self.W, optimize=True)
        out += self.b[None, :, None, None]
        return out, x

    def backward(self, cache, dout):
        x = cache
        p = self._patches(x)
        dW = np.einsum("nchwij,nohw->ocij", p, dout, optimize=True)
        db = dout.sum(axis=(0, 2, 3))
        dx = np.zeros_like(x)
        ho, wo = dout.shape[2], dout.shape[3]
        s, k = self.stride, self.kernel
        for i in range(k):
            for j in range(k):
                contrib = np.einsum("nohw,oc->nchw", dout, self.W[:, :, i, j], optimize=True)
                dx[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += contrib
        return dx, [dW, db]

    def spec(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride}


class ReLU:
    kind = "relu"
    params: list = []

    def init(self, rng):
        pass

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, cache, dout):
        return dout * (cache > 0), []

    def spec(self):
        return {"kind": self.kind}


class Flatten:
    kind = "flatten"
    params: list = []

    def init(self, rng):
        pass

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dout):
        return dout.reshape(cache), []

    def spec(self):
        return {"kind": self.kind}


def layer_from_spec(spec: dict):
    kind = spec.get("kind")
    if kind == "dense":
        return Dense(spec["n_in"], spec["n_out"])
    if kind == "conv2d":
        return Conv2d(spec["in_ch"], spec["out_ch"], spec["kernel"], spec.get("stride", 1))
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    raise ModelFormatError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------- bounds


@dataclass
class BoundSet:
    """Activation upper bounds keyed by the index of a ReLU layer.

    Dense activations get one bound per neuron; conv activations get one
    bound per filter, shared across the feature map.
    """

    bounds: dict[int, np.ndarray] = field(default_factory=dict)

    def copy(self) -> BoundSet:
        return BoundSet({k: v.copy() for k, v in self.bounds.items()})

    def norm(self) -> float:
        return float(sum(np.linalg.norm(z) for z in self.bounds.values()))

    @classmethod
    def constant(cls, model: Classifier, value: float, layers=None) -> BoundSet:
        layers = model.bounded_layer_indices() if layers is None else layers
        return cls({i: np.full(model.bound_width(i), float(value)) for i in layers})


# ---------------------------------------------------------------- classifier


class Classifier:
    def __init__(self, layers, input_shape, bounds: BoundSet | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.out_shape(shape)
            self.shapes.append(shape)
        if not self.layers or not isinstance(self.layers[-1], Dense) or self.layers[-1].n_out < 2:
            raise InvalidInputError("final layer must be dense with at least 2 outputs")
        self.num_classes = self.layers[-1].n_out
        self.bounds = bounds
        if bounds is not None:
            self.check_bounds(bounds)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def init(self, rng: np.random.Generator) -> Classifier:
        for layer in self.layers:
            layer.init(rng)
        return self

    def copy(self) -> Classifier:
        clone = Classifier([layer_from_spec(l.spec()) for l in self.layers], self.input_shape,
                           None if self.bounds is None else self.bounds.copy())
        for dst, src in zip(clone.params, self.params):
            dst[...] = src
        return clone

    def with_bounds(self, bounds: BoundSet | None) -> Classifier:
        """Shallow view sharing parameters, with ``bounds`` attached."""
        view = Classifier.__new__(Classifier)
        view.__dict__.update(self.__dict__)
        if bounds is not None:
            self.check_bounds(bounds)
        view.bounds = bounds
        return view

    # -- bound bookkeeping

    def relu_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, ReLU)]

    def is_convolutional(self) -> bool:
        return any(isinstance(l, Conv2d) for l in self.layers)

    def bounded_layer_indices(self) -> list[int]:
        """Default layers to bound: hidden layers 2..L for MLPs, the ReLUs of
        the first three conv layers for conv nets."""
        relus = self.relu_indices()
        if not self.is_convolutional():
            return relus[1:]
        conv_relus = [i for i in relus if len(self.shapes[i + 1]) == 3]
        return conv_relus[:3]

    def bound_width(self, index: int) -> int:
        shape = self.shapes[index + 1]
        return shape[0]

    def check_bounds(self, bounds: BoundSet):
        for i, z in bounds.bounds.items():
            if i not in self.relu_indices():
                raise InvalidInputError(f"bound attached to non-activation layer {i}")
            if z.shape != (self.bound_width(i),):
                raise InvalidInputError(f"bound for layer {i} has shape {z.shape}, "
                                        f"expected ({self.bound_width(i)},)")

    # -- passes

    def _as_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            return x[None]
        if x.shape[1:] != self.input_shape:
            raise InvalidInputError(f"input shape {x.shape} does not match {self.input_shape}")
        return x

    def forward(self, x, bounds: BoundSet | None = None, keep_cache: bool = False):
        """Batched logits. ``bounds`` overrides the attached BoundSet."""
        bounds = self.bounds if bounds is None else bounds
        zmap = {} if bounds is None else bounds.bounds
        h = self._as_batch(x)
        caches = []
        for i, layer in enumerate(self.layers):
            h, cache = layer.forward(h)
            clamp = None
            if i in zmap:
                z = zmap[i].reshape((1, -1) + (1,) * (h.ndim - 2))
                clamp = h > z
                h = np.minimum(h, z)
            if keep_cache:
                caches.append((cache, clamp))
        return (h, caches) if keep_cache else h

    def backward(self, caches, dlogits, want_params=True, want_bounds=False):
        """Returns (dx, param grads, bound grads) for upstream ``dlogits``."""
        g = dlogits
        pgrads: list[list[np.ndarray]] = [None] * len(self.layers)
        bgrads: dict[int, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            cache, clamp = caches[i]
            if clamp is not None:
                if want_bounds:
                    axes = (0,) + tuple(range(2, g.ndim))
                    bgrads[i] = np.where(clamp, g, 0.0).sum(axis=axes)
                g = np.where(clamp, 0.0, g)
            g, grads = self.layers[i].backward(cache, g)
            pgrads[i] = grads
        flat = [p for grads in pgrads for p in grads] if want_params else None
        return g, flat, bgrads

    def spec(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [l.spec() for l in self.layers]}


def mlp(n_in: int, hidden, n_out: int) -> Classifier:
    layers, d = [], n_in
    for width in hidden:
        layers += [Dense(d, width), ReLU()]
        d = width
    layers.append(Dense(d, n_out))
    return Classifier(layers, (n_in,))


# ---------------------------------------------------------------- public ops


def forward_logits(model: Classifier, x) -> np.ndarray:
    """Logits for one sample (length K) or a batch (N, K)."""
    x = np.asarray(x, dtype=np.float64)
    out = model.forward(x)
    return out[0] if x.shape == model.input_shape else out


def runner_up(logits: np.ndarray, cls: int) -> np.ndarray:
    """Index of the largest logit other than ``cls``; ties go to the lowest index."""
    masked = np.array(logits, dtype=np.float64, copy=True)
    masked[:, cls] = -np.inf
    return np.argmax(masked, axis=1)


def margin_and_grad(model: Classifier, x: np.ndarray, cls: int, head: str = "margin",
                    bounds: BoundSet | None = None):
    """Batched head values and their input gradients.

    ``head`` is ``"margin"`` for g_cls - max_{k != cls} g_k or ``"logit"``
    for g_cls alone.
    """
    logits, caches = model.forward(x, bounds=bounds, keep_cache=True)
    n = logits.shape[0]
    d = np.zeros_like(logits)
    d[:, cls] = 1.0
    if head == "margin":
        k = runner_up(logits, cls)
        values = logits[:, cls] - logits[np.arange(n), k]
        d[np.arange(n), k] -= 1.0
    elif head == "logit":
        values = logits[:, cls].copy()
    else:
        raise InvalidInputError(f"unknown head {head!r}")
    dx, _, _ = model.backward(caches, d, want_params=False)
    return values, dx


def grad_wrt_input(model: Classifier, x, cls: int, head: str = "margin") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == model.input_shape
    _, g = margin_and_grad(model, x, cls, head)
    return g[0] if single else g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray, weights=None):
    """Mean (optionally weighted) cross-entropy and its gradient w.r.t. logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    loss = float(-(w * logp[np.arange(n), y]).sum() / n)
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d *= (w / n)[:, None]
    return loss, d


def grad_wrt_params(model: Classifier, x, y, weights=None):
    """Cross-entropy loss and gradients aligned with ``model.params``."""
    x = model._as_batch(x)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if x.shape[0] == 0:
        raise InvalidInputError("empty batch")
    if y.shape[0] != x.shape[0]:
        raise InvalidInputError("labels and inputs differ in length")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise InvalidInputError("label out of range")
    logits, caches = model.forward(x, keep_cache=True)
    loss, d = cross_entropy(logits, y, weights)
    _, grads, _ = model.backward(caches, d)
    return loss, grads


# ---------------------------------------------------------------- persistence


def _bounds_header(bounds: BoundSet | None):
    if bounds is None:
        return None
    return [{"layer": int(i), "size": int(z.size)} for i, z in sorted(bounds.bounds.items())]


def dumps_model(model: Classifier) -> bytes:
    header = model.spec()
    header["num_classes"] = model.num_classes
    header["param_shapes"] = [list(p.shape) for p in model.params]
    header["bounds"] = _bounds_header(model.bounds)
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for p in model.params:
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    if model.bounds is not None:
        for _, z in sorted(model.bounds.bounds.items()):
            buf.write(np.ascontiguousarray(z, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_model(blob: bytes) -> Classifier:
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start : start + hlen].decode())
        layers = [layer_from_spec(s) for s in header["layers"]]
        model = Classifier(layers, header["input_shape"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, InvalidInputError) as exc:
        raise ModelFormatError(f"corrupt model header: {exc}") from exc
    offset = start + hlen
    params = model.params
    if [list(p.shape) for p in params] != header.get("param_shapes"):
        raise ModelFormatError("parameter table does not match layer table")

    def take(count):
        nonlocal offset
        end = offset + 8 * count
        if end > len(blob):
            raise ModelFormatError("truncated model payload")
        arr = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64)
        offset = end
        return arr

    for p in params:
        p[...] = take(p.size).reshape(p.shape)
    if header.get("bounds") is not None:
        bounds = BoundSet()
        for entry in header["bounds"]:
            bounds.bounds[int(entry["layer"])] = take(int(entry["size"]))
        try:
            model.check_bounds(bounds)
        except InvalidInputError as exc:
            raise ModelFormatError(str(exc)) from exc
        model.bounds = bounds
    if offset != len(blob):
        raise ModelFormatError("trailing bytes after model payload")
    return model


def save_model(model: Classifier, path) -> None:
    from .harness.io import atomic_write_bytes

    atomic_write_bytes(Path(path), dumps_model(model))


def load_model(path) -> Classifier:
    return loads_model(Path(path).read_bytes())
