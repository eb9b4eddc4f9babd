"""Numpy reference CNN for 5-class KL grading.

Shape rules (forced by the published layer table): convolutions use "same"
padding, output = ceil(in / stride), with the extra pad row/column on the
bottom/right; pooling is "valid", output = floor((in - k) / stride) + 1.
For a 1x200x300 input this gives conv1 32x100x150 (ceil(200/2) = 100) and
maxPool1 32x49x74 (floor((100 - 3)/2) + 1 = 49), down to 128x5x8 after
maxPool4.

Tensors are NCHW. Weights are initialised uniform in +-sqrt(6 / fan_in).
Convolutions followed by batch normalisation carry no bias.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
INIT_SCHEME = "uniform(+-sqrt(6/fan_in))"
LAYER_KINDS = ("conv", "batchnorm", "relu", "maxpool", "flatten", "dense", "dropout", "softmax")


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    kernels: int = 0
    kernel_size: tuple = (1, 1)
    stride: int = 1
    padding: str = "same"
    dropout_rate: float = 0.0
    l2_penalty: float = 0.0
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be >= 0")


def _same_out(n, s):
    return -(-n // s)


def _valid_out(n, k, s):
    return (n - k) // s + 1


def layer_output_shape(layer: LayerSpec, shape: tuple) -> tuple:
    if layer.kind == "conv":
        c, h, w = shape
        if layer.padding == "same":
            return (layer.kernels, _same_out(h, layer.stride), _same_out(w, layer.stride))
        kh, kw = layer.kernel_size
        return (layer.kernels, _valid_out(h, kh, layer.stride), _valid_out(w, kw, layer.stride))
    if layer.kind == "maxpool":
        c, h, w = shape
        kh, kw = layer.kernel_size
        out = (c, _valid_out(h, kh, layer.stride), _valid_out(w, kw, layer.stride))
        if out[1] < 1 or out[2] < 1:
            raise ShapeError(f"{layer.name}: pooling window larger than {shape}")
        return out
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind == "dense":
        if len(shape) != 1:
            raise ShapeError(f"{layer.name}: dense layer needs a flat input, got {shape}")
        return (layer.kernels,)
    return tuple(shape)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple

    def shapes(self) -> list[tuple]:
        out, shape = [], tuple(self.input_shape)
        for layer in self.layers:
            shape = layer_output_shape(layer, shape)
            out.append(shape)
        return out

    def shape_table(self) -> list[dict]:
        """Rows for conv / maxpool / flatten / dense layers, as in a layer table."""
        rows = []
        for layer, shape in zip(self.layers, self.shapes()):
            if layer.kind in ("conv", "maxpool", "flatten", "dense"):
                ks = "x".join(map(str, layer.kernel_size)) if layer.kind in ("conv", "maxpool") else "-"
                rows.append(dict(
                    layer=layer.name, kernels=layer.kernels if layer.kind in ("conv", "dense") else "-",
                    kernel_size=ks, stride=layer.stride if layer.kind in ("conv", "maxpool") else "-",
                    output_shape="x".join(map(str, shape)),
                ))
        return rows


def _conv_block(name, kernels, k, stride, l2=0.0):
    return [
        LayerSpec("conv", name, kernels, (k, k), stride, "same", l2_penalty=l2, bias=False),
        LayerSpec("batchnorm", f"{name}_bn"),
        LayerSpec("relu", f"{name}_relu"),
    ]


def _pool(name):
    return LayerSpec("maxpool", name, 0, (3, 3), 2, "valid")


def build_reference_network(input_shape=(1, 200, 300)) -> NetworkSpec:
    layers = [
        *_conv_block("conv1", 32, 11, 2), _pool("maxPool1"),
        *_conv_block("conv2", 64, 5, 1), _pool("maxPool2"),
        *_conv_block("conv3", 96, 3, 1, 0.01), _pool("maxPool3"),
        *_conv_block("conv4", 128, 3, 1, 0.01),
        LayerSpec("dropout", "drop4", dropout_rate=0.25), _pool("maxPool4"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc5", 1024, l2_penalty=0.01),
        LayerSpec("relu", "fc5_relu"),
        LayerSpec("dropout", "drop5", dropout_rate=0.5),
        LayerSpec("dense", "fc6", 5),
        LayerSpec("softmax", "softmax"),
    ]
    return NetworkSpec(tuple(layers), tuple(input_shape))


def build_small_network(input_shape=(1, 20, 30), widths=(4, 8), hidden=16) -> NetworkSpec:
    """Downsized network with the same layer kinds, for gradient checks and desk training."""
    layers = [
        *_conv_block("conv1", widths[0], 3, 2), _pool("maxPool1"),
        *_conv_block("conv2", widths[1], 3, 1, 0.01),
        LayerSpec("dropout", "drop2", dropout_rate=0.25), _pool("maxPool2"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc3", hidden, l2_penalty=0.01),
        LayerSpec("relu", "fc3_relu"),
        LayerSpec("dropout", "drop3", dropout_rate=0.5),
        LayerSpec("dense", "fc4", 5),
        LayerSpec("softmax", "softmax"),
    ]
    return NetworkSpec(tuple(layers), tuple(input_shape))


# --------------------------------------------------------------------------
# network state


@dataclass
class Network:
    spec: NetworkSpec
    params: dict
    running: dict = field(default_factory=dict)
    dtype: type = np.float64

    @property
    def penalized(self) -> dict:
        return {f"{l.name}.W": l.l2_penalty for l in self.spec.layers if l.l2_penalty > 0}


def init_network(spec: NetworkSpec, seed: int = 0, dtype=np.float64) -> Network:
    rng = np.random.default_rng(seed)
    params, running = {}, {}
    shape = tuple(spec.input_shape)
    for layer in spec.layers:
        if layer.kind == "conv":
            kh, kw = layer.kernel_size
            fan_in = shape[0] * kh * kw
            lim = math.sqrt(6.0 / fan_in)
            params[f"{layer.name}.W"] = rng.uniform(-lim, lim, (layer.kernels, shape[0], kh, kw)).astype(dtype)
            if layer.bias:
                params[f"{layer.name}.b"] = np.zeros(layer.kernels, dtype)
        elif layer.kind == "dense":
            lim = math.sqrt(6.0 / shape[0])
            params[f"{layer.name}.W"] = rng.uniform(-lim, lim, (shape[0], layer.kernels)).astype(dtype)
            if layer.bias:
                params[f"{layer.name}.b"] = np.zeros(layer.kernels, dtype)
        elif layer.kind == "batchnorm":
            c = shape[0]
            params[f"{layer.name}.gamma"] = np.ones(c, dtype)
            params[f"{layer.name}.beta"] = np.zeros(c, dtype)
            running[f"{layer.name}.mean"] = np.zeros(c, dtype)
            running[f"{layer.name}.var"] = np.ones(c, dtype)
        shape = layer_output_shape(layer, shape)
    return Network(spec, params, running, dtype)


# --------------------------------------------------------------------------
# layer primitives


def _same_pads(n, k, s):
    out = _same_out(n, s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def conv_forward(x, W, b, stride, padding="same"):
    """Returns (out, cache). ``W`` is (F, C, kh, kw)."""
    N, C, H, Wd = x.shape
    F, _, kh, kw = W.shape
    if padding == "same":
        ph, pw = _same_pads(H, kh, stride), _same_pads(Wd, kw, stride)
    else:
        ph, pw = (0, 0), (0, 0)
    xp = np.pad(x, ((0, 0), (0, 0), ph, pw))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    out = cols @ W.reshape(F, -1).T
    if b is not None:
        out = out + b
    out = out.reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2)
    return out, (x.shape, xp.shape, ph, pw, cols, W, stride, Ho, Wo)


def conv_backward(dout, cache):
    x_shape, xp_shape, ph, pw, cols, W, stride, Ho, Wo = cache
    N, C, H, Wd = x_shape
    F, _, kh, kw = W.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, F)
    dW = (d2.T @ cols).reshape(W.shape)
    db = d2.sum(0)
    dcols = (d2 @ W.reshape(F, -1)).reshape(N, Ho, Wo, C, kh, kw)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, ph[0] : ph[0] + H, pw[0] : pw[0] + Wd]
    return dx, dW, db


def maxpool_forward(x, k, stride):
    kh, kw = k
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    N, C, Ho, Wo = win.shape[:4]
    flat = win.reshape(N, C, Ho, Wo, kh * kw)
    arg = flat.argmax(-1)
    out = np.take_along_axis(flat, arg[..., None], -1)[..., 0]
    return out, (x.shape, arg, k, stride)


def maxpool_backward(dout, cache):
    x_shape, arg, (kh, kw), stride = cache
    Ho, Wo = arg.shape[2], arg.shape[3]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            m = arg == i * kw + j
            dx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dout * m
    return dx


def _bn_axes(x):
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bn_shape(x, v):
    return v.reshape(1, -1, 1, 1) if x.ndim == 4 else v.reshape(1, -1)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train):
    axes = _bn_axes(x)
    if train:
        mu = x.mean(axes)
        var = x.var(axes)
        running_mean *= BN_MOMENTUM
        running_mean += (1 - BN_MOMENTUM) * mu
        running_var *= BN_MOMENTUM
        running_var += (1 - BN_MOMENTUM) * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - _bn_shape(x, mu)) * _bn_shape(x, inv)
    out = xhat * _bn_shape(x, gamma) + _bn_shape(x, beta)
    return out, (xhat, inv, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv, gamma, train = cache
    axes = _bn_axes(dout)
    dgamma = (dout * xhat).sum(axes)
    dbeta = dout.sum(axes)
    dxhat = dout * _bn_shape(dout, gamma)
    if not train:
        return dxhat * _bn_shape(dout, inv), dgamma, dbeta
    m = dout.size / dout.shape[1]
    dx = (_bn_shape(dout, inv) / m) * (
        m * dxhat - _bn_shape(dout, dxhat.sum(axes)) - xhat * _bn_shape(dout, (dxhat * xhat).sum(axes))
    )
    return dx, dgamma, dbeta


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    caches: list
    logits: np.ndarray
    masks: dict


def forward(net: Network, batch, mode: str = "eval", seed: int = 0):
    """Class probabilities and the cache needed by :func:`backward`.

    ``mode="train"`` uses batch statistics (updating running ones) and
    inverted dropout with masks drawn from ``seed``.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = np.asarray(batch, dtype=net.dtype)
    if x.shape[1:] != tuple(net.spec.input_shape):
        raise ShapeError(f"batch shape {x.shape[1:]} != input {tuple(net.spec.input_shape)}")
    train = mode == "train"
    rng = np.random.default_rng(seed)
    caches, masks = [], {}
    logits = None
    P = net.params
    for layer in net.spec.layers:
        n = layer.name
        if layer.kind == "conv":
            x, c = conv_forward(x, P[f"{n}.W"], P.get(f"{n}.b"), layer.stride, layer.padding)
        elif layer.kind == "batchnorm":
            x, c = batchnorm_forward(x, P[f"{n}.gamma"], P[f"{n}.beta"],
                                     net.running[f"{n}.mean"], net.running[f"{n}.var"], train)
        elif layer.kind == "relu":
            c = x > 0
            x = x * c
        elif layer.kind == "maxpool":
            x, c = maxpool_forward(x, layer.kernel_size, layer.stride)
        elif layer.kind == "flatten":
            c = x.shape
            x = x.reshape(x.shape[0], -1)
        elif layer.kind == "dense":
            c = x
            x = x @ P[f"{n}.W"]
            if f"{n}.b" in P:
                x = x + P[f"{n}.b"]
        elif layer.kind == "dropout":
            if train and layer.dropout_rate > 0:
                keep = 1.0 - layer.dropout_rate
                c = (rng.random(x.shape) < keep) / keep
                masks[n] = c
                x = x * c
            else:
                c = None
        elif layer.kind == "softmax":
            logits = x
            c = None
            x = softmax(x)
        caches.append(c)
    return x, ForwardCache(caches, logits if logits is not None else x, masks)


def backward(net: Network, cache: ForwardCache, dlogits) -> dict:
    grads = {}
    d = dlogits
    layers = net.spec.layers
    softmax_seen = False
    for layer, c in zip(reversed(layers), reversed(cache.caches)):
        n = layer.name
        if layer.kind == "softmax":
            softmax_seen = True  # dlogits is already w.r.t. the pre-softmax input
        elif layer.kind == "conv":
            d, dW, db = conv_backward(d, c)
            grads[f"{n}.W"] = dW
            if f"{n}.b" in net.params:
                grads[f"{n}.b"] = db
        elif layer.kind == "batchnorm":
            d, grads[f"{n}.gamma"], grads[f"{n}.beta"] = batchnorm_backward(d, c)
        elif layer.kind == "relu":
            d = d * c
        elif layer.kind == "maxpool":
            d = maxpool_backward(d, c)
        elif layer.kind == "flatten":
            d = d.reshape(c)
        elif layer.kind == "dense":
            grads[f"{n}.W"] = c.T @ d
            if f"{n}.b" in net.params:
                grads[f"{n}.b"] = d.sum(0)
            d = d @ net.params[f"{n}.W"].T
        elif layer.kind == "dropout":
            if c is not None:
                d = d * c
    if not softmax_seen:
        raise ValueError("network must end in a softmax layer")
    return grads


def l2_penalty(net: Network) -> float:
    return float(sum(w * np.sum(net.params[k] ** 2) for k, w in net.penalized.items()))


def loss_and_gradients(net: Network, batch, labels, seed: int = 0, mode: str = "train"):
    """Mean cross-entropy plus sum of l2 * ||W||^2 over penalised layers."""
    labels = np.asarray(labels)
    if np.any((labels < 0) | (labels > 4)):
        raise ValueError("labels must be in 0..4")
    probs, cache = forward(net, batch, mode, seed)
    N = len(labels)
    logp = log_softmax(cache.logits)
    ce = -float(logp[np.arange(N), labels].mean())
    loss = ce + l2_penalty(net)
    dlogits = probs.copy()
    dlogits[np.arange(N), labels] -= 1.0
    grads = backward(net, cache, dlogits / N)
    for k, w in net.penalized.items():
        grads[k] = grads[k] + 2.0 * w * net.params[k]
    return loss, grads


# --------------------------------------------------------------------------
# optimiser and training


@dataclass(frozen=True)
class AdamConfig:
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


def adam_step(params: dict, grads: dict, state: dict, cfg: AdamConfig, t: int):
    """One Adam update with bias correction; returns (params, state) new dicts."""
    if t < 1:
        raise ValueError("step t must be >= 1")
    new_p, new_s = {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            new_p[k] = p
            continue
        m, v = state.get(k, (np.zeros_like(p), np.zeros_like(p)))
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1**t)
        vhat = v / (1 - cfg.beta2**t)
        new_p[k] = p - cfg.alpha * mhat / (np.sqrt(vhat) + cfg.epsilon)
        new_s[k] = (m, v)
    return new_p, new_s


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc")


def evaluate(net: Network, X, y, batch_size: int = 64) -> tuple[float, float]:
    """(cross-entropy + penalty, accuracy) in eval mode."""
    losses, correct = 0.0, 0
    for i in range(0, len(y), batch_size):
        xb, yb = X[i : i + batch_size], y[i : i + batch_size]
        probs, cache = forward(net, xb, "eval")
        logp = log_softmax(cache.logits)
        losses += -float(logp[np.arange(len(yb)), yb].sum())
        correct += int((probs.argmax(1) == yb).sum())
    return losses / len(y) + l2_penalty(net), correct / len(y)


def train(net: Network, X, y, epochs: int, batch_size: int = 32, cfg: AdamConfig | None = None,
          seed: int = 0, validation=None) -> list[dict]:
    """Mini-batch Adam training; ``net`` is updated in place.

    Each epoch records eval-mode loss and accuracy on the training data and,
    when given, on ``validation=(X_val, y_val)``.
    """
    cfg = cfg or AdamConfig()
    X = np.asarray(X, dtype=net.dtype)
    y = np.asarray(y)
    if len(np.unique(y)) < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    state, t, history = {}, 0, []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(y))
        for i in range(0, len(y), batch_size):
            idx = order[i : i + batch_size]
            t += 1
            loss, grads = loss_and_gradients(net, X[idx], y[idx], seed=int(rng.integers(2**31)))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {t}")
            net.params, state = adam_step(net.params, grads, state, cfg, t)
        tr_loss, tr_acc = evaluate(net, X, y)
        row = dict(epoch=epoch, train_loss=tr_loss, train_acc=tr_acc,
                   val_loss=float("nan"), val_acc=float("nan"))
        if validation is not None:
            row["val_loss"], row["val_acc"] = evaluate(net, np.asarray(validation[0], net.dtype),
                                                       np.asarray(validation[1]))
        history.append(row)
    return history


def rmse_from_probs(probs, labels, mode: str = "expectation") -> float:
    """RMSE of a numeric grade read from class probabilities.

    ``expectation`` scores sum_k k p_k; ``argmax`` scores the modal class.
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if not np.allclose(probs.sum(1), 1.0, atol=1e-6):
        raise ValueError("probability rows must sum to 1")
    if mode == "expectation":
        grade = probs @ np.arange(probs.shape[1])
    elif mode == "argmax":
        grade = probs.argmax(1).astype(float)
    else:
        raise ValueError("mode must be 'expectation' or 'argmax'")
    return float(np.sqrt(np.mean((grade - labels) ** 2)))


# --------------------------------------------------------------------------
# checks and synthetic data


def synthetic_bar_images(n: int, shape=(1, 20, 30), seed: int = 0, noise: float = 0.1):
    """Images whose class (0..4) sets the vertical band holding a bright bar."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    y = np.arange(n) % 5
    rng.shuffle(y)
    X = noise * rng.standard_normal((n, c, h, w))
    band = h / 5.0
    for i, k in enumerate(y):
        r0 = int(k * band)
        r1 = max(int((k + 1) * band), r0 + 1)
        X[i, :, r0:r1, :] += 1.0
    return X, y


def numerical_gradients(net: Network, batch, labels, seed: int = 0, h: float = 1e-5) -> dict:
    """Central finite differences of the loss for every parameter entry."""
    out = {}
    saved = {k: v.copy() for k, v in net.running.items()}

    def loss_at():
        net.running = {k: v.copy() for k, v in saved.items()}
        loss, _ = _loss_only(net, batch, labels, seed)
        return loss

    for k, p in net.params.items():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            lp = loss_at()
            p[i] = old - h
            lm = loss_at()
            p[i] = old
            g[i] = (lp - lm) / (2 * h)
        out[k] = g
    net.running = saved
    return out


def _loss_only(net, batch, labels, seed):
    probs, cache = forward(net, batch, "train", seed)
    logp = log_softmax(cache.logits)
    return -float(logp[np.arange(len(labels)), labels].mean()) + l2_penalty(net), probs


def gradient_check(net: Network | None = None, batch_size: int = 4, seed: int = 0,
                   h: float = 1e-5) -> dict:
    """Max relative error between backprop and finite differences per tensor.

    Relative error is |a - n| / max(|a| + |n|, 1e-8).
    """
    net = net or init_network(build_small_network(), seed, np.float64)
    rng = np.random.default_rng(seed + 1)
    X = rng.standard_normal((batch_size, *net.spec.input_shape))
    y = rng.integers(0, 5, batch_size)
    saved = {k: v.copy() for k, v in net.running.items()}
    _, grads = loss_and_gradients(net, X, y, seed=seed)
    net.running = saved
    num = numerical_gradients(net, X, y, seed=seed, h=h)
    report = {}
    for k in net.params:
        a, n = grads[k], num[k]
        report[k] = float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-8)))
    return report


def model_header(net: Network) -> dict:
    return {
        "format": "koasev-cnn", "version": 1, "init": INIT_SCHEME,
        "input_shape": "x".join(map(str, net.spec.input_shape)),
        "dtype": np.dtype(net.dtype).name,
        "layers": ";".join(f"{l.kind}:{l.name}" for l in net.spec.layers),
    }
