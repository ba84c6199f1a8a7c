"""Minimal differentiable layer zoo on numpy arrays.

Activations are 4-D ``[batch, height, width, channels]``. Convolutions are
cross-correlations with zero padding in the TensorFlow SAME convention:
stride-1 layers preserve the spatial size for any dilation rate, stride-s
layers produce ceil(size / s). The transposed convolution is the exact
adjoint of the matching strided convolution and multiplies the spatial size
by its stride.

Every forward has a hand-written backward; parameters and activations keep
whatever float dtype they are given, so gradient checking can run the same
code paths in 64-bit.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def xavier_init(shape, seed: int, dtype=np.float32) -> np.ndarray:
    """Glorot uniform init in +-sqrt(6 / (fan_in + fan_out)), deterministic by seed.

    For 4-D kernels the receptive field multiplies the channel fans (last two
    dims are treated as in/out channels); 2-D shapes are (fan_in, fan_out).
    """
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise ValueError(f"invalid shape {shape}")
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        receptive = shape[0] * shape[1]
        fan_in, fan_out = receptive * shape[2], receptive * shape[3]
    else:
        raise ValueError(f"xavier_init expects rank 2 or 4, got {shape}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _same_geometry(size: int, k: int, stride: int, dilation: int) -> tuple[int, int, int]:
    """(out_size, pad_lo, pad_hi) for SAME zero padding."""
    k_eff = (k - 1) * dilation + 1
    out = -(-size // stride)
    pad = max(0, (out - 1) * stride + k_eff - size)
    return out, pad // 2, pad - pad // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int, stride: int, dilation: int):
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    shape = (b, oh, ow, kh, kw, c)
    strides = (sb, sh * stride, sw * stride, sh * dilation, sw * dilation, sc)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def _col2im(g_cols: np.ndarray, padded_shape, oh: int, ow: int, stride: int, dilation: int):
    """Scatter-add patch gradients back onto the padded input."""
    b, hp, wp, c = padded_shape
    kh, kw = g_cols.shape[3], g_cols.shape[4]
    g_xp = np.zeros(padded_shape, dtype=g_cols.dtype)
    for p in range(kh):
        for q in range(kw):
            g_xp[
                :,
                p * dilation : p * dilation + oh * stride : stride,
                q * dilation : q * dilation + ow * stride : stride,
                :,
            ] += g_cols[:, :, :, p, q, :]
    return g_xp


def _check_4d(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D [B, H, W, C], got shape {x.shape}")
    return x


def conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    dilation: int = 1,
) -> np.ndarray:
    """SAME-padded cross-correlation; kernel ``[kh, kw, in_ch, out_ch]``."""
    x = _check_4d(x, "input")
    kh, kw, ci, co = kernel.shape
    if x.shape[3] != ci:
        raise ValueError(f"input has {x.shape[3]} channels, kernel expects {ci}")
    b, h, w, _ = x.shape
    oh, pt, pb = _same_geometry(h, kh, stride, dilation)
    ow, pl, pr = _same_geometry(w, kw, stride, dilation)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _im2col(xp, kh, kw, oh, ow, stride, dilation)
    out = np.tensordot(cols, kernel, axes=([3, 4, 5], [0, 1, 2]))
    if bias is not None:
        out = out + bias
    return out


def conv2d_grad(
    x: np.ndarray,
    kernel: np.ndarray,
    g_out: np.ndarray,
    stride: int = 1,
    dilation: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` w.r.t. input, kernel and bias."""
    x = _check_4d(x, "input")
    kh, kw, ci, co = kernel.shape
    b, h, w, _ = x.shape
    oh, pt, pb = _same_geometry(h, kh, stride, dilation)
    ow, pl, pr = _same_geometry(w, kw, stride, dilation)
    if g_out.shape != (b, oh, ow, co):
        raise ValueError(f"upstream gradient shape {g_out.shape} != {(b, oh, ow, co)}")
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _im2col(xp, kh, kw, oh, ow, stride, dilation)
    g_kernel = np.tensordot(cols, g_out, axes=([0, 1, 2], [0, 1, 2]))
    g_bias = g_out.sum(axis=(0, 1, 2))
    g_cols = np.tensordot(g_out, kernel, axes=([3], [3]))
    g_xp = _col2im(g_cols, xp.shape, oh, ow, stride, dilation)
    g_x = g_xp[:, pt : pt + h, pl : pl + w, :]
    return g_x, g_kernel, g_bias


def conv2d_transpose(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 2,
) -> np.ndarray:
    """Learned upsampling; kernel ``[kh, kw, out_ch, in_ch]``.

    Exact adjoint of ``conv2d(., kernel, stride=stride)``: output spatial size
    is ``stride`` times the input's.
    """
    x = _check_4d(x, "input")
    kh, kw, co, ci = kernel.shape
    if x.shape[3] != ci:
        raise ValueError(f"input has {x.shape[3]} channels, kernel expects {ci}")
    b, h, w, _ = x.shape
    th, tw = h * stride, w * stride
    oh, pt, pb = _same_geometry(th, kh, stride, 1)
    ow, pl, pr = _same_geometry(tw, kw, stride, 1)
    g_cols = np.tensordot(x, kernel, axes=([3], [3]))  # [b, h, w, kh, kw, co]
    out_p = _col2im(g_cols, (b, th + pt + pb, tw + pl + pr, co), oh, ow, stride, 1)
    out = out_p[:, pt : pt + th, pl : pl + tw, :]
    if bias is not None:
        out = out + bias
    return out


def conv2d_transpose_grad(
    x: np.ndarray,
    kernel: np.ndarray,
    g_out: np.ndarray,
    stride: int = 2,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_transpose` w.r.t. input, kernel and bias."""
    x = _check_4d(x, "input")
    kh, kw, co, ci = kernel.shape
    b, h, w, _ = x.shape
    th, tw = h * stride, w * stride
    if g_out.shape != (b, th, tw, co):
        raise ValueError(f"upstream gradient shape {g_out.shape} != {(b, th, tw, co)}")
    # the transpose is linear-adjoint to the strided conv, so its input grad
    # is that conv applied to the upstream gradient
    g_x = conv2d(g_out, kernel, bias=None, stride=stride, dilation=1)
    oh, pt, pb = _same_geometry(th, kh, stride, 1)
    ow, pl, pr = _same_geometry(tw, kw, stride, 1)
    gp = np.pad(g_out, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _im2col(gp, kh, kw, oh, ow, stride, 1)  # [b, h, w, kh, kw, co]
    g_kernel = np.tensordot(cols, x, axes=([0, 1, 2], [0, 1, 2]))  # [kh, kw, co, ci]
    g_bias = g_out.sum(axis=(0, 1, 2))
    return g_x, g_kernel, g_bias


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.9,
    train: bool = True,
):
    """Per-channel batch normalization.

    Train mode normalizes by batch statistics over (B, H, W) and returns
    updated running stats; inference mode normalizes by the running stats.
    Returns ``(y, cache, running_mean, running_var)``.
    """
    x = _check_4d(x, "input")
    if train:
        n = x.shape[0] * x.shape[1] * x.shape[2]
        if n < 2:
            raise ValueError("batch norm train mode needs batch*H*W >= 2")
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        new_rm = momentum * running_mean + (1.0 - momentum) * mean
        new_rv = momentum * running_var + (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = gamma * xhat + beta
    cache = (xhat, inv_std, gamma, train)
    return y, cache, new_rm, new_rv


def batchnorm_backward(g_out: np.ndarray, cache):
    """Gradients of batch norm w.r.t. input, gamma and beta."""
    xhat, inv_std, gamma, train = cache
    g_gamma = (g_out * xhat).sum(axis=(0, 1, 2))
    g_beta = g_out.sum(axis=(0, 1, 2))
    g_xhat = g_out * gamma
    if not train:
        return g_xhat * inv_std, g_gamma, g_beta
    n = g_out.shape[0] * g_out.shape[1] * g_out.shape[2]
    g_x = (
        inv_std
        / n
        * (
            n * g_xhat
            - g_xhat.sum(axis=(0, 1, 2))
            - xhat * (g_xhat * xhat).sum(axis=(0, 1, 2))
        )
    )
    return g_x, g_gamma, g_beta


def elu(x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray, g_out: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    return g_out * np.where(x > 0, 1.0, alpha * np.exp(np.minimum(x, 0.0)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid_grad(x: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    s = expit(x)
    return g_out * s * (1.0 - s)


def tanh_scaled(x: np.ndarray, dmax: float) -> np.ndarray:
    """dmax * tanh(x); range (-dmax, dmax)."""
    return dmax * np.tanh(x)


def tanh_scaled_grad(x: np.ndarray, g_out: np.ndarray, dmax: float) -> np.ndarray:
    t = np.tanh(x)
    return g_out * dmax * (1.0 - t * t)


# ---------------------------------------------------------------------------
# layer objects: thin stateful wrappers used to assemble networks
# ---------------------------------------------------------------------------


class Layer:
    """Base layer: forward caches whatever backward needs."""

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def grads(self) -> dict:
        return {}

    def state(self) -> dict:
        """Non-trainable buffers (running stats) for checkpointing."""
        return {}


class Conv2D(Layer):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, dilation=1, seed=0, dtype=np.float32):
        self.stride = stride
        self.dilation = dilation
        self.kernel = xavier_init((kernel, kernel, in_ch, out_ch), seed, dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)
        self._x = None
        self._grads = {}

    def forward(self, x, train=False):
        self._x = x
        return conv2d(x, self.kernel, self.bias, self.stride, self.dilation)

    def backward(self, g_out):
        g_x, g_k, g_b = conv2d_grad(self._x, self.kernel, g_out, self.stride, self.dilation)
        self._grads = {"kernel": g_k, "bias": g_b}
        return g_x

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def grads(self):
        return self._grads


class ConvTranspose2D(Layer):
    def __init__(self, in_ch, out_ch, kernel=5, stride=2, seed=0, dtype=np.float32):
        self.stride = stride
        self.kernel = xavier_init((kernel, kernel, out_ch, in_ch), seed, dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)
        self._x = None
        self._grads = {}

    def forward(self, x, train=False):
        self._x = x
        return conv2d_transpose(x, self.kernel, self.bias, self.stride)

    def backward(self, g_out):
        g_x, g_k, g_b = conv2d_transpose_grad(self._x, self.kernel, g_out, self.stride)
        self._grads = {"kernel": g_k, "bias": g_b}
        return g_x

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def grads(self):
        return self._grads


class BatchNorm(Layer):
    def __init__(self, ch, eps=1e-5, momentum=0.9, dtype=np.float32):
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(ch, dtype=dtype)
        self.beta = np.zeros(ch, dtype=dtype)
        self.running_mean = np.zeros(ch, dtype=dtype)
        self.running_var = np.ones(ch, dtype=dtype)
        self._cache = None
        self._grads = {}

    def forward(self, x, train=False):
        y, cache, rm, rv = batchnorm_forward(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.eps, self.momentum, train,
        )
        if train:
            self.running_mean = rm
            self.running_var = rv
        self._cache = cache
        return y

    def backward(self, g_out):
        g_x, g_gamma, g_beta = batchnorm_backward(g_out, self._cache)
        self._grads = {"gamma": g_gamma, "beta": g_beta}
        return g_x

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return self._grads

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class ELU(Layer):
    def __init__(self, alpha=1.0):
        self.alpha = alpha
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return elu(x, self.alpha)

    def backward(self, g_out):
        return elu_grad(self._x, g_out, self.alpha)


class Sigmoid(Layer):
    def forward(self, x, train=False):
        self._x = x
        return sigmoid(x)

    def backward(self, g_out):
        return sigmoid_grad(self._x, g_out)


class ScaledTanh(Layer):
    def __init__(self, dmax):
        self.dmax = dmax
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return tanh_scaled(x, self.dmax)

    def backward(self, g_out):
        return tanh_scaled_grad(self._x, g_out, self.dmax)


class Sequential:
    """Chain of layers with flat dotted parameter names."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, g_out):
        for layer in reversed(self.layers):
            g_out = layer.backward(g_out)
        return g_out

    def params(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, val in layer.params().items():
                out[f"{i:02d}.{name}"] = val
        return out

    def grads(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, val in layer.grads().items():
                out[f"{i:02d}.{name}"] = val
        return out

    def state(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, val in layer.state().items():
                out[f"{i:02d}.{name}"] = val
        return out

    def set_params(self, values: dict) -> None:
        for i, layer in enumerate(self.layers):
            for name in layer.params():
                key = f"{i:02d}.{name}"
                if key in values:
                    setattr(layer, name, np.asarray(values[key]))

    def set_state(self, values: dict) -> None:
        for i, layer in enumerate(self.layers):
            for name in layer.state():
                key = f"{i:02d}.{name}"
                if key in values:
                    setattr(layer, name, np.asarray(values[key]))
