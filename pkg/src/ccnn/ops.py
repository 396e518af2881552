"""Differentiable primitive operations on plain numpy arrays.

Tensors are numpy ndarrays; an activation map is [C, H, W] or batched
[B, C, H, W]. Every op here is a pure function with an explicit
``<op>_backward`` partner, so reverse-mode differentiation is just a matter
of recording calls (see tape.GradientTape). Ops preserve the input dtype:
float32 in production, float64 in the gradient-check suite.

The single stateful exception is batch normalization in train mode, which
returns refreshed running statistics for the caller to store.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DataError, DimensionError, ParameterError, UsageError

BN_EPS = 1e-5


@dataclass
class ConvParams:
    """A convolution kernel bundled with its batch-norm vectors.

    Convolutions carry no bias term; bn_beta plays that role. The bundle
    therefore accounts for weights.size + 4 * out_channels parameters.
    """

    weights: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise DimensionError(
                f"conv weights must be [out, in, kh, kw], got shape {self.weights.shape}"
            )
        out_channels = self.weights.shape[0]
        for field in ("bn_gamma", "bn_beta", "bn_mean", "bn_var"):
            vec = getattr(self, field)
            if vec.shape != (out_channels,):
                raise DimensionError(
                    f"{field} must have shape ({out_channels},), got {vec.shape}"
                )
        if not np.all(self.bn_var > 0):
            raise ParameterError("bn_var must be strictly positive")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def param_count(self):
        return int(self.weights.size) + 4 * self.out_channels


def _as_batched(x):
    """Promote [C,H,W] to [1,C,H,W]; report whether promotion happened."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected a 3d or 4d tensor, got shape {x.shape}")


def _conv_geometry(H, W, kh, kw, stride, padding):
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ParameterError("same padding requires odd kernel dims")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ParameterError(f"padding must be 'same' or 'valid', got {padding!r}")
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {H + 2 * ph}x{W + 2 * pw}"
        )
    return ph, pw, Ho, Wo


def _im2col(x, kh, kw, stride, ph, pw, Ho, Wo):
    """Extract sliding windows as [B, C*kh*kw, Ho*Wo]."""
    B, C = x.shape[:2]
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    sB, sC, sH, sW = x.strides
    view = as_strided(
        x,
        shape=(B, C, kh, kw, Ho, Wo),
        strides=(sB, sC, sH, sW, sH * stride, sW * stride),
    )
    return view.reshape(B, C * kh * kw, Ho * Wo)


def conv2d(x, w, stride=1, padding="same"):
    """2d cross-correlation with no bias term.

    x: [C,H,W] or [B,C,H,W]; w: [out, in, kh, kw] array or a ConvParams
    (whose .weights is used). Same padding zero-pads to keep H' = H/stride.
    """
    if isinstance(w, ConvParams):
        w = w.weights
    x, squeezed = _as_batched(x)
    B, C, H, W = x.shape
    if w.ndim != 4:
        raise DimensionError(f"kernel must be 4d, got shape {w.shape}")
    N, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(
            f"input has {C} channels but kernel expects {Cw}"
        )
    ph, pw, Ho, Wo = _conv_geometry(H, W, kh, kw, stride, padding)
    if kh == 1 and kw == 1 and stride == 1:
        y = (w.reshape(N, C) @ x.reshape(B, C, H * W)).reshape(B, N, H, W)
    else:
        cols = _im2col(x, kh, kw, stride, ph, pw, Ho, Wo)
        y = (w.reshape(N, C * kh * kw) @ cols).reshape(B, N, Ho, Wo)
    return y[0] if squeezed else y


def conv2d_backward(grad_out, x, w, stride=1, padding="same"):
    """Gradients of conv2d. Needs the saved forward input x.

    Returns (grad_input, grad_weights) with the shapes of x and w.
    """
    if x is None:
        raise UsageError("conv2d_backward requires the saved forward input")
    if isinstance(w, ConvParams):
        w = w.weights
    x, squeezed = _as_batched(x)
    grad_out, _ = _as_batched(grad_out)
    B, C, H, W = x.shape
    N, _, kh, kw = w.shape
    ph, pw, Ho, Wo = _conv_geometry(H, W, kh, kw, stride, padding)
    if grad_out.shape != (B, N, Ho, Wo):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"shape {(B, N, Ho, Wo)}"
        )
    g2 = grad_out.reshape(B, N, Ho * Wo)
    if kh == 1 and kw == 1 and stride == 1:
        xf = x.reshape(B, C, H * W)
        gw = np.matmul(g2, xf.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = (w.reshape(N, C).T @ g2).reshape(x.shape)
    else:
        cols = _im2col(x, kh, kw, stride, ph, pw, Ho, Wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = (w.reshape(N, C * kh * kw).T @ g2).reshape(B, C, kh, kw, Ho, Wo)
        gx_pad = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gx_pad[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[
                    :, :, i, j
                ]
        gx = gx_pad[:, :, ph : ph + H, pw : pw + W]
    if squeezed:
        gx = gx[0]
    return gx, gw


def _pool_quadrants(x):
    return (
        x[:, :, 0::2, 0::2],
        x[:, :, 0::2, 1::2],
        x[:, :, 1::2, 0::2],
        x[:, :, 1::2, 1::2],
    )


def maxpool2x2(x):
    """Disjoint 2x2 max pooling with stride 2. Spatial dims must be even."""
    x, squeezed = _as_batched(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {H}x{W}")
    a, b, c, d = _pool_quadrants(x)
    y = np.maximum(np.maximum(a, b), np.maximum(c, d))
    return y[0] if squeezed else y


def maxpool2x2_backward(grad_out, x):
    """Route each output gradient to the argmax of its 2x2 window.

    Ties go to the lowest linear index within the window (row-major), the
    first-occurrence convention of argmax.
    """
    if x is None:
        raise UsageError("maxpool2x2_backward requires the saved forward input")
    x, squeezed = _as_batched(x)
    grad_out, _ = _as_batched(grad_out)
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    if grad_out.shape != (B, C, Ho, Wo):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match pooled shape {(B, C, Ho, Wo)}"
        )
    # winner index 0..3 walks the window row-major, first occurrence on ties
    winner = np.stack(_pool_quadrants(x)).argmax(axis=0)
    gx = np.zeros_like(x)
    gx[:, :, 0::2, 0::2] = grad_out * (winner == 0)
    gx[:, :, 0::2, 1::2] = grad_out * (winner == 1)
    gx[:, :, 1::2, 0::2] = grad_out * (winner == 2)
    gx[:, :, 1::2, 1::2] = grad_out * (winner == 3)
    return gx[0] if squeezed else gx


def _bn_axes(x):
    """Reduction axes and channel broadcast shape for per-channel statistics."""
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 3:
        return (1, 2), (-1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise DimensionError(f"batchnorm expects a 2d, 3d or 4d tensor, got {x.shape}")


def batchnorm(
    x,
    gamma,
    beta,
    mode="train",
    momentum=0.9,
    running_mean=None,
    running_var=None,
    eps=BN_EPS,
):
    """Per-channel batch normalization.

    Train mode normalizes by the batch statistics (biased variance) and
    returns running statistics refreshed by exponential moving average:
    running <- momentum * running + (1 - momentum) * batch. Infer mode
    normalizes by the stored running statistics.

    Returns (y, mean_out, var_out). The caller owns storing the refreshed
    statistics; the op itself mutates nothing.
    """
    axes, cshape = _bn_axes(x)
    C = x.shape[1] if x.ndim == 4 else (x.shape[0] if x.ndim == 3 else x.shape[1])
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(
            f"gamma/beta must have shape ({C},), got {gamma.shape} and {beta.shape}"
        )
    if mode == "train":
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        # y = gamma*(x-mu)*ivar + beta folded to x*scale + shift: two passes
        scale = gamma / np.sqrt(var + eps)
        shift = beta - mu * scale
        y = x * scale.reshape(cshape)
        y += shift.reshape(cshape)
        if running_mean is None or running_var is None:
            mean_out, var_out = mu, var
        else:
            m = x.dtype.type(momentum)
            mean_out = m * running_mean + (1 - m) * mu
            var_out = m * running_var + (1 - m) * var
        return y, mean_out, var_out
    if mode == "infer":
        if running_mean is None or running_var is None:
            raise UsageError("infer-mode batchnorm needs running statistics")
        scale = gamma / np.sqrt(running_var + eps)
        shift = beta - running_mean * scale
        y = x * scale.reshape(cshape)
        y += shift.reshape(cshape)
        return y, running_mean, running_var
    raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")


def batchnorm_backward(
    grad_out,
    x,
    gamma,
    mode="train",
    running_mean=None,
    running_var=None,
    eps=BN_EPS,
):
    """Gradients of batchnorm w.r.t. (x, gamma, beta).

    Train mode differentiates through the batch statistics. Infer mode is a
    per-channel affine map, so the input gradient is elementwise.
    """
    axes, cshape = _bn_axes(x)
    if mode == "train":
        m = np.prod([x.shape[a] for a in axes], dtype=np.float64)
        m = x.dtype.type(m)
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = x - mu.reshape(cshape)
        xhat *= ivar.reshape(cshape)
        dgamma = (grad_out * xhat).sum(axis=axes)
        dbeta = grad_out.sum(axis=axes)
        # per-channel folding of the usual three-term formula:
        # sum(dxhat) = gamma*dbeta and sum(dxhat*xhat) = gamma*dgamma
        gx = grad_out * m
        gx -= dbeta.reshape(cshape)
        xhat *= dgamma.reshape(cshape)
        gx -= xhat
        gx *= (gamma * ivar / m).reshape(cshape)
        return gx, dgamma, dbeta
    if mode == "infer":
        if running_mean is None or running_var is None:
            raise UsageError("infer-mode batchnorm backward needs running statistics")
        ivar = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean.reshape(cshape)) * ivar.reshape(cshape)
        dgamma = (grad_out * xhat).sum(axis=axes)
        dbeta = grad_out.sum(axis=axes)
        gx = grad_out * (gamma * ivar).reshape(cshape)
        return gx, dgamma, dbeta
    raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def softmax(logits):
    """Stable softmax along the last axis."""
    logits = np.asarray(logits)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise DimensionError("softmax requires a non-empty logit vector")
    if not np.all(np.isfinite(logits)):
        raise DataError("softmax input must be finite")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad_out, probs):
    dot = (grad_out * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_out - dot)


def cross_entropy(probs, label):
    """Negative log likelihood of one label under a probability vector."""
    probs = np.asarray(probs)
    if probs.ndim != 1 or probs.size == 0:
        raise DimensionError("cross_entropy expects a non-empty 1d probability vector")
    if not 0 <= int(label) < probs.size:
        raise ParameterError(f"label {label} out of range for {probs.size} classes")
    return -np.log(probs[int(label)])


def cross_entropy_backward(grad_out, probs, label):
    gp = np.zeros_like(probs)
    gp[int(label)] = -grad_out / probs[int(label)]
    return gp


def softmax_cross_entropy(logits, labels):
    """Fused softmax + mean cross-entropy over a batch, via log-sum-exp.

    logits: [B, K]; labels: [B] integer class indices.
    Returns (loss, probs) where loss is a 0d scalar of the logits dtype.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[0] == 0 or logits.shape[-1] == 0:
        raise DimensionError(f"expected [batch, classes] logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"labels shape {labels.shape} does not match batch {logits.shape[0]}"
        )
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ParameterError("label out of range")
    m = logits.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    probs = np.exp(logits - lse)
    nll = lse[:, 0] - logits[np.arange(logits.shape[0]), labels]
    return nll.mean(), probs


def softmax_cross_entropy_backward(grad_out, probs, labels):
    B = probs.shape[0]
    gz = probs.copy()
    gz[np.arange(B), labels] -= 1
    gz *= grad_out / probs.dtype.type(B)
    return gz


def dropout(x, rate, mode="train", rng=None):
    """Inverted dropout. Returns (y, mask); mask is None when inactive.

    Train mode zeroes elements independently with probability ``rate`` and
    scales survivors by 1/(1-rate), so inference is the identity.
    """
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x, None
    if mode != "train":
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    mask = rng.random(x.shape) >= rate
    return x * mask / x.dtype.type(1 - rate), mask


def dropout_backward(grad_out, mask, rate):
    if mask is None:
        return grad_out
    return grad_out * mask / grad_out.dtype.type(1 - rate)


def linear(x, w, b=None):
    """Affine map y = x @ w + b for [B, F] (or a single [F] vector)."""
    x = np.asarray(x)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"linear shapes do not align: x {x.shape} vs w {w.shape}"
        )
    y = x @ w
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"bias shape {b.shape} does not match {w.shape[1]}")
        y = y + b
    return y[0] if single else y


def linear_backward(grad_out, x, w):
    """Returns (grad_x, grad_w, grad_b)."""
    single = x.ndim == 1
    if single:
        x = x[None]
        grad_out = grad_out[None]
    gx = grad_out @ w.T
    gw = x.T @ grad_out
    gb = grad_out.sum(axis=0)
    return (gx[0] if single else gx), gw, gb
