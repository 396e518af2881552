"""Randomized finite-difference checks for every differentiable op.

Each check_* function draws one float64 instance from its seed, runs the
analytic backward, and compares it against central differences on the same
scalar loss sum(forward(x) * R) for a random weighting R. The unit suite
calls them with a handful of seeds; the full sweep reuses them in bulk.
"""

import numpy as np

from ccnn import ops
from ccnn.architecture import gwap_backward, gwap_forward

import oracles

RTOL = 1e-4
ATOL = 1e-6


def _close(analytic, fd, label):
    np.testing.assert_allclose(
        analytic, fd, rtol=RTOL, atol=ATOL, err_msg=f"{label} gradient mismatch"
    )


def check_conv2d(seed, k=3, stride=1, padding="same"):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, k, k))
    y = ops.conv2d(x, w, stride, padding)
    r = rng.standard_normal(y.shape)
    gx, gw = ops.conv2d_backward(r, x, w, stride, padding)
    fd_x = oracles.fd_gradient(
        lambda v: float((ops.conv2d(v, w, stride, padding) * r).sum()), x
    )
    fd_w = oracles.fd_gradient(
        lambda v: float((ops.conv2d(x, v, stride, padding) * r).sum()), w
    )
    _close(gx, fd_x, "conv2d input")
    _close(gw, fd_w, "conv2d weight")


def check_maxpool(seed):
    # distinct, well separated values keep the argmax stable under the probe
    rng = np.random.default_rng(seed)
    vals = np.linspace(-1.0, 1.0, 2 * 3 * 6 * 6)
    x = rng.permutation(vals).reshape(2, 3, 6, 6)
    y = ops.maxpool2x2(x)
    r = rng.standard_normal(y.shape)
    gx = ops.maxpool2x2_backward(r, x)
    fd = oracles.fd_gradient(lambda v: float((ops.maxpool2x2(v) * r).sum()), x)
    _close(gx, fd, "maxpool2x2")


def check_batchnorm_train(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 5, 5))
    gamma = rng.standard_normal(4) + 1.5
    beta = rng.standard_normal(4)
    y, _, _ = ops.batchnorm(x, gamma, beta, mode="train")
    r = rng.standard_normal(y.shape)
    gx, dgamma, dbeta = ops.batchnorm_backward(r, x, gamma, mode="train")

    def loss(xv, gv, bv):
        return float((ops.batchnorm(xv, gv, bv, mode="train")[0] * r).sum())

    _close(gx, oracles.fd_gradient(lambda v: loss(v, gamma, beta), x), "bn train input")
    _close(dgamma, oracles.fd_gradient(lambda v: loss(x, v, beta), gamma), "bn train gamma")
    _close(dbeta, oracles.fd_gradient(lambda v: loss(x, gamma, v), beta), "bn train beta")


def check_batchnorm_infer(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    gamma = rng.standard_normal(3) + 1.5
    beta = rng.standard_normal(3)
    rm = rng.standard_normal(3)
    rv = rng.random(3) + 0.5
    y, _, _ = ops.batchnorm(x, gamma, beta, mode="infer", running_mean=rm, running_var=rv)
    r = rng.standard_normal(y.shape)
    gx, dgamma, dbeta = ops.batchnorm_backward(
        r, x, gamma, mode="infer", running_mean=rm, running_var=rv
    )

    def loss(xv, gv, bv):
        out = ops.batchnorm(xv, gv, bv, mode="infer", running_mean=rm, running_var=rv)[0]
        return float((out * r).sum())

    _close(gx, oracles.fd_gradient(lambda v: loss(v, gamma, beta), x), "bn infer input")
    _close(dgamma, oracles.fd_gradient(lambda v: loss(x, v, beta), gamma), "bn infer gamma")
    _close(dbeta, oracles.fd_gradient(lambda v: loss(x, gamma, v), beta), "bn infer beta")


def check_relu(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 7))
    x += np.sign(x) * 0.05  # keep every element clear of the kink
    r = rng.standard_normal(x.shape)
    gx = ops.relu_backward(r, x)
    fd = oracles.fd_gradient(lambda v: float((ops.relu(v) * r).sum()), x)
    _close(gx, fd, "relu")


def check_softmax(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((3, 5))
    p = ops.softmax(z)
    r = rng.standard_normal(p.shape)
    gz = ops.softmax_backward(r, p)
    fd = oracles.fd_gradient(lambda v: float((ops.softmax(v) * r).sum()), z)
    _close(gz, fd, "softmax")


def check_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    probs = ops.softmax(rng.standard_normal(6))
    label = int(rng.integers(6))
    gp = ops.cross_entropy_backward(1.0, probs, label)
    fd = oracles.fd_gradient(lambda v: float(ops.cross_entropy(v, label)), probs)
    _close(gp, fd, "cross_entropy")


def check_softmax_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((4, 5))
    labels = rng.integers(0, 5, size=4)
    _, probs = ops.softmax_cross_entropy(z, labels)
    gz = ops.softmax_cross_entropy_backward(1.0, probs, labels)
    fd = oracles.fd_gradient(
        lambda v: float(ops.softmax_cross_entropy(v, labels)[0]), z
    )
    _close(gz, fd, "softmax_cross_entropy")


def check_dropout(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 6))
    rate = 0.3
    # the mask depends only on the rng stream, so a reseeded generator
    # reproduces it for every probe evaluation
    _, mask = ops.dropout(x, rate, mode="train", rng=np.random.default_rng(seed + 1))
    r = rng.standard_normal(x.shape)
    gx = ops.dropout_backward(r, mask, rate)
    fd = oracles.fd_gradient(
        lambda v: float(
            (ops.dropout(v, rate, "train", np.random.default_rng(seed + 1))[0] * r).sum()
        ),
        x,
    )
    _close(gx, fd, "dropout")


def check_linear(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 7))
    w = rng.standard_normal((7, 4))
    b = rng.standard_normal(4)
    y = ops.linear(x, w, b)
    r = rng.standard_normal(y.shape)
    gx, gw, gb = ops.linear_backward(r, x, w)
    fd_x = oracles.fd_gradient(lambda v: float((ops.linear(v, w, b) * r).sum()), x)
    fd_w = oracles.fd_gradient(lambda v: float((ops.linear(x, v, b) * r).sum()), w)
    fd_b = oracles.fd_gradient(lambda v: float((ops.linear(x, w, v) * r).sum()), b)
    _close(gx, fd_x, "linear input")
    _close(gw, fd_w, "linear weight")
    _close(gb, fd_b, "linear bias")


def check_gwap(seed, batched=True):
    rng = np.random.default_rng(seed)
    shape = (2, 3, 4, 4) if batched else (3, 4, 4)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((3, 4, 4))
    out = gwap_forward(x, w)
    r = rng.standard_normal(out.shape)
    gx, gw = gwap_backward(r, x, w)
    fd_x = oracles.fd_gradient(lambda v: float((gwap_forward(v, w) * r).sum()), x)
    fd_w = oracles.fd_gradient(lambda v: float((gwap_forward(x, v) * r).sum()), w)
    _close(gx, fd_x, "gwap input")
    _close(gw, fd_w, "gwap weight")


ALL_OP_CHECKS = (
    ("conv2d_same", lambda s: check_conv2d(s)),
    ("conv2d_valid_strided", lambda s: check_conv2d(s, k=3, stride=2, padding="valid")),
    ("conv2d_1x1", lambda s: check_conv2d(s, k=1)),
    ("maxpool2x2", check_maxpool),
    ("batchnorm_train", check_batchnorm_train),
    ("batchnorm_infer", check_batchnorm_infer),
    ("relu", check_relu),
    ("softmax", check_softmax),
    ("cross_entropy", check_cross_entropy),
    ("softmax_cross_entropy", check_softmax_cross_entropy),
    ("dropout", check_dropout),
    ("linear", check_linear),
    ("gwap", lambda s: check_gwap(s, batched=bool(s % 2))),
)
