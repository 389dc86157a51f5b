"""Minimal numpy layers with explicit backward passes.

Every layer exposes ``params`` and ``grads`` dicts with matching keys,
``forward(x, train, rng)`` and ``backward(dout) -> dx``. Bayesian layers
keep a (mean, rho) pair per weight tensor, with ``sigma = softplus(rho)``,
and sample weights with the reparameterization trick on every forward pass.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        self.mask = x > 0
        return x * self.mask

    def backward(self, dout):
        return dout * self.mask


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        self.shape = x.shape
        return x.reshape(len(x), -1)

    def backward(self, dout):
        return dout.reshape(self.shape)


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            self.mask = None
            return x
        keep = 1.0 - self.rate
        self.mask = (rng.random(x.shape) < keep) / keep
        return x * self.mask

    def backward(self, dout):
        return dout if self.mask is None else dout * self.mask


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    def forward(self, x, train=False, rng=None):
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        self.in_shape = x.shape
        xc = x[:, :, : 2 * h2, : 2 * w2]
        blocks = xc.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
        self.arg = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        b, c, h, w = self.in_shape
        h2, w2 = h // 2, w // 2
        blocks = np.zeros((b, c, h2, w2, 4), dtype=dout.dtype)
        np.put_along_axis(blocks, self.arg[..., None], dout[..., None], axis=-1)
        dx = np.zeros(self.in_shape, dtype=dout.dtype)
        dx[:, :, : 2 * h2, : 2 * w2] = (
            blocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
        )
        return dx


# ---------------------------------------------------------------- affine ops


def _dense_fwd(x, w, b):
    return x @ w + b


def _im2col(x, k):
    b, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # b, c, h', w', k, k
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(dcols, x_shape, k, ho, wo):
    b, c, h, w = x_shape
    d = dcols.reshape(b, ho, wo, c, k, k)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + ho, j:j + wo] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx


class _Affine(Layer):
    """Shared plumbing for dense and convolution layers (weights w, bias b)."""

    need_input_grad = True

    def _fwd(self, x, w, b):
        raise NotImplementedError

    def _bwd(self, dout, w):
        """Return dW, db, dx for the cached input."""
        raise NotImplementedError


class Dense(_Affine):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.params = {
            "w": rng.uniform(-bound, bound, (n_in, n_out)),
            "b": rng.uniform(-bound, bound, n_out),
        }
        self.zero_grad()

    def _fwd(self, x, w, b):
        self.x = x
        return _dense_fwd(x, w, b)

    def _bwd(self, dout, w):
        dx = dout @ w.T if self.need_input_grad else None
        return self.x.T @ dout, dout.sum(axis=0), dx

    def forward(self, x, train=False, rng=None):
        return self._fwd(x, self.params["w"], self.params["b"])

    def backward(self, dout):
        dw, db, dx = self._bwd(dout, self.params["w"])
        self.grads["w"] += dw
        self.grads["b"] += db
        return dx


class Conv2D(_Affine):
    """Valid (unpadded) stride-1 convolution."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        super().__init__()
        self.k = k
        fan_in = c_in * k * k
        bound = 1.0 / math.sqrt(fan_in)
        self.params = {
            "w": rng.uniform(-bound, bound, (fan_in, c_out)),
            "b": rng.uniform(-bound, bound, c_out),
        }
        self.zero_grad()

    def _fwd(self, x, w, b):
        self.x_shape = x.shape
        self.cols, self.ho, self.wo = _im2col(x, self.k)
        out = self.cols @ w + b
        return out.reshape(x.shape[0], self.ho, self.wo, -1).transpose(0, 3, 1, 2)

    def _bwd(self, dout, w):
        d = dout.transpose(0, 2, 3, 1).reshape(-1, dout.shape[1])
        dx = _col2im(d @ w.T, self.x_shape, self.k, self.ho, self.wo) if self.need_input_grad else None
        return self.cols.T @ d, d.sum(axis=0), dx

    def forward(self, x, train=False, rng=None):
        return self._fwd(x, self.params["w"], self.params["b"])

    def backward(self, dout):
        dw, db, dx = self._bwd(dout, self.params["w"])
        self.grads["w"] += dw
        self.grads["b"] += db
        return dx


# ---------------------------------------------------------------- Bayesian


class _BayesMixin:
    """Gaussian mean-field posterior over ``w`` and ``b``.

    Parameters are ``w_mu, w_rho, b_mu, b_rho``. The prior is N(0, 1); the
    closed-form KL divergence and its gradient are provided.
    """

    def _init_bayes(self, shape_w, shape_b, bound, sigma0, rng):
        rho0 = inverse_softplus(sigma0)
        self.params = {
            "w_mu": rng.uniform(-bound, bound, shape_w),
            "w_rho": np.full(shape_w, rho0),
            "b_mu": rng.uniform(-bound, bound, shape_b),
            "b_rho": np.full(shape_b, rho0),
        }
        self.eps = None
        self.fixed_eps = None
        self.zero_grad()

    def _sample(self, rng):
        p = self.params
        if self.fixed_eps is not None:
            ew, eb = self.fixed_eps
        else:
            ew = rng.standard_normal(p["w_mu"].shape)
            eb = rng.standard_normal(p["b_mu"].shape)
        self.eps = (ew, eb)
        w = p["w_mu"] + softplus(p["w_rho"]) * ew
        b = p["b_mu"] + softplus(p["b_rho"]) * eb
        return w, b

    def forward(self, x, train=False, rng=None):
        self.w, b = self._sample(rng)
        return self._fwd(x, self.w, b)

    def backward(self, dout):
        dw, db, dx = self._bwd(dout, self.w)
        ew, eb = self.eps
        p = self.params
        self.grads["w_mu"] += dw
        self.grads["w_rho"] += dw * ew * sigmoid(p["w_rho"])
        self.grads["b_mu"] += db
        self.grads["b_rho"] += db * eb * sigmoid(p["b_rho"])
        return dx

    def kl(self) -> float:
        total = 0.0
        for name in ("w", "b"):
            mu = self.params[f"{name}_mu"]
            sigma = softplus(self.params[f"{name}_rho"])
            total += float(np.sum(-np.log(sigma) + 0.5 * (sigma**2 + mu**2) - 0.5))
        return total

    def add_kl_grad(self, weight: float) -> None:
        for name in ("w", "b"):
            mu = self.params[f"{name}_mu"]
            rho = self.params[f"{name}_rho"]
            sigma = softplus(rho)
            self.grads[f"{name}_mu"] += weight * mu
            self.grads[f"{name}_rho"] += weight * (sigma - 1.0 / sigma) * sigmoid(rho)


class BayesDense(_BayesMixin, Dense):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, sigma0: float = 0.05):
        Layer.__init__(self)
        self._init_bayes((n_in, n_out), (n_out,), 1.0 / math.sqrt(n_in), sigma0, rng)


class BayesConv2D(_BayesMixin, Conv2D):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, sigma0: float = 0.05):
        Layer.__init__(self)
        self.k = k
        fan_in = c_in * k * k
        self._init_bayes((fan_in, c_out), (c_out,), 1.0 / math.sqrt(fan_in), sigma0, rng)


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
