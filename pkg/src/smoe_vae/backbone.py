"""Numeric layers with hand-derived backward rules, Adam, and a gradient checker.

Tensors are plain ``numpy.ndarray`` values in row-major order. Layers cache
what their backward rule needs during ``forward`` and accumulate into
``Param.grad`` during ``backward``. Precision follows the parameter dtype:
float32 for training, float64 for gradient verification.

Random numbers come from ``numpy.random.Generator`` backed by PCG64, seeded
explicitly everywhere; sub-streams are derived with ``spawn_rng``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class StateError(RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class DeterminismError(RuntimeError):
    """A loss function returned different values for identical inputs."""


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent generators from ``rng`` (advances ``rng``)."""
    seeds = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
    return [make_rng(int(s)) for s in seeds]


@dataclass(eq=False)
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0


KAIMING_SLOPE = np.sqrt(5.0)


def kaiming_uniform(rng, shape, fan_in, dtype, a=KAIMING_SLOPE):
    """Fan-in Kaiming-uniform with leaky-ReLU slope ``a``: bound sqrt(6 / ((1 + a^2) fan_in)).

    The default ``a = sqrt(5)`` gives bound 1/sqrt(fan_in), which keeps an
    untrained gate close to uniform; ``a = 0`` is the plain ReLU variant.
    """
    bound = np.sqrt(6.0 / ((1.0 + a * a) * fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# functional ops

def _require(cond, msg):
    if not cond:
        raise DimensionError(msg)


def dense_forward(x, w, b):
    _require(x.ndim == 2, f"x must be N x in, got shape {x.shape}")
    _require(w.ndim == 2 and w.shape[1] == x.shape[1],
             f"w shape {w.shape} does not match x width {x.shape[1]}")
    _require(b.shape == (w.shape[0],), f"b shape {b.shape} does not match w rows {w.shape[0]}")
    return x @ w.T + b


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    return expit(x)


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _out_extent(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _windows(xp, k, stride, oh, ow):
    # N,C,Hp,Wp -> view N,OH,OW,C,k,k
    n, c = xp.shape[:2]
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(n, oh, ow, c, k, k),
        strides=(s[0], s[2] * stride, s[3] * stride, s[1], s[2], s[3]),
        writeable=False)


def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    oh, ow = _out_extent(h, k, stride, pad), _out_extent(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x)
    cols = _windows(xp, k, stride, oh, ow).reshape(n * oh * ow, c * k * k)
    return cols, oh, ow


def _col2im(dcols, x_shape, stride, pad):
    # adjoint of _im2col; dcols is tap-major (k, k, C, N, OH, OW), contiguous per tap
    n, c, h, w = x_shape
    k, oh, ow = dcols.shape[0], dcols.shape[4], dcols.shape[5]
    xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[i, j]
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3))


def _check_conv(x, kernel):
    _require(x.ndim == 4, f"x must be N x C x H x W, got shape {x.shape}")
    _require(kernel.ndim == 4 and kernel.shape[2] == kernel.shape[3], f"kernel must be O x C x k x k, got {kernel.shape}")


def _conv2d(x, kernel, bias, stride, padding):
    o, _, k, _ = kernel.shape
    cols, oh, ow = _im2col(x, k, stride, padding)
    out = cols @ kernel.reshape(o, -1).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(x.shape[0], oh, ow, o).transpose(0, 3, 1, 2)), cols


def conv2d_forward(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``kernel`` (O,C,k,k)."""
    _check_conv(x, kernel)
    _require(kernel.shape[1] == x.shape[1],
             f"kernel expects {kernel.shape[1]} input channels, x has {x.shape[1]}")
    k = kernel.shape[2]
    _require(x.shape[2] + 2 * padding >= k and x.shape[3] + 2 * padding >= k,
             f"input {x.shape[2:]} smaller than kernel {k} after padding {padding}")
    return _conv2d(x, kernel, bias, stride, padding)[0]


def _conv2d_input_grad(dout, kernel, x_shape, stride, padding):
    n, o, oh, ow = dout.shape
    c, k = kernel.shape[1], kernel.shape[2]
    w_taps = kernel.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    d_t = dout.transpose(1, 0, 2, 3).reshape(o, n * oh * ow)
    dcols = (w_taps @ d_t).reshape(k, k, c, n, oh, ow)
    return _col2im(dcols, x_shape, stride, padding)


def _conv2d_kernel_grad(dout, cols, kernel_shape):
    o = dout.shape[1]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    return (d2.T @ cols).reshape(kernel_shape)


def conv_transpose2d_forward(x, kernel, bias, stride=1, padding=0):
    """Transposed convolution of ``x`` (N,Cin,H,W) with ``kernel`` (Cin,Cout,k,k).

    Output extent is ``(H - 1) * stride - 2 * padding + k``.
    """
    _check_conv(x, kernel)
    _require(kernel.shape[0] == x.shape[1],
             f"kernel expects {kernel.shape[0]} input channels, x has {x.shape[1]}")
    n, _, h, w = x.shape
    cout, k = kernel.shape[1], kernel.shape[2]
    oh, ow = (h - 1) * stride - 2 * padding + k, (w - 1) * stride - 2 * padding + k
    out = _conv2d_input_grad(x, kernel, (n, cout, oh, ow), stride, padding)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# layers

class Layer:
    params: list[Param] = []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _cached(self):
        if getattr(self, "_cache", None) is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache


class Dense(Layer):
    def __init__(self, name, n_in, n_out, rng, dtype=np.float32):
        self.weight = Param(f"{name}.weight", kaiming_uniform(rng, (n_out, n_in), n_in, dtype))
        self.bias = Param(f"{name}.bias", np.zeros(n_out, dtype=dtype))
        self.params = [self.weight, self.bias]
        self._cache = None

    def forward(self, x):
        self._cache = x
        return dense_forward(x, self.weight.value, self.bias.value)

    def backward(self, dout):
        x = self._cached()
        self.weight.grad += dout.T @ x
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.value


class Conv2d(Layer):
    def __init__(self, name, c_in, c_out, k, stride, padding, rng, dtype=np.float32, input_grad=True):
        self.stride, self.padding = stride, padding
        self.input_grad = input_grad
        self.weight = Param(f"{name}.weight", kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        self.bias = Param(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self.params = [self.weight, self.bias]
        self._cache = None

    def forward(self, x):
        conv2d_forward(x[:1], self.weight.value, self.bias.value, self.stride, self.padding)  # shape checks
        out, cols = _conv2d(x, self.weight.value, self.bias.value, self.stride, self.padding)
        self._cache = (x.shape, cols)
        return out

    def backward(self, dout):
        x_shape, cols = self._cached()
        self.weight.grad += _conv2d_kernel_grad(dout, cols, self.weight.value.shape)
        self.bias.grad += dout.sum(axis=(0, 2, 3))
        if not self.input_grad:
            return None
        return _conv2d_input_grad(dout, self.weight.value, x_shape, self.stride, self.padding)


class ConvTranspose2d(Layer):
    def __init__(self, name, c_in, c_out, k, stride, padding, rng, dtype=np.float32):
        self.stride, self.padding = stride, padding
        # each output pixel sees about c_in * (k / stride)^2 inputs
        fan_in = c_in * k * k / (stride * stride)
        self.weight = Param(f"{name}.weight", kaiming_uniform(rng, (c_in, c_out, k, k), fan_in, dtype))
        self.bias = Param(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self.params = [self.weight, self.bias]
        self._cache = None

    def forward(self, x):
        self._cache = x
        return conv_transpose2d_forward(x, self.weight.value, self.bias.value, self.stride, self.padding)

    def backward(self, dout):
        x = self._cached()
        # the forward map is the adjoint of a convolution, so roles swap
        dx, cols = _conv2d(dout, self.weight.value, None, self.stride, self.padding)
        self.weight.grad += _conv2d_kernel_grad(x, cols, self.weight.value.shape)
        self.bias.grad += dout.sum(axis=(0, 2, 3))
        return dx


class ReLU(Layer):
    def __init__(self):
        self.params = []
        self._cache = None

    def forward(self, x):
        self._cache = x > 0
        return np.maximum(x, x.dtype.type(0))  # NaN passes through, so divergence stays visible

    def backward(self, dout):
        return dout * self._cached()


class Sigmoid(Layer):
    def __init__(self):
        self.params = []
        self._cache = None

    def forward(self, x):
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, dout):
        y = self._cached()
        return dout * y * (1 - y)


class Reshape(Layer):
    def __init__(self, shape):
        self.shape = tuple(shape)
        self.params = []
        self._cache = None

    def forward(self, x):
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dout):
        return dout.reshape(self._cached())


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        self.params = [p for layer in self.layers for p in layer.params]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
            if dout is None:
                break
        return dout


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction. Gradients are read, never cleared."""

    def __init__(self, params: Sequence[Param], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self):
        for p in self.params:
            if p.name not in self.m or self.m[p.name].shape != p.value.shape:
                raise StateError(f"no moment estimates for parameter {p.name}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.value -= update.astype(p.value.dtype, copy=False)

    def state_tensors(self):
        for p in self.params:
            yield f"adam.m.{p.name}", self.m[p.name]
            yield f"adam.v.{p.name}", self.v[p.name]


def zero_grads(params: Sequence[Param]):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# verification

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: str
    passed: bool
    n_rescued: int = 0      # coordinates that only agreed at a rescaled step


def grad_check(loss_fn: Callable[[], float], params: Sequence[Param], epsilon=1e-6, tolerance=1e-5,
               n_coords=100, seed=0, reference=None, rescale=()) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` must return the scalar loss and leave d(loss)/d(value) in
    every ``Param.grad`` (it is responsible for zeroing them first).
    ``reference=(ref_loss_fn, ref_params)`` evaluates the finite differences on
    a second, parameter-aligned model instead (typically a float64 copy of a
    float32 model), so the analytic side is judged against a precise oracle.

    ``rescale`` lists step multipliers tried on coordinates that fail at
    ``epsilon``. A ReLU kink within one step of the point corrupts a central
    difference at that step only, and cancellation noise shrinks at larger
    steps; a wrong analytic gradient disagrees at every step. The coordinate's
    error is the smallest over the steps tried.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = list(params)
    f0 = loss_fn()
    f1 = loss_fn()
    if f0 != f1:
        raise DeterminismError(f"loss_fn returned {f0!r} then {f1!r} for identical parameters")
    analytic = [p.grad.astype(np.float64).ravel().copy() for p in params]

    num_fn, num_params = (loss_fn, params) if reference is None else (reference[0], list(reference[1]))
    if len(num_params) != len(params):
        raise DimensionError("reference parameters do not align with checked parameters")

    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    rng = make_rng(seed)
    flat = np.arange(total) if total <= n_coords else rng.choice(total, size=n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def central(target, j, eps):
        old = target[j]
        target[j] = old + eps
        fp = num_fn()
        target[j] = old - eps
        fm = num_fn()
        target[j] = old
        return (fp - fm) / (2 * eps)

    worst, worst_name, rescued = 0.0, "", 0
    for idx in np.sort(flat):
        pi = int(np.searchsorted(offsets, idx, side="right") - 1)
        j = int(idx - offsets[pi])
        target = num_params[pi].value.reshape(-1)
        a = analytic[pi][j]
        rel = _rel_error(a, central(target, j, epsilon))
        if rel >= tolerance and rescale:
            best = min(_rel_error(a, central(target, j, epsilon * k)) for k in rescale)
            if best < tolerance:
                rescued += 1
            rel = min(rel, best)
        if rel > worst:
            worst, worst_name = rel, f"{params[pi].name}[{j}]"
    # leave grads as the caller computed them
    loss_fn()
    return GradCheckReport(float(worst), len(flat), worst_name, bool(worst < tolerance), rescued)


def _rel_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)
