"""Small dense-network core with hand-written reverse mode.

Every :class:`Net` keeps its parameters in one flat float64 vector so the
optimizers can update a whole network with a handful of vectorized numpy
calls. Layers hold views into that vector.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numba
import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


@dataclass
class ParamVector:
    """Flat parameter (or gradient) storage plus a table of named blocks."""

    values: np.ndarray
    shape_table: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    def __post_init__(self):
        total = sum(int(np.prod(dims)) for _, dims in self.shape_table)
        if total != self.values.size:
            raise ShapeError(f"shape table covers {total} values, vector has {self.values.size}")

    def offsets(self):
        start = 0
        for name, dims in self.shape_table:
            size = int(np.prod(dims))
            yield name, dims, start, start + size
            start += size

    def block(self, name: str) -> np.ndarray:
        for block_name, dims, lo, hi in self.offsets():
            if block_name == name:
                return self.values[lo:hi].reshape(dims)
        raise KeyError(name)

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: self.values[lo:hi].reshape(dims) for name, dims, lo, hi in self.offsets()}

    def zeros_like(self) -> ParamVector:
        return ParamVector(np.zeros_like(self.values), list(self.shape_table))

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), list(self.shape_table))

    def same_layout(self, other: ParamVector) -> bool:
        return self.shape_table == other.shape_table


# ---------------------------------------------------------------------------
# layers


class Affine:
    kind = "affine"

    def __init__(self, n_in: int, n_out: int):
        self.n_in = n_in
        self.n_out = n_out
        self.W = None
        self.b = None

    def param_shapes(self):
        return [("W", (self.n_out, self.n_in)), ("b", (self.n_out,))]

    def bind(self, W, b):
        self.W, self.b = W, b

    def forward(self, x):
        self._x = x
        if x.ndim == 1:
            nz = np.flatnonzero(x)
            if 4 * nz.size < x.size:
                return self.W[:, nz] @ x[nz] + self.b
            return self.W @ x + self.b
        return x @ self.W.T + self.b

    def backward(self, up, grads, need_input_grad=True):
        gW, gb = grads
        x = self._x
        if up.ndim == 1:
            nz = np.flatnonzero(x)
            if 4 * nz.size < x.size:
                # one-hot style inputs: only a few columns are touched
                gW.fill(0.0)
                gW[:, nz] = np.outer(up, x[nz])
            else:
                np.outer(up, x, out=gW)
            gb[...] = up
        else:
            np.dot(up.T, x, out=gW)
            gb[...] = up.sum(axis=0)
        return up @ self.W if need_input_grad else None


class Relu:
    kind = "relu"

    def param_shapes(self):
        return []

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, up, grads, need_input_grad=True):
        return up * self._mask


class Tanh:
    kind = "tanh"

    def param_shapes(self):
        return []

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, up, grads, need_input_grad=True):
        return up * (1.0 - self._y**2)


class Softmax:
    kind = "softmax"

    def param_shapes(self):
        return []

    def forward(self, x):
        self._y = softmax(x)
        return self._y

    def backward(self, up, grads, need_input_grad=True):
        y = self._y
        return y * (up - np.sum(up * y, axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


_LAYERS = {"affine": Affine, "relu": Relu, "tanh": Tanh, "softmax": Softmax}


def glorot_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


class Net:
    """Sequential stack of layers.

    ``layers`` is a list such as ``[("affine", 4, 8), ("relu",), ("affine", 8, 2)]``.
    ``forward`` records what ``backward`` needs; ``backward`` always refers to
    the most recent ``forward`` call.
    """

    def __init__(self, layers, seed: int | np.random.Generator | None = 0):
        self.spec = [tuple(layer) for layer in layers]
        self.layers = []
        for i, entry in enumerate(self.spec):
            kind, *args = entry
            if kind not in _LAYERS:
                raise ValueError(f"unknown layer kind {kind!r}")
            if kind == "softmax" and i != len(self.spec) - 1:
                raise ShapeError("softmax is only allowed as the final layer")
            self.layers.append(_LAYERS[kind](*args))

        dims = [layer for layer in self.layers if isinstance(layer, Affine)]
        for a, b in itertools.pairwise(dims):
            if a.n_out != b.n_in:
                raise ShapeError(f"affine {a.n_in}->{a.n_out} cannot feed {b.n_in}->{b.n_out}")
        self.n_in = dims[0].n_in if dims else None
        self.n_out = dims[-1].n_out if dims else None

        table = []
        for i, layer in enumerate(self.layers):
            for name, shape in layer.param_shapes():
                table.append((f"{i}.{name}", shape))
        n_params = sum(int(np.prod(s)) for _, s in table)
        self.params = ParamVector(np.zeros(n_params, dtype=DTYPE), table)
        self.grad = self.params.zeros_like()
        self._bind()
        self.reset_parameters(seed)

    def _bind(self):
        pblocks = self.params.blocks()
        gblocks = self.grad.blocks()
        self._grad_views = []
        for i, layer in enumerate(self.layers):
            names = [f"{i}.{n}" for n, _ in layer.param_shapes()]
            if names:
                layer.bind(*(pblocks[n] for n in names))
            self._grad_views.append([gblocks[n] for n in names])

    def reset_parameters(self, seed):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        for layer in self.layers:
            if isinstance(layer, Affine):
                layer.W[...] = glorot_uniform(rng, layer.n_out, layer.n_in)
                layer.b[...] = 0.0

    @property
    def n_params(self) -> int:
        return self.params.values.size

    def set_values(self, values: np.ndarray):
        if values.shape != self.params.values.shape:
            raise ShapeError("parameter vector size mismatch")
        self.params.values[...] = values

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        if self.n_in is not None and x.shape[-1] != self.n_in:
            raise ShapeError(f"expected input of size {self.n_in}, got {x.shape[-1]}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input")
        for layer in self.layers:
            x = layer.forward(x)
        self._out_shape = x.shape
        return x

    __call__ = forward

    def backward(self, upstream: np.ndarray, need_input_grad: bool = True):
        """Gradient of ``upstream . output`` w.r.t. parameters and input.

        Returns ``(grad, input_grad)``. ``grad`` is the net's own gradient
        buffer and is overwritten by the next call; copy it to keep it.
        Batched inputs sum their contributions.
        """
        up = np.asarray(upstream, dtype=DTYPE)
        if up.shape != self._out_shape:
            raise ShapeError(f"upstream shape {up.shape} does not match output {self._out_shape}")
        last = len(self.layers) - 1
        for i, layer, views in zip(range(last, -1, -1), reversed(self.layers), reversed(self._grad_views)):
            up = layer.backward(up, views, need_input_grad or i > 0)
        return self.grad, up

    def clone(self) -> Net:
        other = Net(self.spec, seed=0)
        other.params.values[...] = self.params.values
        return other


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamVector) -> AdamState:
        return cls(np.zeros_like(params.values), np.zeros_like(params.values))

    def copy(self) -> AdamState:
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def _check_step(params: ParamVector, grad: ParamVector, lr: float):
    if not params.same_layout(grad):
        raise ShapeError("parameter and gradient layouts differ")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    # nan/inf anywhere makes the sum non-finite
    if not np.isfinite(grad.values.sum()):
        raise FloatingPointError("non-finite gradient")


# Moments below this are flushed to zero. Coordinates that see no gradient
# for a long time (one-hot inputs) would otherwise decay into subnormal
# floats, which are very slow to compute with; the effect on the step is
# below 1e-190.
ADAM_TINY = 1e-200


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, c1, c2):
    # bias corrections folded into two scalars; numpy error model lets the loop vectorize
    a = lr / c1
    b = 1.0 / math.sqrt(c2)
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        mi = mi if abs(mi) > ADAM_TINY else 0.0
        vi = vi if vi > ADAM_TINY else 0.0
        m[i] = mi
        v[i] = vi
        p[i] -= a * mi / (math.sqrt(vi) * b + eps)


def adam_step(params: ParamVector, grad: ParamVector, state: AdamState, lr: float):
    """One bias-corrected Adam update, applied in place."""
    _check_step(params, grad, lr)
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    _adam_kernel(params.values, grad.values, state.m, state.v, lr, state.beta1, state.beta2, state.eps, c1, c2)
    return params, state


def sgd_step(params: ParamVector, grad: ParamVector, state, lr: float):
    _check_step(params, grad, lr)
    params.values -= lr * grad.values
    return params, state


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradReport:
    errors: dict[str, float]
    tolerance: float
    kinks: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    net: Net,
    loss_fn,
    x: np.ndarray,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_per_block: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare ``net.backward`` against central differences.

    ``loss_fn(output) -> (loss, dloss/doutput)``. Each parameter block (and the
    input, as block ``"input"``) is checked; ``max_per_block`` samples that many
    coordinates per block instead of sweeping all of them.

    Coordinates whose one-sided slopes disagree sit on a relu kink within
    ``h`` (e.g. a pre-activation that is exactly zero); no derivative exists
    there, so they are skipped and counted in ``kinks``.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=DTYPE)

    def loss_at():
        return loss_fn(net.forward(x))[0]

    out = net.forward(x)
    base, dout = loss_fn(out)
    pgrad, xgrad = net.backward(dout)
    pgrad = pgrad.copy()
    xgrad = np.array(xgrad).reshape(-1)
    kinks = 0

    def check(vec, analytic, idx):
        nonlocal kinks
        numeric, keep = np.empty(idx.size), np.ones(idx.size, dtype=bool)
        for j, i in enumerate(idx):
            old = vec[i]
            vec[i] = old + h
            up = loss_at()
            vec[i] = old - h
            down = loss_at()
            vec[i] = old
            numeric[j] = (up - down) / (2 * h)
            right, left = (up - base) / h, (base - down) / h
            if abs(right - left) > 1e-3 + 1e-2 * max(abs(right), abs(left)):
                keep[j] = False
                kinks += 1
        return float(relative_error(analytic[idx][keep], numeric[keep]).max(initial=0.0))

    def pick(lo, hi):
        idx = np.arange(lo, hi)
        if max_per_block is not None and idx.size > max_per_block:
            idx = rng.choice(idx, size=max_per_block, replace=False)
        return idx

    errors = {}
    for name, _, lo, hi in net.params.offsets():
        errors[name] = check(net.params.values, pgrad.values, pick(lo, hi))
    flat = x.reshape(-1)
    if flat.size:
        errors["input"] = check(flat, xgrad, pick(0, flat.size))
    return GradReport(errors, tolerance, kinks)
