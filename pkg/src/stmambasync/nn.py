"""Parameters, initialisers, dense layers and the finite-difference gradient checker."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; passing a Generator returns it unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def split_rng(seed, n: int) -> list[np.random.Generator]:
    """Return ``n`` statistically independent child generators of ``seed``."""
    if isinstance(seed, np.random.Generator):
        children = seed.bit_generator.seed_seq.spawn(n)
    else:
        children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


class Parameter(Tensor):
    """A learnable tensor with a gradient buffer of the same shape."""

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name or '?'}, shape={self.shape})"


def xavier_uniform_init(shape, seed) -> np.ndarray:
    """Glorot/Xavier uniform draw.

    fan-in is the first axis and fan-out the last; a vector is treated as a
    ``(1, n)`` matrix. Shapes with a zero-length axis (e.g. a disabled
    adaptive embedding) give an empty array.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 0 for s in shape):
        raise ValueError(f"invalid shape for xavier init: {shape}")
    if 0 in shape:
        return np.zeros(shape)
    fan_in, fan_out = (1, shape[0]) if len(shape) == 1 else (shape[0], shape[-1])
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return make_rng(seed).uniform(-bound, bound, size=shape)


class LinearMap:
    """Affine map on the last axis: ``x @ weight + bias``."""

    def __init__(self, n_in: int, n_out: int, rng, bias: bool = True, name: str = ""):
        self.weight = Parameter(xavier_uniform_init((n_in, n_out), rng), f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), f"{name}.bias") if bias else None

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x: Tensor) -> Tensor:
        x = T.ensure_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"LinearMap expects last axis {self.n_in}, got {x.shape}")
        lead = x.shape[:-1]
        out = x.reshape(-1, self.n_in) @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(*lead, self.n_out)


class NormParams:
    """Scale/shift pair of a layer normalisation."""

    def __init__(self, width: int, name: str = ""):
        self.gamma = Parameter(np.ones(width), f"{name}.gamma")
        self.beta = Parameter(np.zeros(width), f"{name}.beta")

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def __call__(self, y: Tensor, eps: float = 1e-5) -> Tensor:
        return T.layer_norm(y, self.gamma, self.beta, eps)


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    return T.softmax(T.ensure_tensor(a), axis=-1)


def layer_norm(y, gamma, beta, eps: float = 1e-5) -> Tensor:
    return T.layer_norm(y, gamma, beta, eps)


def grad_check(f: Callable[..., Tensor], point, h: float = 1e-5,
               coords: int | None = None, seed: int = 0) -> float:
    """Largest relative gap between reverse-mode and central-difference gradients.

    ``point`` is a tensor or a sequence of tensors (e.g. model parameters),
    which ``f`` reads; ``f`` is called with no arguments when ``point`` is a
    sequence and with the tensor otherwise. Entries are perturbed in place and
    restored. ``coords`` limits the check to a random subset of entries.
    """
    single = isinstance(point, Tensor)
    leaves: Sequence[Tensor] = [point] if single else list(point)
    call = (lambda: f(point)) if single else f

    for leaf in leaves:
        leaf.data = np.ascontiguousarray(leaf.data)
        leaf.requires_grad = True
        leaf.grad = None
    out = call()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(l.data) if l.grad is None else np.array(l.grad) for l in leaves]

    index = [(li, j) for li, l in enumerate(leaves) for j in range(l.size)]
    if coords is not None and coords < len(index):
        pick = make_rng(seed).choice(len(index), size=coords, replace=False)
        index = [index[i] for i in sorted(pick)]

    worst = 0.0
    with T.no_grad():
        for li, j in index:
            flat = leaves[li].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = float(call().data)
            flat[j] = orig - h
            fm = float(call().data)
            flat[j] = orig
            numeric = (fp - fm) / (2 * h)
            a = analytic[li].reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    for leaf, g in zip(leaves, analytic):
        leaf.grad = np.zeros_like(leaf.data) if isinstance(leaf, Parameter) else None
    return worst
