"""ST-mixer reshape and the selective state-space (Mamba) layer.

Two routes compute the same recurrence:

* :func:`discretize` / :func:`selective_scan` are plain numpy, one step at a
  time, with channels on the first axis (``d_inner x T``). They are the
  reference used by the duality checks.
* :func:`scan_op` is the differentiable version used inside the model. It
  works time-major (``... x T x d_inner``), discretizes all steps at once and
  has a hand-written backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from . import tensor as T
from .nn import LinearMap, NormParams, Parameter, split_rng
from .tensor import Tensor

SMALL_STEP = 1e-8


@dataclass(frozen=True)
class MambaConfig:
    d_h: int
    expand: int = 2
    d_state: int = 16

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_h


@dataclass
class SsmStep:
    """Discretized quantities of one scan step."""

    A_bar: np.ndarray  # d_inner x d_state
    B_bar: np.ndarray  # d_inner x d_state
    C_k: np.ndarray  # d_state
    delta_k: np.ndarray  # d_inner


def hippo_init(d_inner: int, d_state: int) -> np.ndarray:
    """Real diagonal HiPPO-style spectrum, ``A[i, j] = -(j + 1)`` for every channel."""
    if d_inner <= 0 or d_state <= 0:
        raise ValueError("d_inner and d_state must be positive")
    return -np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))


def zoh_gain(delta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``(exp(delta*A) - 1) / A``, falling back to ``delta`` when ``|delta*A|`` is tiny."""
    dA = delta * A
    small = np.abs(dA) < SMALL_STEP
    safe_A = np.where(small, 1.0, A)
    return np.where(small, delta * np.ones_like(A), np.expm1(dA) / safe_A)


def discretize(A: np.ndarray, B_k: np.ndarray, delta_k: np.ndarray,
               C_k: np.ndarray | None = None) -> SsmStep:
    """Zero-order-hold discretization of a diagonal ``A`` for one step."""
    A = np.asarray(A, dtype=np.float64)
    B_k = np.asarray(B_k, dtype=np.float64)
    delta_k = np.asarray(delta_k, dtype=np.float64)
    if np.any(delta_k <= 0):
        raise ValueError("step size delta must be strictly positive")
    d = delta_k[:, None]
    A_bar = np.exp(d * A)
    B_bar = zoh_gain(d, A) * B_k[None, :]
    if C_k is None:
        C_k = np.zeros(A.shape[1])
    return SsmStep(A_bar, B_bar, np.asarray(C_k, dtype=np.float64), delta_k)


def selective_scan(steps, U: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Run ``H_k = A_bar_k * H_{k-1} + B_bar_k * U_k`` from ``H_0 = 0``.

    ``U`` is ``d_inner x T``; returns ``Y`` of the same shape with
    ``Y_k = sum_state(C_k * H_k) + D * U_k``.
    """
    U = np.asarray(U, dtype=np.float64)
    d_inner, n = U.shape
    steps = list(steps)
    if len(steps) != n:
        raise ValueError(f"{len(steps)} steps for {n} inputs")
    H = np.zeros_like(steps[0].A_bar) if n else None
    Y = np.empty_like(U)
    for k, st in enumerate(steps):
        H = st.A_bar * H + st.B_bar * U[:, k][:, None]
        Y[:, k] = H @ st.C_k + D * U[:, k]
    return Y


def build_steps(A, B, C, delta) -> list[SsmStep]:
    """Discretize every column of ``B`` (d_state x T), ``C`` and ``delta`` (d_inner x T)."""
    return [discretize(A, B[:, k], delta[:, k], C[:, k]) for k in range(B.shape[1])]


@numba.njit(cache=True, inline="always")
def _gain(d, a, dA, e):
    """ZOH gain ``(e - 1) / a`` and its partials wrt ``a`` and ``d``."""
    if abs(dA) < SMALL_STEP:
        return d, 0.5 * d * d, 1.0
    if abs(dA) < 1e-3:
        # fourth-order series: avoids cancellation in e - 1
        g = d * (1.0 + dA * (0.5 + dA * (1.0 / 6.0 + dA / 24.0)))
        return g, d * d * (0.5 + dA * (1.0 / 3.0 + dA / 8.0)), e
    g = (e - 1.0) / a
    return g, (dA * e - g * a) / (a * a), e


@numba.njit(cache=True)
def _scan_fwd_kernel(dl, a, b, c, u, E, H, out):
    nb, n, di, ds = E.shape
    for s in range(nb):
        for k in range(n):
            for i in range(di):
                d = dl[s, k, i]
                acc = 0.0
                for j in range(ds):
                    e = E[s, k, i, j]
                    g, _, _ = _gain(d, a[i, j], d * a[i, j], e)
                    h_prev = H[s, k - 1, i, j] if k > 0 else 0.0
                    h = e * h_prev + g * b[s, k, j] * u[s, k, i]
                    H[s, k, i, j] = h
                    acc += c[s, k, j] * h
                out[s, k, i] = acc


@numba.njit(cache=True)
def _scan_bwd_kernel(dl, a, b, c, u, E, H, gy, gdl, ga, gb, gc, gu):
    nb, n, di, ds = E.shape
    carry = np.zeros((di, ds))
    for s in range(nb):
        carry[:, :] = 0.0
        for k in range(n - 1, -1, -1):
            for i in range(di):
                d = dl[s, k, i]
                uk = u[s, k, i]
                gyk = gy[s, k, i]
                acc_u = 0.0
                acc_dl = 0.0
                for j in range(ds):
                    e = E[s, k, i, j]
                    aij = a[i, j]
                    gain, dgain_da, dgain_dd = _gain(d, aij, d * aij, e)
                    G = gyk * c[s, k, j] + carry[i, j]
                    gc[s, k, j] += gyk * H[s, k, i, j]
                    gA_bar = G * H[s, k - 1, i, j] if k > 0 else 0.0
                    bkj = b[s, k, j]
                    acc_u += G * gain * bkj
                    gB_bar = G * uk
                    ggain = gB_bar * bkj
                    gb[s, k, j] += gB_bar * gain
                    acc_dl += gA_bar * e * aij + ggain * dgain_dd
                    ga[i, j] += gA_bar * e * d + ggain * dgain_da
                    carry[i, j] = G * e
                gu[s, k, i] += acc_u
                gdl[s, k, i] += acc_dl


def _scan_numba(dl, a, b, c, u):
    lead = dl.shape[:-2]
    n, di = dl.shape[-2:]
    flat = lambda x: np.ascontiguousarray(x.reshape(-1, n, x.shape[-1]), dtype=np.float64)
    dl3, b3, c3, u3 = flat(dl), flat(b), flat(c), flat(u)
    a2 = np.ascontiguousarray(a, dtype=np.float64)
    E = np.exp(dl3[..., None] * a2)
    H = np.empty_like(E)
    out = np.empty_like(dl3)
    _scan_fwd_kernel(dl3, a2, b3, c3, u3, E, H, out)

    def bw(g):
        g3 = np.ascontiguousarray(g.reshape(dl3.shape), dtype=np.float64)
        gdl, gb, gc, gu = (np.zeros_like(x) for x in (dl3, b3, c3, u3))
        ga = np.zeros_like(a2)
        _scan_bwd_kernel(dl3, a2, b3, c3, u3, E, H, g3, gdl, ga, gb, gc, gu)
        return (gdl.reshape(dl.shape), ga, gb.reshape(b.shape), gc.reshape(c.shape),
                gu.reshape(u.shape))

    return out.reshape(*lead, n, di), bw


def _scan_numpy(dl, a, b, c, u):
    dA = dl[..., None] * a
    A_bar = np.exp(dA)
    small = np.abs(dA) < SMALL_STEP
    safe_a = np.where(small, 1.0, a)
    gain = np.where(small, dl[..., None] * np.ones_like(a), np.expm1(dA) / safe_a)
    B_bar = gain * b[..., None, :]
    Bu = B_bar * u[..., None]

    n = dl.shape[-2]
    H = np.empty_like(A_bar)
    h = np.zeros_like(A_bar[..., 0, :, :])
    for k in range(n):
        h = A_bar[..., k, :, :] * h + Bu[..., k, :, :]
        H[..., k, :, :] = h
    out = np.einsum("...kis,...ks->...ki", H, c)

    def bw(g):
        G = np.empty_like(H)
        carry = np.zeros_like(h)
        for k in range(n - 1, -1, -1):
            carry = g[..., k, :, None] * c[..., k, None, :] + carry
            G[..., k, :, :] = carry
            carry = carry * A_bar[..., k, :, :]
        H_prev = np.concatenate([np.zeros_like(H[..., :1, :, :]), H[..., :-1, :, :]], axis=-3)
        gA_bar = G * H_prev
        gB_bar = G * u[..., None]
        gu = np.einsum("...kis,...kis->...ki", G, B_bar)
        gc = np.einsum("...ki,...kis->...ks", g, H)
        ggain = gB_bar * b[..., None, :]
        gb = np.einsum("...kis,...kis->...ks", gB_bar, gain)
        # small-step limit of d gain / d a is delta^2 / 2
        dgain_da = np.where(small, 0.5 * dl[..., None] ** 2,
                            (dA * A_bar - np.expm1(dA)) / (safe_a * safe_a))
        dgain_ddl = np.where(small, 1.0, A_bar)
        gdl = (gA_bar * A_bar * a + ggain * dgain_ddl).sum(axis=-1)
        ga_full = gA_bar * A_bar * dl[..., None] + ggain * dgain_da
        ga = ga_full.reshape(-1, *a.shape).sum(axis=0)
        return gdl, ga, gb, gc, gu

    return out, bw


def scan_op(delta: Tensor, A: Tensor, B: Tensor, C: Tensor, U: Tensor,
            backend: str = "numba") -> Tensor:
    """Differentiable discretize-and-scan, without the ``D`` skip term.

    Shapes: ``delta`` and ``U`` are ``(..., T, d_inner)``, ``B`` and ``C`` are
    ``(..., T, d_state)``, ``A`` is ``(d_inner, d_state)``. Returns
    ``(..., T, d_inner)``. ``backend="numpy"`` selects the vectorised
    implementation, kept as a cross-check of the compiled kernels.
    """
    impl = _scan_numba if backend == "numba" else _scan_numpy
    out, bw = impl(delta.data, A.data, B.data, C.data, U.data)
    return T._make(out, (delta, A, B, C, U), bw)


class MambaParams:
    """Learnable weights of one selective-SSM block."""

    def __init__(self, cfg: MambaConfig, rng, name: str = "mamba"):
        r = split_rng(rng, 6)
        self.cfg = cfg
        di, ds = cfg.d_inner, cfg.d_state
        self.in_norm = NormParams(cfg.d_h, f"{name}.in_norm")
        self.in_proj = LinearMap(cfg.d_h, di, r[0], name=f"{name}.in_proj")
        self.A_log = Parameter(np.log(-hippo_init(di, ds)), f"{name}.A_log")
        self.proj_B = LinearMap(di, ds, r[1], bias=False, name=f"{name}.proj_B")
        self.proj_C = LinearMap(di, ds, r[2], bias=False, name=f"{name}.proj_C")
        self.proj_delta = LinearMap(di, di, r[3], bias=False, name=f"{name}.proj_delta")
        # step sizes start log-uniform in [1e-3, 1e-1]; bias is their inverse softplus
        dt = np.exp(r[4].uniform(np.log(1e-3), np.log(1e-1), size=di))
        self.delta_bias = Parameter(dt + np.log(-np.expm1(-dt)), f"{name}.delta_bias")
        self.D = Parameter(np.ones(di), f"{name}.D")
        self.out_proj = LinearMap(di, cfg.d_h, r[5], name=f"{name}.out_proj")
        self.norm = NormParams(cfg.d_h, f"{name}.norm")

    def parameters(self) -> list[Parameter]:
        return [*self.in_norm.parameters(), *self.in_proj.parameters(), self.A_log,
                *self.proj_B.parameters(), *self.proj_C.parameters(),
                *self.proj_delta.parameters(), self.delta_bias, self.D,
                *self.out_proj.parameters(), *self.norm.parameters()]

    @property
    def A(self) -> Tensor:
        return -T.exp(self.A_log)


def st_mix(z: Tensor) -> Tensor:
    """``(..., T, N, d_h)`` to ``(..., T*N, d_h)``; row ``t*N + n`` holds ``z[t, n]``."""
    z = T.ensure_tensor(z)
    *lead, t, n, d = z.shape
    return z.reshape(*lead, t * n, d)


def st_unmix(x: Tensor, n_nodes: int) -> Tensor:
    x = T.ensure_tensor(x)
    *lead, tn, d = x.shape
    if tn % n_nodes:
        raise ValueError(f"sequence length {tn} not divisible by {n_nodes} nodes")
    return x.reshape(*lead, tn // n_nodes, n_nodes, d)


def ssm_project(h_in: Tensor, p: MambaParams):
    """Time-major ``U, B, C, delta`` for a layer-normed ``(..., T, d_h)`` input."""
    U = p.in_proj(h_in)
    B = p.proj_B(U)
    C = p.proj_C(U)
    delta = T.softplus(p.proj_delta(U) + p.delta_bias)
    return U, B, C, delta


def ssm_path(x_bar: Tensor, p: MambaParams, *, normalize: bool = True) -> Tensor:
    """Transform branch of the block: everything except the identity residual."""
    h = p.in_norm(T.ensure_tensor(x_bar))
    U, B, C, delta = ssm_project(h, p)
    y = scan_op(delta, p.A, B, C, U) + U * p.D
    y = p.out_proj(y)
    return p.norm(y) if normalize else y


def mamba_block(x_bar: Tensor, p: MambaParams) -> Tensor:
    """``norm(out_proj(scan(project(LN(x))))) + x`` over a ``(..., T, d_h)`` sequence."""
    x_bar = T.ensure_tensor(x_bar)
    return ssm_path(x_bar, p) + x_bar
