"""Numerical checks relating least squares, attention and the selective scan.

* Least-squares predictions are a weighted sum of the targets, with weights
  given by the hat matrix ``X (X^T X)^-1 X^T``.
* The selective scan is a causal weighted sum of its inputs: materialising
  ``W_eff[k, m] = sum_state C_k * prod(A_bar_{m+1..k}) * B_bar_m`` reproduces the
  scan output exactly, plus the ``D * U`` skip path.
* The Mamba block is identity + transform branch.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .mamba import MambaConfig, MambaParams, build_steps, discretize, mamba_block, selective_scan, ssm_path
from .nn import make_rng

MAX_CONDITION = 1e10


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass
class HatSystem:
    X: np.ndarray  # N x d
    y: np.ndarray  # N

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y disagree on the number of rows")


@dataclass
class HatPrediction:
    y_hat: np.ndarray
    weights: np.ndarray  # rows a_i. with a_ij = x_i^T (X^T X)^-1 x_j


def hat_predict(sys: HatSystem, x_new=None) -> HatPrediction:
    """Least-squares predictions written as attention-style weights over ``y``."""
    X = sys.X
    gram = X.T @ X
    if np.linalg.cond(gram) > MAX_CONDITION:
        raise SingularSystemError("X^T X is singular or ill-conditioned")
    proj = np.linalg.solve(gram, X.T)  # (X^T X)^-1 X^T
    rows = X if x_new is None else np.atleast_2d(np.asarray(x_new, dtype=np.float64))
    weights = rows @ proj
    y_hat = weights @ sys.y
    if x_new is not None and np.ndim(x_new) == 1:
        return HatPrediction(y_hat[0], weights[0])
    return HatPrediction(y_hat, weights)


def random_hat_system(rng, N: int, d: int) -> HatSystem:
    rng = make_rng(rng)
    while True:
        X = rng.standard_normal((N, d))
        if np.linalg.cond(X) < 1e3:
            return HatSystem(X, rng.standard_normal(N))


def lemma1_check(seed, N: int = 20, d: int = 5) -> float:
    """Max gap between hat-matrix predictions and a QR least-squares projection."""
    if not (1 <= d <= N):
        raise ValueError("need 1 <= d <= N")
    sys = random_hat_system(seed, N, d)
    Q, _ = np.linalg.qr(sys.X)
    return float(np.max(np.abs(hat_predict(sys).y_hat - Q @ (Q.T @ sys.y))))


def hat_properties(sys: HatSystem) -> dict[str, float]:
    """Deviation from symmetry, idempotency and ``trace == rank``."""
    H = hat_predict(sys).weights
    rank = np.linalg.matrix_rank(sys.X)
    return {"symmetry": float(np.max(np.abs(H - H.T))),
            "idempotency": float(np.max(np.abs(H @ H - H))),
            "trace": float(abs(np.trace(H) - rank))}


@dataclass
class MaterializedAttention:
    W_eff: np.ndarray  # d_inner x T x T, lower triangular in the last two axes
    D: np.ndarray

    def apply(self, U: np.ndarray) -> np.ndarray:
        """``Y = W_eff U + D * U`` for ``U`` of shape ``d_inner x T``."""
        return np.einsum("ikm,im->ik", self.W_eff, U) + self.D[:, None] * U

    def upper_mass(self) -> float:
        return float(np.abs(np.triu(self.W_eff, k=1)).max(initial=0.0))


def materialize_scan_attention(steps, D) -> MaterializedAttention:
    """Explicit causal weight matrix of a discretized scan."""
    steps = list(steps)
    n = len(steps)
    d_inner, d_state = steps[0].A_bar.shape
    W = np.zeros((d_inner, n, n))
    for k in range(n):
        decay = np.ones((d_inner, d_state))
        for m in range(k, -1, -1):
            W[:, k, m] = (decay * steps[m].B_bar) @ steps[k].C_k
            decay = decay * steps[m].A_bar
    return MaterializedAttention(W, np.asarray(D, dtype=np.float64))


def random_scan_instance(rng, n: int, d_inner: int, d_state: int):
    """Random discretized steps, inputs and skip weights (channels-first layout)."""
    rng = make_rng(rng)
    A = -rng.uniform(0.1, 4.0, (d_inner, d_state))
    B = rng.standard_normal((d_state, n))
    C = rng.standard_normal((d_state, n))
    delta = rng.uniform(0.01, 1.0, (d_inner, n))
    U = rng.standard_normal((d_inner, n))
    D = rng.standard_normal(d_inner)
    return build_steps(A, B, C, delta), U, D


def scan_attention_gap(steps, U, D) -> float:
    att = materialize_scan_attention(steps, D)
    return float(np.max(np.abs(att.apply(U) - selective_scan(steps, U, D))))


def residual_decomposition_check(p: MambaParams, x, alpha: float = 2.5) -> dict[str, float]:
    """Split the Mamba block into identity + transform and probe each part.

    Returns the deviations of: block output from ``x + transform(x)``; the
    block with a zeroed output projection from ``x + beta``; and the
    pre-normalisation transform under ``out_proj.weight * alpha`` (bias
    zeroed) from ``alpha`` times the unscaled one.
    """
    x = np.asarray(x, dtype=np.float64)
    with T.no_grad():
        out = mamba_block(x, p).data
        branch = ssm_path(x, p).data
        decomposition = float(np.max(np.abs(out - x - branch)))

        zeroed = copy.deepcopy(p)
        zeroed.out_proj.weight.data[:] = 0.0
        zeroed.out_proj.bias.data[:] = 0.0
        cold = mamba_block(x, zeroed).data - x
        zero_path = float(np.max(np.abs(cold - zeroed.norm.beta.data)))

        base = copy.deepcopy(p)
        base.out_proj.bias.data[:] = 0.0
        scaled = copy.deepcopy(base)
        scaled.out_proj.weight.data *= alpha
        pre = ssm_path(x, base, normalize=False).data
        pre_scaled = ssm_path(x, scaled, normalize=False).data
        scaling = float(np.max(np.abs(pre_scaled - alpha * pre)))
    return {"decomposition": decomposition, "zero_path": zero_path, "scaling": scaling}


@dataclass
class CheckResult:
    name: str
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.deviation) and self.deviation < self.tolerance)


def run_suite(seed: int = 0, instances: int = 100) -> list[CheckResult]:
    """Every duality check, each reduced to a max deviation against its tolerance."""
    rng = make_rng(seed)
    results = []

    lemma = max(lemma1_check(rng, int(rng.integers(5, 21)), int(rng.integers(1, 6)))
                for _ in range(instances))
    results.append(CheckResult("lemma1_hat_vs_qr", lemma, 1e-8))

    props = {"symmetry": 0.0, "idempotency": 0.0, "trace": 0.0}
    for _ in range(instances):
        N = int(rng.integers(5, 21))
        sys = random_hat_system(rng, N, int(rng.integers(1, min(6, N + 1))))
        for k, v in hat_properties(sys).items():
            props[k] = max(props[k], v)
    for k, v in props.items():
        results.append(CheckResult(f"hat_{k}", v, 1e-8))

    mean_case = hat_predict(HatSystem(np.ones((4, 1)), np.array([1.0, 2.0, 3.0, 6.0])))
    results.append(CheckResult("hat_constant_column_is_mean",
                               float(np.max(np.abs(mean_case.y_hat - 3.0))), 1e-12))

    gap, upper = 0.0, 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 33))
        steps, U, D = random_scan_instance(rng, n, int(rng.integers(1, 9)), int(rng.integers(1, 5)))
        gap = max(gap, scan_attention_gap(steps, U, D))
        upper = max(upper, materialize_scan_attention(steps, D).upper_mass())
    results.append(CheckResult("scan_equals_materialized_attention", gap, 1e-8))
    results.append(CheckResult("materialized_attention_is_causal", upper, 1e-12))

    st = discretize(np.array([[-1.0]]), np.array([2.0]), np.array([np.log(2.0)]))
    results.append(CheckResult("zoh_closed_form",
                               max(abs(st.A_bar[0, 0] - 0.5), abs(st.B_bar[0, 0] - 1.0)), 1e-12))
    tiny = discretize(np.array([[-1.0]]), np.array([2.0]), np.array([1e-7]))
    results.append(CheckResult("zoh_small_step_limit", abs(tiny.B_bar[0, 0] / 1e-7 - 2.0), 1e-6))

    p = MambaParams(MambaConfig(d_h=4, expand=2, d_state=3), rng)
    for q in p.parameters():
        q.data = q.data + 0.1 * rng.standard_normal(q.shape)
    rep = residual_decomposition_check(p, rng.standard_normal((6, 4)))
    for k, v in rep.items():
        results.append(CheckResult(f"residual_{k}", v, 1e-10))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max_dev':>10}  {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.deviation:>10.3e}  {r.tolerance:>8.1e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
