"""Release self-verification: each check compares the library against an independent oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from fetrack import ssm
from fetrack.errors import FETrackError
from fetrack.femamba import BackboneConfig, FEMambaBlock
from fetrack.head import giou, weighted_total
from fetrack.metrics import evaluate
from fetrack.numerics import Tensor, check_gradients, ops
from fetrack.prompts import HARD, gumbel_select


@dataclass
class CheckResult:
    name: str
    tolerance: float
    error: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.error) and self.error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"check={self.name} tol={self.tolerance:.1e} err={self.error:.3e} {status}"


def _rng():
    return np.random.default_rng(1234)


def _scan_instance(rng, Bsz, L, Cin, N):
    inputs = ssm.ScanInputs(rng.normal(size=(Bsz, L, Cin)), rng.uniform(0.05, 0.8, (Bsz, L, Cin)),
                            rng.normal(size=(Bsz, L, N)), rng.normal(size=(Bsz, L, N)),
                            rng.normal(size=(Bsz, L, N)))
    return inputs, -rng.uniform(0.3, 2.0, (Cin, N)), rng.normal(size=Cin)


def check_scan_equivalence() -> float:
    rng, worst = _rng(), 0.0
    for L in (7, 64, 257):
        for chunk in (1, 7, 32, L):
            inputs, A, D = _scan_instance(rng, 2, L, 3, 4)
            ref = ssm.selective_scan_ref(inputs, A, D)
            got = ssm.selective_scan_chunked(inputs, A, D, chunk)
            worst = max(worst, float(np.max(np.abs(got - ref)) / np.max(np.abs(ref))))
    return worst


def check_zoh() -> float:
    """Gauss-Legendre quadrature of ``int_0^delta exp(a s) ds`` against the closed form."""
    rng, worst = _rng(), 0.0
    nodes, weights = np.polynomial.legendre.leggauss(40)
    for i in range(200):
        a = -math.exp(rng.uniform(-9, 1)) if i % 4 else -rng.uniform(1e-10, 1e-7)
        d = math.exp(rng.uniform(-7, 0.5))
        b = rng.normal()
        s = 0.5 * d * (nodes + 1)
        quad = 0.5 * d * float(np.sum(weights * np.exp(a * s))) * b
        _, bbar = ssm.discretize_zoh(np.array([[a]]), np.array([[[b]]]), np.array([[[d]]]))
        worst = max(worst, abs(float(bbar.squeeze()) - quad) / max(abs(quad), 1e-300))
    return worst


def check_scan_gradients() -> float:
    rng = _rng()
    inputs, A, D = _scan_instance(rng, 1, 6, 2, 3)
    tensors = [Tensor(a, requires_grad=True) for a in (inputs.x, inputs.delta, A, inputs.B, inputs.C, D,
                                                       inputs.prompt)]
    w = Tensor(rng.normal(size=inputs.x.shape))
    errs = check_gradients(lambda: ops.sum(ops.mul(ssm.selective_scan(*tensors), w)), tensors)
    return max(errs.values())


def check_block_gradients() -> float:
    rng = _rng()
    blk = FEMambaBlock(BackboneConfig(depth=1, dim=4, d_state=2, prompt_dim=2), rng)
    for s in (blk.ssm_f, blk.ssm_b):
        s.dt_bias.data[...] = ssm.inverse_softplus(rng.uniform(0.3, 0.8, s.dt_bias.shape))
    H = Tensor(rng.normal(size=(1, 5, 4)), requires_grad=True)
    P = Tensor(rng.normal(size=(1, 5, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 5, 4)))
    errs = check_gradients(lambda: ops.sum(ops.mul(blk(H, P), w)), [H, P] + blk.parameters(), eps=1e-4)
    return max(errs.values())


def check_prompt_one_hot() -> float:
    logp = np.log(_rng().dirichlet(np.ones(6), size=(4, 25)))
    out = gumbel_select(logp, 1.0, seed=3, mode=HARD).data
    ones = (out == 1).sum(-1)
    zeros = (out == 0).sum(-1)
    return float(np.max(np.abs(ones - 1)) + np.max(np.abs(zeros - (out.shape[-1] - 1))))


def check_giou() -> float:
    rng = _rng()
    worst = 0.0
    for _ in range(5):
        a = np.concatenate([rng.uniform(0.2, 0.8, 2), rng.uniform(0.1, 0.5, 2)])
        b = np.concatenate([rng.uniform(0.2, 0.8, 2), rng.uniform(0.1, 0.5, 2)])
        ca = np.r_[a[:2] - a[2:] / 2, a[:2] + a[2:] / 2]
        cb = np.r_[b[:2] - b[2:] / 2, b[:2] + b[2:] / 2]
        lo, hi = np.minimum(ca[:2], cb[:2]), np.maximum(ca[2:], cb[2:])
        pts = rng.uniform(lo, hi, size=(200_000, 2))
        in_a = np.all((pts >= ca[:2]) & (pts <= ca[2:]), axis=1)
        in_b = np.all((pts >= cb[:2]) & (pts <= cb[2:]), axis=1)
        fu = (in_a | in_b).mean()
        est = (in_a & in_b).mean() / fu - (1 - fu)
        worst = max(worst, abs(float(giou(a, b).data.reshape(-1)[0]) - est))
    return worst


def check_loss_constants() -> float:
    return abs(weighted_total(0.1, 0.2, 0.3) - 3.2)


def check_metrics() -> float:
    gt = np.tile([0.0, 0.0, 100.0, 100.0], (10, 1))
    pred = gt.copy()
    pred[:, 0] = [0, 10, 19, 20, 24, 40, 50, 55, 100, 200]
    m = evaluate(pred, gt)
    expect = {"PR": 0.3, "NPR": 0.3, "SR_auc": 100 / 210, "SR@0.5": 0.5}
    return max(abs(m[k] - v) for k, v in expect.items())


CHECKS: list[tuple[str, Callable[[], float], float]] = [
    ("scan_equivalence", check_scan_equivalence, 1e-12),
    ("zoh_quadrature", check_zoh, 1e-10),
    ("scan_gradient", check_scan_gradients, 1e-5),
    ("block_gradient", check_block_gradients, 1e-4),
    ("prompt_one_hot", check_prompt_one_hot, 0.0),
    ("giou_monte_carlo", check_giou, 1e-2),
    ("loss_constants", check_loss_constants, 0.0),
    ("metric_oracle", check_metrics, 1e-15),
]


def run_checks() -> list[CheckResult]:
    results = []
    for name, fn, tol in CHECKS:
        try:
            err = float(fn())
        except FETrackError:
            err = math.inf
        results.append(CheckResult(name, tol, err))
    return results
