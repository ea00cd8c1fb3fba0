"""Built-in correctness suite behind the ``check`` command: gradient checks
for the whole primitive catalog, the scalar quadratic bi-level oracle, the
alignment-loss properties, and the metrics oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcheck import run_primitive_checks
from .graph import Tensor
from .losses import KernelConfig, cross_entropy, mmd2_biased
from .meta import adapt_on_loss, task_meta_gradient
from .evaluation import compute_metrics
from . import ops


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _quadratic_checks() -> list[CheckResult]:
    results = []
    theta0, alpha = 1.0, 0.2
    params = {"theta": Tensor(np.array(theta0))}

    def l_support(p):
        return ops.mul(ops.square(p["theta"]), 0.5)

    def l_query(p):
        return ops.mul(ops.square(p["theta"]), 0.5)

    adapted = adapt_on_loss(params, l_support, alpha, 1, differentiable=False)
    got = adapted.params["theta"].item()
    results.append(CheckResult("bilevel/inner-step", abs(got - 0.8) < 1e-12,
                               f"theta'={got}, expected 0.8"))

    g2, _ = task_meta_gradient(params, l_support, l_query, alpha, 1, "second")
    want = (1 - alpha) * (1 - alpha) * theta0
    results.append(CheckResult("bilevel/second-order", abs(float(g2["theta"]) - want) < 1e-10,
                               f"got {float(g2['theta'])}, expected {want}"))

    g1, _ = task_meta_gradient(params, l_support, l_query, alpha, 1, "first")
    results.append(CheckResult("bilevel/first-order", abs(float(g1["theta"]) - 0.8) < 1e-10,
                               f"got {float(g1['theta'])}, expected 0.8"))

    n = 3
    gn, _ = task_meta_gradient(params, l_support, l_query, alpha, n, "second")
    want_n = (1 - alpha) ** n * (1 - alpha) ** n * theta0
    results.append(CheckResult("bilevel/n-step", abs(float(gn["theta"]) - want_n) < 1e-10,
                               f"got {float(gn['theta'])}, expected {want_n}"))
    return results


def _mmd_checks() -> list[CheckResult]:
    results = []
    rng = np.random.default_rng(3)
    kcfg = KernelConfig(sigma=1.0)

    x = Tensor(rng.normal(size=(4, 3)))
    same = float(mmd2_biased(x, Tensor(x.data.copy()), kcfg).data)
    results.append(CheckResult("mmd/self-zero", same == 0.0, f"mmd(X,X)={same}"))

    a = Tensor(rng.normal(size=(3, 2)))
    b = Tensor(rng.normal(size=(5, 2)) + 1.0)
    ab = float(mmd2_biased(a, b, kcfg).data)
    ba = float(mmd2_biased(b, a, kcfg).data)
    results.append(CheckResult("mmd/symmetry", abs(ab - ba) < 1e-12, f"{ab} vs {ba}"))
    results.append(CheckResult("mmd/non-negative", ab >= 0.0, f"mmd={ab}"))

    sx = Tensor(np.zeros((1, 2)))
    sy = Tensor(np.array([[np.sqrt(2.0), 0.0]]))
    singleton = float(mmd2_biased(sx, sy, kcfg).data)
    want = 2.0 - 2.0 * np.exp(-1.0)
    results.append(CheckResult("mmd/singleton", abs(singleton - want) < 1e-12,
                               f"got {singleton}, expected {want}"))

    def brute(xd, yd, sigma):
        k = lambda u, v: np.exp(-((u - v) ** 2).sum() / (2 * sigma * sigma))
        kxx = np.mean([k(u, v) for u in xd for v in xd])
        kyy = np.mean([k(u, v) for u in yd for v in yd])
        kxy = np.mean([k(u, v) for u in xd for v in yd])
        return kxx + kyy - 2 * kxy

    ref = brute(a.data, b.data, 1.0)
    results.append(CheckResult("mmd/brute-force", abs(ab - ref) < 1e-12,
                               f"got {ab}, oracle {ref}"))
    return results


def _metrics_checks() -> list[CheckResult]:
    results = []
    preds = np.array([0, 0, 0, 1, 1, 1, 1, 1, 1, 1])
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1, 0])
    rep = compute_metrics(preds, labels, 2)
    ok = (abs(rep.accuracy - 0.8) < 1e-12
          and abs(rep.uar - (0.6 + 1.0) / 2) < 1e-12)
    results.append(CheckResult("metrics/hand-case", ok,
                               f"acc={rep.accuracy}, uar={rep.uar}"))

    rng = np.random.default_rng(11)
    agree = True
    for _ in range(50):
        n = int(rng.integers(2, 6))
        m = int(rng.integers(4, 40))
        p = rng.integers(0, n, m)
        l = rng.integers(0, n, m)
        rep = compute_metrics(p, l, n)
        recs, f1s = [], []
        for c in range(n):
            support = (l == c).sum()
            if support == 0:
                continue
            tp = ((p == c) & (l == c)).sum()
            recs.append(tp / support)
            pred_c = (p == c).sum()
            if pred_c == 0 or tp == 0:
                f1s.append(0.0)
            else:
                pr, rc = tp / pred_c, tp / support
                f1s.append(2 * pr * rc / (pr + rc))
        if not (abs(rep.accuracy - (p == l).mean()) < 1e-15
                and abs(rep.uar - np.mean(recs)) < 1e-15
                and abs(rep.macro_f1 - np.mean(f1s)) < 1e-15):
            agree = False
            break
    results.append(CheckResult("metrics/loop-oracle", agree, "50 random instances"))
    return results


def _ce_check() -> list[CheckResult]:
    logits = Tensor(np.zeros((2, 5)))
    loss = float(cross_entropy(logits, np.array([1, 3])).data)
    want = np.log(5.0)
    return [CheckResult("loss/uniform-ln5", abs(loss - want) < 1e-12,
                        f"got {loss}, expected {want}")]


def run_checks(gradcheck_draws: int = 5) -> list[CheckResult]:
    results: list[CheckResult] = []
    for name, err, ok in run_primitive_checks(draws=gradcheck_draws):
        results.append(CheckResult(f"gradcheck/{name}", ok, f"max rel err {err:.2e}"))
    results.extend(_quadratic_checks())
    results.extend(_mmd_checks())
    results.extend(_ce_check())
    results.extend(_metrics_checks())
    return results
