"""Central finite-difference gradient checks for every differentiable op.

The numeric side only ever calls an op's forward pass, so it stays independent
of the backward implementation it validates.  Large inputs can be spot-checked
on a random coordinate subset to keep the suite fast.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"{status} {self.name:<28} rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} ({self.seconds:.2f}s)"


def numeric_gradient(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    step: float = DEFAULT_STEP,
    coords: Sequence[tuple] | None = None,
) -> np.ndarray:
    """Central differences of a scalar-valued function at x.

    With `coords`, only those flat indices are probed; the rest stay NaN and
    are skipped by the comparison.
    """
    g = np.full(x.size, np.nan)
    flat = x.reshape(-1)
    if coords is None:
        coords = range(x.size)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g.reshape(x.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max deviation normalized by the numeric gradient scale (floored at 1)."""
    mask = np.isfinite(numeric)
    if not mask.any():
        return 0.0
    diff = np.abs(analytic[mask] - numeric[mask])
    denom = max(1.0, np.abs(numeric[mask]).max(), np.abs(analytic[mask]).max())
    return float(diff.max() / denom)


def check_gradients(
    build: Callable[..., "T.Tensor"],
    inputs: Sequence[np.ndarray],
    wrt: Sequence[int] | None = None,
    step: float = DEFAULT_STEP,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backward() of build(*inputs) against central differences.

    `build` maps Tensors to a scalar Tensor.  Returns the worst relative
    error over the checked inputs.
    """
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    tensors = [T.Tensor(x, requires_grad=(i in wrt)) for i, x in enumerate(inputs)]
    out = build(*tensors)
    out.backward()
    worst = 0.0
    for i in wrt:
        x = np.array(inputs[i], dtype=np.float64)
        coords = None
        if max_coords is not None and x.size > max_coords:
            gen = rng or np.random.default_rng(0)
            coords = gen.choice(x.size, size=max_coords, replace=False)

        def f(xv, i=i):
            args = [T.Tensor(inputs[j]) if j != i else T.Tensor(xv) for j in range(len(inputs))]
            return float(build(*args).data)

        num = numeric_gradient(f, x, step=step, coords=coords)
        ana = tensors[i].grad
        if ana is None:
            ana = np.zeros_like(x)
        worst = max(worst, rel_error(ana, num))
    return worst


# ---------------------------------------------------------------------------
# the op suite, shared by tests and the CLI `gradcheck` command


def _probe(t):
    """Reduce a tensor to a scalar with fixed random weights (seeded)."""
    w = np.random.default_rng(1234).standard_normal(t.shape)
    return T.sum_all(T.mul(t, T.Tensor(w)))


def op_checks(rng: np.random.Generator, rounds: int = 5) -> list[CheckResult]:
    """Finite-difference checks for each differentiable op on random shapes."""
    results = []

    def run(name, fn, tol=DEFAULT_TOL):
        t0 = time.time()
        worst = 0.0
        for _ in range(rounds):
            worst = max(worst, fn())
        results.append(CheckResult(name, worst, tol, time.time() - t0))

    def r_shape(lo=2, hi=6, n=2):
        return tuple(int(rng.integers(lo, hi + 1)) for _ in range(n))

    def matmul_case():
        m, k, n = r_shape(2, 5, 3)
        return check_gradients(
            lambda a, b: _probe(T.matmul(a, b)),
            [rng.standard_normal((m, k)), rng.standard_normal((k, n))],
        )

    run("matmul", matmul_case, tol=1e-6)
    run(
        "bmm",
        lambda: check_gradients(
            lambda a, b: _probe(T.bmm(a, b)),
            [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 3))],
        ),
        tol=1e-6,
    )
    def softmax_case():
        axis = int(rng.integers(0, 2))
        return check_gradients(
            lambda a: _probe(T.softmax(a, axis=axis)), [rng.standard_normal(r_shape())]
        )

    run("softmax", softmax_case)

    def layernorm_case():
        n = int(rng.integers(2, 5))
        c = int(rng.integers(2, 6))
        return check_gradients(
            lambda a, g, b: _probe(T.layernorm(a, g, b)),
            [rng.standard_normal((n, c)), rng.standard_normal(c), rng.standard_normal(c)],
        )

    run("layernorm", layernorm_case, tol=1e-4)
    run(
        "gelu",
        lambda: check_gradients(lambda a: _probe(T.gelu(a)), [rng.standard_normal(r_shape())]),
    )

    def bilinear_case():
        h, w = r_shape(3, 7)
        f = rng.standard_normal((h, w, 2))
        n = 12
        # fractional interior points away from the integer-lattice kinks
        coords = np.stack(
            [
                rng.uniform(0.3, h - 1.3, n) + 0.2,
                rng.uniform(0.3, w - 1.3, n) + 0.2,
            ],
            axis=1,
        )
        border = "wrap_horizontal" if rng.integers(0, 2) else "clamp"
        return check_gradients(
            lambda ft, ct: _probe(T.bilinear_sample(ft, ct, border)), [f, coords]
        )

    run("bilinear_sample", bilinear_case)

    def deform_case():
        h, w = r_shape(3, 6)
        c = 3
        f = rng.standard_normal((h, w, c))
        off = rng.uniform(-1.2, 1.2, (h, w, c, 2)) + 0.13
        return check_gradients(
            lambda ft, ot: _probe(T.deform_channels(ft, ot, "clamp")), [f, off]
        )

    run("deform_channels", deform_case)

    def upsample_case():
        oh, ow = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        return check_gradients(
            lambda f: _probe(T.upsample_bilinear(f, oh, ow)),
            [rng.standard_normal((*r_shape(2, 5), 2))],
        )

    run("upsample_bilinear", upsample_case, tol=1e-6)
    run(
        "avg_pool",
        lambda: check_gradients(
            lambda f: _probe(T.avg_pool(f, 2)), [rng.standard_normal((4, 6, 3))]
        ),
        tol=1e-6,
    )

    def conv_case():
        stride = int(rng.choice([1, 2]))
        return check_gradients(
            lambda x, w, b: _probe(T.conv3x3(x, w, b, stride=stride)),
            [
                rng.standard_normal((4, 6, 2)),
                rng.standard_normal((3, 3, 2, 3)) * 0.3,
                rng.standard_normal(3) * 0.1,
            ],
        )

    run("conv3x3", conv_case, tol=1e-5)
    def clamp_case():
        z = rng.uniform(-2.0, 2.0, r_shape())
        # keep probe values away from the clamp kinks at +-1
        z = np.where(np.abs(np.abs(z) - 1.0) < 0.05, z + 0.2, z)
        return check_gradients(lambda a: _probe(T.clamp(a, -1.0, 1.0)), [z])

    run("clamp", clamp_case, tol=1e-5)

    def ce_case():
        h, w = r_shape(2, 4)
        k = int(rng.integers(2, 5))
        logits = rng.standard_normal((h, w, k))
        labels = rng.integers(0, k, (h, w))
        labels.reshape(-1)[0] = T.IGNORE_LABEL
        return check_gradients(
            lambda lg: T.cross_entropy(lg, labels), [logits]
        )

    run("cross_entropy", ce_case)

    def kl_case():
        n, k = r_shape(2, 5)
        a = rng.uniform(0.1, 1.0, (n, k))
        b = rng.uniform(0.1, 1.0, (n, k))
        a /= a.sum(axis=1, keepdims=True)
        b /= b.sum(axis=1, keepdims=True)
        # perturbation breaks normalization, so check through a softmax remap
        return check_gradients(
            lambda ar, br: T.kl_div(T.softmax(ar), T.softmax(br)), [a, b]
        )

    run("kl_div", kl_case)
    return results


def module_checks(rng: np.random.Generator) -> list[CheckResult]:
    """Checks for the deformable embedding/mixing layers."""
    from . import deform

    results = []

    t0 = time.time()
    worst = 0.0
    for _ in range(5):
        worst = max(worst, deform.gradcheck_patch_embed(rng))
    results.append(CheckResult("deformable_patch_embed", worst, DEFAULT_TOL, time.time() - t0))

    t0 = time.time()
    worst = 0.0
    for _ in range(5):
        worst = max(worst, deform.gradcheck_mixer(rng))
    results.append(CheckResult("deformable_mixer", worst, DEFAULT_TOL, time.time() - t0))
    return results


def model_checks(rng: np.random.Generator) -> list[CheckResult]:
    """End-to-end probe: finite differences through the whole network."""
    from . import model as M

    t0 = time.time()
    cfg = M.ModelConfig.nano(classes=3)
    net = M.SegNet(cfg, seed=7)
    x = rng.uniform(0.0, 1.0, (32, 64, 3))

    # scalar probe on two fixed logits pixels
    def build(xt):
        out = net.forward(xt)
        flat = T.reshape(out.logits, (-1,))
        return T.sum_all(T.take_rows(T.reshape(flat, (-1, 1)), np.array([5, 1234])))

    params = net.parameters()
    names = sorted(params)
    picks = [names[int(i)] for i in rng.choice(len(names), size=4, replace=False)]

    xt = T.Tensor(x, requires_grad=True)
    loss = build(xt)
    loss.backward()

    worst = 0.0
    sub = np.random.default_rng(11)
    # input-pixel path
    num = numeric_gradient(
        lambda xv: float(build(T.Tensor(xv)).data),
        x.copy(),
        coords=sub.choice(x.size, size=10, replace=False),
    )
    worst = max(worst, rel_error(xt.grad, num))
    # a few parameter tensors
    for name in picks:
        p = params[name]
        saved = p.data.copy()

        def f(pv, p=p):
            p.data[...] = pv
            try:
                return float(build(T.Tensor(x)).data)
            finally:
                p.data[...] = saved

        coords = sub.choice(p.data.size, size=min(6, p.data.size), replace=False)
        num = numeric_gradient(f, saved.copy(), coords=coords)
        ana = p.grad if p.grad is not None else np.zeros_like(saved)
        worst = max(worst, rel_error(ana, num))
    return [CheckResult("model_probe", worst, DEFAULT_TOL, time.time() - t0)]


def run_suite(scope: str = "op", seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = op_checks(rng)
    if scope in ("module", "model"):
        results += module_checks(rng)
    if scope == "model":
        results += model_checks(rng)
    return results
