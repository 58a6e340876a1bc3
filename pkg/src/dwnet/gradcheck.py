"""Finite-difference oracles for the tensor core.

Analytic gradients come from tape backward on a float32 (or float64) path;
the numeric reference is a central difference evaluated on a float64 shadow
of the same computation, which is deliberately independent of the backward
closures it is checking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.rel_err < self.tol


def fd_gradient(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray],
                index: int, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of f w.r.t. arrays[index], elementwise."""
    arrays = [a.astype(np.float64).copy() for a in arrays]
    a = arrays[index]
    grad = np.zeros_like(a)
    flat = a.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(arrays)
        flat[i] = orig - step
        fm = f(arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.abs(numeric).max()
    if scale == 0.0:
        return float(np.abs(analytic).max())
    return float(np.abs(analytic.astype(np.float64) - numeric).max() / scale)


def check_gradients(name: str, build: Callable[[T.Tape, list[T.Tensor]], T.Tensor],
                    arrays: list[np.ndarray], wrt: list[int],
                    step: float = 1e-3, tol: float = 1e-3) -> list[CheckResult]:
    """Compare tape gradients of a scalar-valued graph against central FD.

    `build` assembles the graph from leaves and must return a scalar tensor.
    The FD reference re-runs the same builder on float64 copies.
    """
    tape = T.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    root = build(tape, leaves)
    grads = T.backward(tape, root)

    def eval64(arrs: list[np.ndarray]) -> float:
        t2 = T.Tape()
        ls = [t2.leaf(a) for a in arrs]
        return float(build(t2, ls).data)

    results = []
    for idx in wrt:
        analytic = grads[leaves[idx].node]
        numeric = fd_gradient(eval64, arrays, idx, step)
        results.append(CheckResult(f"{name}[arg{idx}]", rel_error(analytic, numeric), tol))
    return results


def _rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


def operator_suite(seed: int = 0, cases_per_op: int = 5) -> list[CheckResult]:
    """FD checks for every differentiable operator on random small inputs."""
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []

    def weighted_sum(build_out):
        # random fixed projection to a scalar so every output element matters
        def builder(tape, leaves):
            y = build_out(tape, leaves)
            w = leaves[-1]
            return T.tsum(T.mul(y, w))
        return builder

    for case in range(cases_per_op):
        n, ci, co, h = 2, 3, 4, 8
        for pad in (T.PaddingMode.PERIODIC, T.PaddingMode.ZERO):
            x = _rand(rng, n, ci, h, h)
            w = _rand(rng, co, ci, 3, 3) * 0.5
            b = _rand(rng, co)
            proj = _rand(rng, n, co, h, h)
            out += check_gradients(
                f"conv2d_3x3_{pad.value}_{case}",
                weighted_sum(lambda tape, l, pad=pad: T.conv2d(l[0], l[1], l[2], pad=pad)),
                [x, w, b, proj], wrt=[0, 1, 2])

        # depthwise 7x7
        x = _rand(rng, 1, 3, 8, 8)
        w = _rand(rng, 3, 1, 7, 7) * 0.3
        b = _rand(rng, 3)
        proj = _rand(rng, 1, 3, 8, 8)
        out += check_gradients(
            f"conv2d_7x7_dw_{case}",
            weighted_sum(lambda tape, l: T.conv2d(l[0], l[1], l[2], groups=3)),
            [x, w, b, proj], wrt=[0, 1, 2])

        # learned downsampling, 2x2 stride 2
        x = _rand(rng, 2, 3, 6, 6)
        w = _rand(rng, 4, 3, 2, 2) * 0.5
        b = _rand(rng, 4)
        proj = _rand(rng, 2, 4, 3, 3)
        out += check_gradients(
            f"conv2d_2x2_s2_{case}",
            weighted_sum(lambda tape, l: T.conv2d(l[0], l[1], l[2], stride=2)),
            [x, w, b, proj], wrt=[0, 1, 2])

        # transposed conv
        x = _rand(rng, 2, 3, 4, 4)
        w = _rand(rng, 3, 2, 2, 2) * 0.5
        b = _rand(rng, 2)
        proj = _rand(rng, 2, 2, 8, 8)
        out += check_gradients(
            f"conv_transpose2d_{case}",
            weighted_sum(lambda tape, l: T.conv_transpose2d(l[0], l[1], l[2])),
            [x, w, b, proj], wrt=[0, 1, 2])

        # pooling: keep FD honest by separating window values
        x = _rand(rng, 1, 2, 4, 4) * 3.0
        proj = _rand(rng, 1, 2, 2, 2)
        out += check_gradients(
            f"max_pool2_{case}",
            weighted_sum(lambda tape, l: T.max_pool2(l[0])),
            [x, proj], wrt=[0], step=1e-4)
        out += check_gradients(
            f"avg_pool2_{case}",
            weighted_sum(lambda tape, l: T.avg_pool2(l[0])),
            [x, proj], wrt=[0])

        x = _rand(rng, 2, 3, 4, 4)
        proj = _rand(rng, 2, 3, 4, 4)
        out += check_gradients(
            f"gelu_{case}",
            weighted_sum(lambda tape, l: T.gelu(l[0])),
            [x, proj], wrt=[0])

        x = _rand(rng, 2, 4, 5, 5)
        gamma = _rand(rng, 4)
        beta = _rand(rng, 4)
        proj = _rand(rng, 2, 4, 5, 5)
        out += check_gradients(
            f"group_norm_{case}",
            weighted_sum(lambda tape, l: T.group_norm(l[0], 2, l[1], l[2])),
            [x, gamma, beta, proj], wrt=[0, 1, 2])

        a = _rand(rng, 1, 2, 3, 3)
        b2 = _rand(rng, 1, 3, 3, 3)
        proj = _rand(rng, 1, 5, 3, 3)
        out += check_gradients(
            f"concat_channels_{case}",
            weighted_sum(lambda tape, l: T.concat_channels([l[0], l[1]])),
            [a, b2, proj], wrt=[0, 1])

        a = _rand(rng, 2, 2, 3, 3)
        b2 = _rand(rng, 2, 2, 3, 3)
        proj = _rand(rng, 2, 2, 3, 3)
        out += check_gradients(
            f"add_{case}",
            weighted_sum(lambda tape, l: T.add(l[0], l[1])),
            [a, b2, proj], wrt=[0, 1])
        out += check_gradients(
            f"mul_{case}",
            weighted_sum(lambda tape, l: T.mul(l[0], l[1])),
            [a, b2, proj], wrt=[0, 1])

        p = _rand(rng, 2, 2, 4, 4)
        t = _rand(rng, 2, 2, 4, 4) + 0.5
        out += check_gradients(
            f"scaled_l2_loss_{case}",
            lambda tape, l, t=t: T.scaled_l2_loss(l[0], t),
            [p], wrt=[0])
        out += check_gradients(
            f"mse_loss_{case}",
            lambda tape, l, t=t: T.mse_loss(l[0], t),
            [p], wrt=[0])

    return out


def run_suite(verbose: bool = True, seed: int = 0) -> bool:
    results = operator_suite(seed=seed)
    worst: dict[str, CheckResult] = {}
    for r in results:
        base = r.name.split("[")[0].rsplit("_", 1)[0]
        if base not in worst or r.rel_err > worst[base].rel_err:
            worst[base] = r
    ok = all(r.ok for r in results)
    if verbose:
        for base in sorted(worst):
            r = worst[base]
            print(f"{'PASS' if r.ok else 'FAIL'}  {base:<28} worst rel err {r.rel_err:.3e} (tol {r.tol:g})")
        print(f"{'all operator gradients match' if ok else 'GRADIENT MISMATCH'} "
              f"({len(results)} checks)")
    return ok
