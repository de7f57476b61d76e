"""In-process property checks run by ``stove-dyn selftest``."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import ActionContext, ModelConfig, dynamics_forward, init_params, reward_forward
from .envs import (
    OBJECT_COLORS, default_config, generate_dataset, sample_initial_state, dataset_bytes, step_billiards,
    velocity_energy,
)
from .fusion import GaussianBelief, hungarian, product_of_gaussians
from .nnkit import EvalOps, Tape
from .training import gaussian_nll

GRAD_TOL = 1e-4
POG_TOL = 1e-9
EQUIVARIANCE_TOL = 0.0
ENERGY_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def _grad_check(loss_fn, params, rng: np.random.Generator, n_probe: int = 100, h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences on random coordinates."""
    tape = Tape(params)
    grads = tape.backprop(loss_fn(tape))
    ops = EvalOps(params)
    idx = rng.choice(params.size, size=min(n_probe, params.size), replace=False)
    # always include the largest gradients, where a wrong vjp shows most clearly
    idx = np.unique(np.concatenate([idx, np.argsort(-np.abs(grads))[:10]]))
    worst = 0.0
    for i in idx:
        old = params.flat[i]
        params.flat[i] = old + h
        up = float(loss_fn(ops))
        params.flat[i] = old - h
        down = float(loss_fn(ops))
        params.flat[i] = old
        fd = (up - down) / (2 * h)
        err = abs(fd - grads[i]) / max(abs(fd), abs(grads[i]), 1e-3)
        worst = max(worst, err)
    return worst


def check_gradients(seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    worst = {}
    for conditioned in (False, True):
        cfg = ModelConfig(conditioned=conditioned)
        params = init_params(cfg, rng)
        params.flat[:] += rng.normal(0, 0.05, params.size)   # non-zero biases
        z = rng.normal(0.5, 0.2, (4, cfg.n_objects, cfg.l))
        target = rng.normal(0.5, 0.2, (4, cfg.n_objects, 4))
        ctx = ActionContext(rng.integers(0, 9, 4), OBJECT_COLORS[:3]) if conditioned else None

        def loss(ops):
            tr = dynamics_forward(z, params, cfg, ctx, ops)
            nll = gaussian_nll(tr.mean, tr.std, target, ops)
            tr2 = dynamics_forward(tr.mean, params, cfg, ctx, ops)
            out = ops.add(nll, gaussian_nll(tr2.mean, tr2.proposal_std, target, ops))
            out = ops.add(out, ops.mean(reward_forward(tr2.joint, params, cfg, ops)))
            return out

        worst["conditioned" if conditioned else "plain"] = _grad_check(loss, params, rng)
    bad = {k: v for k, v in worst.items() if not v <= GRAD_TOL}
    msg = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    if bad:
        raise AssertionError(f"gradient mismatch: {msg}")
    return msg


def check_product_of_gaussians(seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(200):
        a = GaussianBelief(rng.normal(0, 1, 3), rng.uniform(0.05, 2, 3))
        b = GaussianBelief(rng.normal(0, 1, 3), rng.uniform(0.05, 2, 3))
        c = product_of_gaussians(a, b)
        # closed form: precision-weighted mean, precisions add
        pa, pb = a.std ** -2, b.std ** -2
        mean = (pa * a.mean + pb * b.mean) / (pa + pb)
        if not np.allclose(c.mean, mean, rtol=POG_TOL, atol=POG_TOL):
            raise AssertionError("fused mean differs from the precision-weighted mean")
        if not np.allclose(c.std ** -2, pa + pb, rtol=POG_TOL):
            raise AssertionError("fused precision differs from the sum of precisions")
        # N(x; a) N(x; b) / N(x; c) must not depend on x
        xs = c.mean[None] + rng.normal(0, 1, (5, 3)) * c.std[None]
        logq = _log_normal(xs, a) + _log_normal(xs, b) - _log_normal(xs, c)
        worst = max(worst, float(np.max(np.abs(logq - logq[0]))))
    if worst > POG_TOL:
        raise AssertionError(f"density ratio not constant: {worst:.2e}")
    return f"max log-ratio spread {worst:.1e}"


def _log_normal(x: np.ndarray, g: GaussianBelief) -> np.ndarray:
    return -0.5 * ((x - g.mean) / g.std) ** 2 - np.log(g.std) - 0.5 * math.log(2 * math.pi)


def check_hungarian(seed: int = 0, instances: int = 1000) -> str:
    rng = np.random.default_rng(seed)
    for k in range(instances):
        n = int(rng.integers(1, 6))
        cost = rng.uniform(0, 1, (n, n))
        if k % 4 == 0:
            cost = np.round(cost * 3)   # many ties
        col = hungarian(cost)
        if sorted(col) != list(range(n)):
            raise AssertionError(f"not a permutation: {col}")
        got = cost[np.arange(n), col].sum()
        best = min(cost[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n)))
        if abs(got - best) > 1e-12:
            raise AssertionError(f"instance {k}: cost {got} vs optimum {best}")
    return f"{instances} instances"


def check_permutation_symmetry(seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n_obj in (2, 3, 4, 5) * 5:
        cfg = ModelConfig(n_objects=n_obj)
        params = init_params(cfg, rng)
        params.flat[:] += rng.normal(0, 0.05, params.size)
        z = rng.normal(0.5, 0.2, (int(rng.integers(1, 65)), n_obj, cfg.l))
        perm = rng.permutation(n_obj)
        ops = EvalOps(params)
        base = dynamics_forward(z, params, cfg, ops=ops)
        moved = dynamics_forward(z[:, perm], params, cfg, ops=ops)
        for name in ("mean", "std", "proposal_std", "joint"):
            d = np.max(np.abs(getattr(base, name)[:, perm] - getattr(moved, name)))
            worst = max(worst, float(d))
        r0 = reward_forward(base.joint, params, cfg, ops)
        r1 = reward_forward(moved.joint, params, cfg, ops)
        worst = max(worst, float(np.max(np.abs(r0 - r1))))
    if worst > EQUIVARIANCE_TOL:
        raise AssertionError(f"permutation symmetry broken by {worst:.2e}")
    return f"max deviation {worst:.1e}"


def check_energy_conservation(seed: int = 0, steps: int = 1000) -> str:
    rng = np.random.default_rng(seed)
    cfg = default_config("billiards")
    worst = 0.0
    for _ in range(5):
        s = sample_initial_state(cfg, rng)
        e0 = velocity_energy(s)
        for _ in range(steps):
            s = step_billiards(s, cfg.dt)
        worst = max(worst, abs(velocity_energy(s) - e0) / e0)
    if worst > ENERGY_TOL:
        raise AssertionError(f"kinetic energy drifted by {worst:.2e}")
    return f"relative drift {worst:.1e}"


def check_dataset_determinism(seed: int = 1) -> str:
    blobs = []
    for _ in range(2):
        ds = generate_dataset(default_config("billiards"), 10, 100, seed)
        blobs.append(dataset_bytes(ds))
    if blobs[0] != blobs[1]:
        raise AssertionError("two generations with one seed differ")
    return f"{len(blobs[0])} bytes identical"


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("gradients", check_gradients),
    ("product_of_gaussians", check_product_of_gaussians),
    ("hungarian", check_hungarian),
    ("permutation_symmetry", check_permutation_symmetry),
    ("energy_conservation", check_energy_conservation),
    ("dataset_determinism", check_dataset_determinism),
]


def run_all(report=print) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        t = time.perf_counter()
        try:
            detail, ok = fn(), True
        except Exception as exc:  # a failing check must not stop the others
            detail, ok = f"{type(exc).__name__}: {exc}", False
        res = CheckResult(name, ok, detail, time.perf_counter() - t)
        results.append(res)
        if report is not None:
            report(f"{'PASS' if ok else 'FAIL'}  {name:<22} {detail}  ({res.seconds:.1f}s)")
    return results


__all__ = ["CheckResult", "CHECKS", "run_all"]
