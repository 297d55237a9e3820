"""Central finite-difference verification of tape gradients."""

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tape
from .kernels import as_tensor

__all__ = ["CheckReport", "ContractError", "grad_check", "numeric_grad", "analytic_grad"]


class ContractError(ValueError):
    """The checked graph does not produce a scalar loss."""


@dataclass
class CheckReport:
    passed: bool
    max_error: float
    worst_param: str | None
    worst_index: tuple | None
    n_checked: int
    failures: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst_param}{list(self.worst_index)}" if self.worst_param else ""
        return f"{status}: {self.n_checked} entries, max rel. error {self.max_error:.3e}{where}"


def _evaluate(fn, params):
    tape = Tape()
    nodes = {k: tape.param(v, k) for k, v in params.items()}
    loss = fn(tape, nodes)
    if np.size(loss.value) != 1:
        raise ContractError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    return tape, loss


def analytic_grad(fn, params):
    tape, loss = _evaluate(fn, params)
    return tape.backward(loss)


def numeric_grad(fn, params, eps=1e-6, entries=None):
    """Central differences; ``entries`` optionally restricts indices per parameter."""
    params = {k: as_tensor(v).copy() for k, v in params.items()}
    out = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        idxs = entries.get(name) if entries else None
        if idxs is None:
            idxs = list(np.ndindex(value.shape))
        for idx in idxs:
            orig = value[idx]
            value[idx] = orig + eps
            fp = float(_evaluate(fn, params)[1].value)
            value[idx] = orig - eps
            fm = float(_evaluate(fn, params)[1].value)
            value[idx] = orig
            g[idx] = (fp - fm) / (2.0 * eps)
        out[name] = g
    return out


def grad_check(fn, params, eps=1e-6, tol=1e-4, analytic=None, max_entries=None, seed=0):
    """Compare tape gradients of ``fn`` against central differences.

    ``fn(tape, nodes)`` builds the graph from parameter nodes and returns a
    scalar loss node. The error per entry is
    ``|analytic - numeric| / max(1, |numeric|)``. With ``max_entries`` set,
    larger tensors are checked on a seeded random subset of that size.
    """
    params = {k: as_tensor(v) for k, v in params.items()}
    if analytic is None:
        analytic = analytic_grad(fn, params)
    rng = np.random.default_rng(seed)
    entries = {}
    for name, v in params.items():
        all_idx = list(np.ndindex(v.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        entries[name] = all_idx
    numeric = numeric_grad(fn, params, eps, entries)

    worst = (0.0, None, None)
    failures = []
    n = 0
    for name, idxs in entries.items():
        a, g = analytic[name], numeric[name]
        if a.shape != params[name].shape:
            raise ContractError(f"gradient for {name!r} has shape {a.shape}, expected {params[name].shape}")
        for idx in idxs:
            err = abs(a[idx] - g[idx]) / max(1.0, abs(g[idx]))
            n += 1
            if err > worst[0] or worst[1] is None:
                worst = (err, name, idx)
            if err > tol:
                failures.append((name, idx, float(a[idx]), float(g[idx])))
    return CheckReport(
        passed=not failures,
        max_error=float(worst[0]),
        worst_param=worst[1],
        worst_index=worst[2],
        n_checked=n,
        failures=failures,
    )
