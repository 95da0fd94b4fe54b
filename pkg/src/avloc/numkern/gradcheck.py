"""Central finite-difference gradient oracle and comparison harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import Tensor, no_grad

__all__ = ["finite_difference_gradient", "check_gradients", "GradCheckReport"]


def _scalar(out) -> float:
    return out.item() if isinstance(out, Tensor) else float(out)


def finite_difference_gradient(f, params, eps: float = 1e-6, entries=None):
    """Estimate df/dtheta entrywise via (f(t+eps) - f(t-eps)) / (2 eps).

    ``f`` is a zero-argument callable reading the parameters by closure;
    it must be deterministic.  ``entries`` optionally maps a parameter
    name to the flat indices to probe (all entries otherwise).  Entries
    where either perturbed evaluation is non-finite are reported as NaN
    and listed in the returned ``unverifiable`` set.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grads: dict[str, np.ndarray] = {}
    unverifiable: list[tuple[str, int]] = []
    with no_grad():
        for p in params:
            est = np.full(p.value.size, np.nan)
            flat = p.value.reshape(-1)
            probe = range(flat.size) if entries is None else entries.get(p.name, range(flat.size))
            for i in probe:
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar(f())
                flat[i] = orig - eps
                fm = _scalar(f())
                flat[i] = orig
                if np.isfinite(fp) and np.isfinite(fm):
                    est[i] = (fp - fm) / (2.0 * eps)
                else:
                    unverifiable.append((p.name, i))
            grads[p.name] = est.reshape(p.shape)
    return grads, unverifiable


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    checked: int = 0
    failures: list = field(default_factory=list)
    unverifiable: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def __str__(self):
        state = "OK" if self.ok else f"{len(self.failures)} FAILURES"
        return f"gradcheck {state}: {self.checked} entries, max rel err {self.max_rel_err:.3e}"


def check_gradients(f, params, eps: float = 1e-6, tol: float = 1e-6,
                    max_entries_per_param: int | None = None,
                    rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of f against the finite-difference oracle.

    Relative error per entry is |a - d| / max(1, |a|, |d|).  When
    ``max_entries_per_param`` is set, a deterministic random subset of
    entries is probed per parameter (the analytic pass is always full).
    """
    for p in params:
        p.zero_grad()
    out = f()
    if not isinstance(out, Tensor):
        raise TypeError("f must return a Tensor for the analytic pass")
    out.backward()
    analytic = {p.name: p.grad.copy() for p in params}

    entries = None
    if max_entries_per_param is not None:
        rng = rng or np.random.default_rng(0)
        entries = {}
        for p in params:
            n = p.value.size
            if n <= max_entries_per_param:
                entries[p.name] = list(range(n))
            else:
                entries[p.name] = sorted(rng.choice(n, size=max_entries_per_param, replace=False).tolist())

    numeric, unverifiable = finite_difference_gradient(f, params, eps=eps, entries=entries)

    report = GradCheckReport(unverifiable=unverifiable)
    for p in params:
        a = analytic[p.name].reshape(-1)
        d = numeric[p.name].reshape(-1)
        probe = range(a.size) if entries is None else entries[p.name]
        for i in probe:
            if not np.isfinite(d[i]):
                continue
            rel = abs(a[i] - d[i]) / max(1.0, abs(a[i]), abs(d[i]))
            report.checked += 1
            report.max_rel_err = max(report.max_rel_err, rel)
            if rel > tol:
                report.failures.append((p.name, i, a[i], d[i], rel))
    return report
