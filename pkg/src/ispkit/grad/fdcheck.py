"""Central finite-difference verification of tape gradients.

Runs the model function once under a tape to get analytic gradients, then
perturbs sampled parameter entries in float64 and compares. The model
function receives the (converted) ParamSet and must return a scalar loss
Tensor; it is re-invoked for every probe, so it has to be deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tape, backward
from .params import ParamSet


@dataclass
class FdEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class FdReport:
    max_rel_err: float
    checked: int
    worst: list = field(default_factory=list)

    def __str__(self):
        lines = [f"finite-diff: {self.checked} entries, max rel err {self.max_rel_err:.3e}"]
        for e in self.worst[:5]:
            lines.append(
                f"  {e.name}[{e.index}] analytic={e.analytic:+.6e} "
                f"numeric={e.numeric:+.6e} rel={e.rel_err:.3e}")
        return "\n".join(lines)


def finite_diff_check(fn, params: ParamSet, rel_step: float = 1e-5,
                      max_entries_per_param: int | None = None,
                      seed: int = 0) -> FdReport:
    ps = params.astype(np.float64)
    ps.zero_grad()
    with Tape() as tape:
        loss = fn(ps)
        backward(tape, loss)
    grads = {}
    for name, t in ps.items():
        grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()

    rng = np.random.default_rng(seed)
    entries: list[FdEntry] = []
    for name, t in ps.items():
        size = t.data.size
        if max_entries_per_param is not None and size > max_entries_per_param:
            idxs = rng.choice(size, size=max_entries_per_param, replace=False)
        else:
            idxs = np.arange(size)
        flat = t.data.reshape(-1)
        for idx in idxs:
            idx = int(idx)
            theta = flat[idx]
            h = rel_step * max(1.0, abs(theta))
            flat[idx] = theta + h
            f_plus = float(fn(ps).data)
            flat[idx] = theta - h
            f_minus = float(fn(ps).data)
            flat[idx] = theta
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(grads[name].reshape(-1)[idx])
            scale = max(abs(numeric), abs(analytic), 1e-6)
            entries.append(FdEntry(name, idx, analytic, numeric,
                                   abs(numeric - analytic) / scale))

    entries.sort(key=lambda e: e.rel_err, reverse=True)
    max_err = entries[0].rel_err if entries else 0.0
    return FdReport(max_rel_err=max_err, checked=len(entries), worst=entries[:10])
