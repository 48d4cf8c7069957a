"""Central finite-difference verification of analytic gradients.

Relative error uses |a - b| / max(1e-8, |a| + |b|). The `grad_scale` knob
exists for mutation testing: scaling the analytic gradient must make the
check fail.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .network import CaptionModel
from .training import Batch, batch_loss


@dataclass
class GradCheckEntry:
    group: str
    param: str
    flat_index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tol: float
    max_rel_err: float = 0.0
    per_group_max: dict = field(default_factory=dict)
    failures: list[GradCheckEntry] = field(default_factory=list)
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "tol": self.tol,
            "max_rel_err": self.max_rel_err,
            "per_group_max": self.per_group_max,
            "n_checked": self.n_checked,
            "passed": self.passed,
            "failures": [
                {"group": f.group, "param": f.param, "index": f.flat_index,
                 "analytic": f.analytic, "numeric": f.numeric, "rel_err": f.rel_err}
                for f in self.failures
            ],
        }


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def finite_diff_check(model: CaptionModel, batch: Batch, *,
                      n_samples: int = 50, h: float = 1e-3, tol: float = 1e-4,
                      seed: int = 0, grad_scale: float = 1.0) -> GradCheckReport:
    """Compare analytic gradients against central differences on n_samples
    randomly chosen scalar coordinates per parameter group."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.requires_grad_(True)
    model.zero_grad()
    loss = batch_loss(model, batch)
    loss.backward()

    report = GradCheckReport(tol=tol)
    with torch.no_grad():
        for group, params in model.parameter_groups().items():
            flat_sizes = [p.numel() for _, p in params]
            total = sum(flat_sizes)
            take = min(n_samples, total)
            coords = rng.choice(total, size=take, replace=False)
            gmax = 0.0
            for c in sorted(int(x) for x in coords):
                pi = 0
                while c >= flat_sizes[pi]:
                    c -= flat_sizes[pi]
                    pi += 1
                name, p = params[pi]
                flat = p.view(-1)
                analytic = float(p.grad.view(-1)[c]) * grad_scale
                orig = float(flat[c])

                def central(step: float) -> float:
                    flat[c] = orig + step
                    lp = float(batch_loss(model, batch))
                    flat[c] = orig - step
                    lm = float(batch_loss(model, batch))
                    flat[c] = orig
                    return (lp - lm) / (2 * step)

                # Richardson extrapolation of two central differences kills
                # the O(h^2) truncation term, which alone can exceed tol
                d_h, d_h2 = central(h), central(h / 2)
                numeric = (4.0 * d_h2 - d_h) / 3.0
                err = _rel_err(analytic, numeric)
                gmax = max(gmax, err)
                report.n_checked += 1
                if err > tol:
                    report.failures.append(GradCheckEntry(
                        group, name, c, analytic, numeric, err
                    ))
            report.per_group_max[group] = gmax
            report.max_rel_err = max(report.max_rel_err, gmax)
    return report
