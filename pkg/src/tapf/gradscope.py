"""Per-component gradient norms and the variance-of-norms stability statistic."""

import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

ALL = "all"


@dataclass
class NormRecord:
    step: int
    component: str
    tensor_name: str
    grad_norm: float
    missing: bool = False


def capture(params, components, step=0, require_backward=True):
    """L2 norm of every trainable tensor's gradient, tagged with its component.

    A tensor without a gradient is recorded as norm 0 with ``missing=True``.
    If no trainable tensor has a gradient, backward has not run yet and a
    ContractError is raised (unless ``require_backward`` is False).
    """
    records = []
    for name, t in params.items():
        if not t.requires_grad:
            continue
        if t.grad is None:
            records.append(NormRecord(step, components[name], name, 0.0, True))
        else:
            g = np.asarray(t.grad, dtype=np.float64)
            records.append(NormRecord(step, components[name], name, float(np.sqrt((g * g).sum()))))
    if require_backward and records and all(r.missing for r in records):
        raise ContractError("capture called before backward: no parameter has a gradient")
    return records


def gradient_variance(norms):
    """Population variance (divide by N) of a list of gradient norms."""
    norms = np.asarray(list(norms), dtype=np.float64)
    if norms.size == 0:
        raise ContractError("gradient_variance needs at least one norm")
    return float(np.mean((norms - norms.mean()) ** 2))


def trend_slope(series, tail_fraction):
    """OLS slope of ``(step, value)`` pairs over the last ``tail_fraction`` of the series."""
    series = sorted((float(s), float(v)) for s, v in series)
    if not 0 < tail_fraction <= 1:
        raise ContractError(f"tail fraction must lie in (0, 1], got {tail_fraction}")
    n = int(np.ceil(len(series) * tail_fraction))
    tail = series[len(series) - n:] if n else []
    if len(tail) < 2:
        raise ContractError(f"tail window holds {len(tail)} point(s); a slope needs at least 2")
    x = np.array([s for s, _ in tail])
    y = np.array([v for _, v in tail])
    x = x - x.mean()
    denom = (x * x).sum()
    if denom == 0:
        raise ContractError("tail window has a single distinct step")
    return float((x * (y - y.mean())).sum() / denom)


@dataclass
class GradTrace:
    records: list = field(default_factory=list)

    def add(self, records):
        self.records.extend(records)

    def steps(self):
        return sorted({r.step for r in self.records})

    def variances(self):
        """{(step, component): variance}, with the pooled set of all tensors under ``"all"``."""
        groups = defaultdict(list)
        for r in self.records:
            groups[(r.step, r.component)].append(r.grad_norm)
            groups[(r.step, ALL)].append(r.grad_norm)
        return {k: gradient_variance(v) for k, v in sorted(groups.items())}

    def variance_series(self, component=ALL):
        return [(s, v) for (s, c), v in self.variances().items() if c == component]

    def components(self):
        return sorted({r.component for r in self.records}) + [ALL]

    def slopes(self, tail_fraction):
        return {c: trend_slope(self.variance_series(c), tail_fraction) for c in self.components()}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "component", "tensor_name", "grad_norm"])
            for r in self.records:
                w.writerow([r.step, r.component, r.tensor_name, repr(r.grad_norm)])

    def write_summary_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "component", "variance"])
            for (s, c), v in self.variances().items():
                w.writerow([s, c, repr(v)])

    @classmethod
    def read_csv(cls, path):
        trace = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                trace.records.append(NormRecord(int(row["step"]), row["component"], row["tensor_name"],
                                                float(row["grad_norm"])))
        return trace
