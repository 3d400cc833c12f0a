"""Finite-difference verification of the model's analytic gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .model import BlockSpec, ModelSpec, build_operators, init_params, loss_and_grad

THRESHOLDS = {"double": 1e-6, "single": 1e-4}


@dataclass
class GradcheckReport:
    precision: str
    threshold: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(e < self.threshold for e in self.errors.values())

    @property
    def failed_groups(self):
        return [k for k, e in self.errors.items() if not e < self.threshold]

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    def format(self):
        lines = [f"gradcheck ({self.precision}, threshold {self.threshold:g})"]
        for k, e in self.errors.items():
            lines.append(f"  {k:<16} {e:.3e}  {'ok' if e < self.threshold else 'FAIL'}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f, x, idx, step=1e-6):
    """Central differences of scalar ``f()`` w.r.t. the flat entries ``idx`` of ``x`` (mutated and restored)."""
    flat = x.reshape(-1)
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2.0 * step)
    return out


@contextlib.contextmanager
def injected_fault(scale=2.0):
    """Scale the convolution weight gradient, to prove the checker notices."""
    old = layers.CONV_WEIGHT_GRAD_SCALE
    layers.CONV_WEIGHT_GRAD_SCALE = scale
    try:
        yield
    finally:
        layers.CONV_WEIGHT_GRAD_SCALE = old


def small_spec(kind="vertex", input_level=2):
    """Two-block version of the default architecture that fits a level-2 input."""
    order = 1 if kind == "vertex" else 3
    return ModelSpec(
        blocks=(BlockSpec(8, k=order, pool="mean"), BlockSpec(16, k=order, pool="max")),
        fc_nodes=16,
        n_classes=2,
        input_level=input_level,
        kind=kind,
    )


def gradcheck(spec=None, hier=None, ops=None, seed=0, precision="double", params=None,
              batch=2, samples_per_group=12, step=1e-6, fc_l2=5e-4):
    """Compare analytic and central-difference gradients per parameter group and for the input.

    Up to ``samples_per_group`` randomly chosen entries of each group are
    perturbed. Finite differences are always evaluated in double precision;
    in single precision mode the analytic pass runs in float32.
    """
    from ..hierarchy import icosphere

    if precision not in THRESHOLDS:
        raise ValueError(f"precision must be one of {sorted(THRESHOLDS)}")
    if hier is None:
        hier = icosphere(2)
    spec = spec or small_spec(input_level=min(2, hier.depth))
    ops = ops or build_operators(spec, hier)
    rng = np.random.default_rng(seed)
    params64 = params.astype(np.float64) if params is not None else init_params(spec, hier, seed=seed)
    n_in = hier.levels[spec.input_level].n_vertices
    x64 = rng.standard_normal((batch, n_in, spec.in_channels))
    labels = rng.integers(0, spec.n_classes, size=batch)

    dtype = np.float32 if precision == "single" else np.float64
    p_an = params64.astype(dtype)
    _, _, grads = loss_and_grad(spec, p_an, ops, x64.astype(dtype), labels, fc_l2=fc_l2, want_input_grad=True)

    def loss():
        return loss_and_grad(spec, params64, ops, x64, labels, fc_l2=fc_l2)[0]

    report = GradcheckReport(precision=precision, threshold=THRESHOLDS[precision])
    groups = dict(params64.named())
    groups["input"] = x64
    for name, arr in groups.items():
        size = arr.size
        idx = rng.choice(size, size=min(samples_per_group, size), replace=False)
        num = numeric_grad(loss, arr, idx, step)
        ana = np.asarray(grads[name]).reshape(-1)[idx]
        report.errors[name] = relative_error(ana, num)
    return report
