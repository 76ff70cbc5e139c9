"""Per-inference operation counts and energy estimates.

Counting convention (everything lives in :func:`normalization_cost` and the
per-layer op counters in :mod:`tensor_nn`):

* conv / dense: one multiplication per product with a nonzero weight; each
  output element accumulates its ``n`` products with ``n`` adds when a bias is
  present and ``n - 1`` otherwise. Positions created by "same" padding are
  counted like any other input.
* binarized weights turn every product into a sign flip, so the products move
  into the additions and only normalization multiplies remain.
* per-window standardization of the raw window: 1 mult + 1 add per sample.
* input batch norm: 1 mult + 1 add per element (folded scale and shift).
* batch norm ahead of the dense head: 2 mults + 2 adds per element
  (normalize, then scale and shift); binarized models fold it to 1 + 1.
* max pooling, ReLU, dropout (identity at inference) and the final softmax
  are not priced.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor_nn as nn
from .model_zoo import Model, count_params


@dataclass(frozen=True)
class EnergyModel:
    mac_energy: float = 0.39e-12  # joules per 16-bit multiply-accumulate
    add_energy: float = 20e-15  # joules per 16-bit addition

    def __post_init__(self):
        if self.mac_energy <= 0 or self.add_energy <= 0:
            raise ValueError("energy constants must be strictly positive")


DEFAULT_ENERGY = EnergyModel()


@dataclass(frozen=True)
class LayerCost:
    name: str
    multiplications: int
    additions: int


@dataclass(frozen=True)
class CostReport:
    multiplications: int
    additions: int
    total_params: int
    nonzero_params: int
    energy_joules: float
    name: str = ""
    layers: tuple[LayerCost, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if min(self.multiplications, self.additions, self.nonzero_params) < 0:
            raise ValueError("counts must be non-negative")
        if self.nonzero_params > self.total_params:
            raise ValueError("nonzero_params exceeds total_params")


def estimate_energy(report, energy: EnergyModel = DEFAULT_ENERGY) -> float:
    """Joules: multiplications priced as MACs plus the surplus additions at the add price.

    ``report`` may be a :class:`CostReport` or a ``(multiplications, additions)`` pair.
    """
    mults, adds = (report.multiplications, report.additions) if hasattr(report, "multiplications") else report
    if mults < 0 or adds < 0:
        raise ValueError("counts must be non-negative")
    return mults * energy.mac_energy + max(0, adds - mults) * energy.add_energy


def normalization_cost(kind: str, elements: int, binarized: bool) -> nn.OpCount:
    """Multiplications and additions of a normalization step over ``elements`` values."""
    if kind in ("standardize", "input_bn"):
        return nn.OpCount(elements, elements)
    if kind == "head_bn":
        per = 1 if binarized else 2
        return nn.OpCount(per * elements, per * elements)
    raise ValueError(f"unknown normalization kind {kind!r}")


def _layer_costs(model: Model) -> list[LayerCost]:
    binarized = model.mode == "binarized"
    cfg = model.config
    costs = [LayerCost("standardize", *normalization_cost("standardize", cfg.input_len, binarized))]
    for spec in model.plan:
        if spec.kind in ("input_bn", "head_bn"):
            op = normalization_cost(spec.kind, int(np.prod(spec.in_shape)), binarized)
        elif spec.kind == "conv":
            op = nn.conv1d_op_count(model._conv_state(spec), spec.in_shape[1], binary_weights=binarized)
        elif spec.kind == "dense":
            op = nn.dense_op_count(model.params[spec.name + ".weight"], spec.name + ".bias" in model.params, binarized)
        else:
            continue
        costs.append(LayerCost(spec.name, int(op.multiplications), int(op.additions)))
    return costs


def count_ops(model: Model, energy: EnergyModel = DEFAULT_ENERGY) -> CostReport:
    """Analytic operation counts for classifying one window (one second of signal)."""
    layers = _layer_costs(model)
    mults = sum(c.multiplications for c in layers)
    adds = sum(c.additions for c in layers)
    total, nonzero = count_params(model)
    return CostReport(mults, adds, total, nonzero, estimate_energy((mults, adds), energy), model.config.name,
                      tuple(layers))


def enumerate_ops(model: Model) -> nn.OpCount:
    """Brute-force count by walking every output element and every weight tap.

    Slow (pure Python loops); meant for cross-checking :func:`count_ops` on
    small models.
    """
    binarized = model.mode == "binarized"
    mults = adds = 0

    def accumulate(weights_per_output, n_outputs, has_bias):
        nonlocal mults, adds
        for _ in range(n_outputs):
            for taps in weights_per_output:
                terms = 1 if has_bias else 0
                for w in taps:
                    if w != 0.0:
                        if not binarized:
                            mults += 1
                        if terms:
                            adds += 1
                        terms += 1

    for name, elements in [("standardize", model.config.input_len)] + [
        (s.kind, int(np.prod(s.in_shape))) for s in model.plan if s.kind in ("input_bn", "head_bn")
    ]:
        for _ in range(elements):
            op = normalization_cost(name, 1, binarized)
            mults += op.multiplications
            adds += op.additions
    for spec in model.plan:
        if spec.kind == "conv":
            k = model.params[spec.name + ".kernel"]
            rows = [k[o].reshape(-1).tolist() for o in range(k.shape[0])]
            accumulate(rows, spec.out_shape[1] if len(spec.out_shape) > 1 else 1, spec.name + ".bias" in model.params)
        elif spec.kind == "dense":
            w = model.params[spec.name + ".weight"]
            accumulate([w[:, u].tolist() for u in range(w.shape[1])], 1, spec.name + ".bias" in model.params)
    return nn.OpCount(mults, adds)


# ---------------------------------------------------------------------------
# Reference values and tables
# ---------------------------------------------------------------------------

# name -> (nonzero params, multiplications, additions, energy in microjoules)
REFERENCE_COSTS = {
    "M1": (50_909, 6_534_116, 6_546_647, 2.55),
    "M2-50%": (25_559, 3_270_416, 3_289_663, 1.28),
    "M2-60%": (20_489, 2_617_676, 2_630_207, 1.03),
    "M2-70%": (14_247, 1_964_936, 1_977_467, 0.77),
    "M2-80%": (10_349, 1_312_232, 1_324_763, 0.52),
    "M3": (50_824, 4_766, 6_301_530, 0.13),
    "M4": (17_959, 708_116, 717_197, 0.28),
}

COLUMNS = ("model", "net_parameters", "multiplications", "additions", "energy_uj")


def _rows(reports) -> list[tuple]:
    return [
        (r.name, r.nonzero_params, r.multiplications, r.additions, f"{r.energy_joules * 1e6:.2f}") for r in reports
    ]


def report_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    writer.writerows(_rows(reports))
    return buf.getvalue()


def report_table(reports, fmt: str = "text") -> str:
    """Net parameters, multiplications, additions and energy, one row per report."""
    if fmt == "csv":
        return report_csv(reports)
    if fmt != "text":
        raise ValueError(f"unknown table format {fmt!r}")
    header = ("Model", "Net Parameters", "Multiplications", "Additions", "Energy (uJ)")
    body = [(name, f"{p:,}", f"{m:,}", f"{a:,}", e) for name, p, m, a, e in _rows(reports)]
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    lines = []
    for row in [header, *body]:
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> list[tuple]:
    """Inverse of the text layout, for round-trip checks: rows of (name, params, mults, adds, energy)."""
    rows = []
    for line in text.strip().splitlines()[2:]:
        parts = line.split()
        rows.append((parts[0], *(int(p.replace(",", "")) for p in parts[1:4]), parts[4]))
    return rows
