"""Per-layer sparsity allocation under a parameter-weighted global budget.

Importance scores are min-max normalized to [0, 1] and mapped through a
bounded affine deviation `ratio = target + lam * (1 - 2 * s_hat)`, so more
important layers get at most the sparsity of less important ones. A
water-filling pass shifts all unclamped ratios by a common offset until
the parameter-weighted mean hits the target exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InfeasibleBudgetError

BUDGET_TOL = 1e-12


@dataclass(frozen=True)
class PlanEntry:
    layer: object
    param_count: int
    ratio: float


@dataclass
class SparsityPlan:
    target: float
    lam: float
    entries: list[PlanEntry]

    def ratio_for(self, layer) -> float:
        for entry in self.entries:
            if entry.layer == layer:
                return entry.ratio
        raise KeyError(f"plan has no entry for layer {layer!r}")

    def ratios(self) -> dict:
        return {entry.layer: entry.ratio for entry in self.entries}

    def weighted_mean(self) -> float:
        total = sum(e.param_count for e in self.entries)
        return sum(e.param_count * e.ratio for e in self.entries) / total

    def validate(self) -> None:
        for entry in self.entries:
            if not (0.0 <= entry.ratio <= 1.0):
                raise ConfigError(f"layer {entry.layer!r} ratio {entry.ratio} outside [0, 1]")
        if abs(self.weighted_mean() - self.target) > 1e-9:
            raise ConfigError(f"plan misses target: {self.weighted_mean()} != {self.target}")

    def to_json(self, path: str | Path) -> None:
        payload = {
            "target": self.target,
            "lambda": self.lam,
            "entries": [
                {"layer": _layer_str(e.layer), "param_count": e.param_count, "ratio": e.ratio}
                for e in self.entries
            ],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "SparsityPlan":
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        entries = [
            PlanEntry(_layer_from_str(e["layer"]), e["param_count"], e["ratio"])
            for e in payload["entries"]
        ]
        return cls(payload["target"], payload["lambda"], entries)


def _layer_str(layer) -> str:
    if isinstance(layer, tuple):
        return ":".join(str(part) for part in layer)
    return str(layer)


def _layer_from_str(text: str):
    if ":" in text:
        block, kind = text.split(":", 1)
        return (int(block), kind)
    return text


def _validate_budget_args(target: float, lam: float) -> None:
    if not (0.0 < target < 1.0):
        raise ConfigError(f"sparsity target must be in (0, 1), got {target}")
    if lam < 0.0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")


def _waterfill(raw: dict, param_counts: dict, target: float, lam: float) -> SparsityPlan:
    """Shift all ratios by a common offset until the budget is exact.

    The weighted mean of clip(raw + delta, 0, 1) is continuous and
    nondecreasing in delta, running from 0 to 1, so any target in (0, 1)
    has a solution: bracketed bisection finds the segment, a Newton step
    on the unclamped set lands on the target exactly.
    """
    layers = list(raw)
    counts = np.array([param_counts[l] for l in layers], dtype=np.float64)
    base = np.array([raw[l] for l in layers], dtype=np.float64)
    total = counts.sum()

    def mean_at(delta: float) -> float:
        return float(counts @ np.clip(base + delta, 0.0, 1.0)) / total

    lo = float(-base.max())        # everything clamps to 0
    hi = float(1.0 - base.min())   # everything clamps to 1
    delta = 0.0
    for _ in range(200):
        delta = 0.5 * (lo + hi)
        if mean_at(delta) < target:
            lo = delta
        else:
            hi = delta
    for _ in range(len(layers) + 2):
        residual = target - mean_at(delta)
        if abs(residual) <= BUDGET_TOL:
            break
        free = (base + delta > 0.0) & (base + delta < 1.0)
        if not free.any():
            break
        delta += residual * total / float(counts[free].sum())

    ratios = np.clip(base + delta, 0.0, 1.0)
    if abs(target - float(counts @ ratios) / total) > BUDGET_TOL:
        binding = [l for l, r in zip(layers, ratios) if r in (0.0, 1.0)]
        raise InfeasibleBudgetError(f"budget solve failed for target {target}", binding)
    plan = SparsityPlan(target, lam, [
        PlanEntry(l, int(param_counts[l]), float(r)) for l, r in zip(layers, ratios)
    ])
    plan.validate()
    return plan


def _allocate_inverse(importances: dict, param_counts: dict, target: float, lam: float) -> SparsityPlan:
    _validate_budget_args(target, lam)
    if not importances:
        raise ConfigError("no layers to allocate")
    values = np.array(list(importances.values()), dtype=np.float64)
    if not np.isfinite(values).all() or (values < 0).any():
        raise ConfigError("importances must be finite and >= 0")
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        s_hat = {layer: 0.5 for layer in importances}
    else:
        s_hat = {layer: (value - lo) / (hi - lo) for layer, value in importances.items()}
    raw = {layer: target + lam * (1.0 - 2.0 * s_hat[layer]) for layer in importances}
    return _waterfill(raw, param_counts, target, lam)


def allocate_das(importances: dict, param_counts: dict, target: float, lam: float = 0.1) -> SparsityPlan:
    """Diversity-aware allocation: sparsity inverse to layer importance."""
    return _allocate_inverse(importances, param_counts, target, lam)


def allocate_blockwise_das(layer_importances: dict, param_counts: dict, target: float,
                           lam: float = 0.1) -> SparsityPlan:
    """Average layer importance within each block, allocate per block, and
    assign the block ratio uniformly to its layers."""
    _validate_budget_args(target, lam)
    block_terms: dict[int, list[float]] = {}
    block_counts: dict[int, int] = {}
    for (block, _kind), value in layer_importances.items():
        block_terms.setdefault(block, []).append(value)
        block_counts[block] = block_counts.get(block, 0) + param_counts[(block, _kind)]
    block_importances = {block: float(np.mean(terms)) for block, terms in block_terms.items()}
    block_plan = _allocate_inverse(block_importances, block_counts, target, lam)
    block_ratios = block_plan.ratios()
    entries = [
        PlanEntry(layer, int(param_counts[layer]), block_ratios[layer[0]])
        for layer in layer_importances
    ]
    plan = SparsityPlan(target, lam, entries)
    plan.validate()
    return plan


def allocate_uniform(param_counts: dict, target: float) -> SparsityPlan:
    if not (0.0 < target < 1.0):
        raise ConfigError(f"sparsity target must be in (0, 1), got {target}")
    if not param_counts:
        raise ConfigError("no layers to allocate")
    entries = [PlanEntry(layer, int(count), target) for layer, count in param_counts.items()]
    plan = SparsityPlan(target, 0.0, entries)
    plan.validate()
    return plan


def owl_outlier_ratio(importance: np.ndarray, m: float = 5.0) -> float:
    """Fraction of importance entries exceeding m times the mean entry."""
    if m <= 1.0:
        raise ConfigError(f"outlier multiplier must be > 1, got {m}")
    importance = np.asarray(importance, dtype=np.float64)
    if importance.size == 0:
        raise ConfigError("empty importance matrix")
    mean = float(importance.mean())
    if mean == 0.0:
        return 0.0
    return float((importance > m * mean).mean())


def allocate_owl(outlier_ratios: dict, param_counts: dict, target: float, lam: float = 0.08) -> SparsityPlan:
    """Outlier-weighted allocation: layers rich in activation outliers keep
    more parameters (same machinery as DAS with outlier ratio as importance)."""
    for layer, value in outlier_ratios.items():
        if not (0.0 <= value <= 1.0):
            raise ConfigError(f"outlier ratio for {layer!r} must be in [0, 1], got {value}")
    return _allocate_inverse(outlier_ratios, param_counts, target, lam)


def plan_is_uniform(plan: SparsityPlan, tol: float = 0.0) -> bool:
    ratios = [entry.ratio for entry in plan.entries]
    return math.isclose(min(ratios), max(ratios), abs_tol=tol) if tol else min(ratios) == max(ratios)
