"""Weight importance, mask generation, and the pruning pipelines.

Unstructured pruning composes: calibration pass (activation capture) ->
token selection -> per-channel input activation norms -> importance
(|W| or norms * |W|) -> per-group mask at the planned ratio. Masks are
computed for every layer first, then committed, so a failure never
leaves a half-masked model. Structural pruning removes whole blocks by
importance.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .allocation import (SparsityPlan, allocate_blockwise_das, allocate_das,
                         allocate_owl, allocate_uniform, owl_outlier_ratio)
from .diversity import DiversityAccumulator, DiversityStats, block_input_output_similarity
from .errors import ConfigError, InsufficientTokensError, ShapeError
from .model import PROJECTION_KINDS, CaptureFlags, TokenSequence, ToyModel, forward
from .selection import AmiaParams, select_amia, select_variant, token_contributions

PRUNE_METHODS = ("magnitude", "wanda", "owl", "das", "das_alltoken", "das_blockwise", "amia", "tamp")
MASK_GROUPS = ("per_output_row", "per_layer")


@dataclass(frozen=True)
class MethodSpec:
    allocator: str
    importance: str
    selection: str


METHOD_SPECS = {
    "magnitude": MethodSpec("uniform", "magnitude", "full"),
    "wanda": MethodSpec("uniform", "wanda", "full"),
    "owl": MethodSpec("owl", "wanda", "full"),
    "das": MethodSpec("das", "wanda", "full"),
    "das_alltoken": MethodSpec("das_alltoken", "wanda", "full"),
    "das_blockwise": MethodSpec("das_blockwise", "wanda", "full"),
    "amia": MethodSpec("uniform", "wanda", "amia"),
    "tamp": MethodSpec("das", "wanda", "amia"),
}


@dataclass
class InputActivation:
    """Per-input-channel l2 norms over the selected calibration tokens."""

    norms: np.ndarray
    token_count: int
    selection_kind: str


def input_activation(rows: np.ndarray, selection_kind: str = "full") -> InputActivation:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise InsufficientTokensError(f"input activation needs >= 1 token row, got shape {rows.shape}")
    return InputActivation(np.sqrt(np.square(rows).sum(axis=0)), rows.shape[0], selection_kind)


def importance_magnitude(weight: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(weight, dtype=np.float64))


def importance_wanda(weight: np.ndarray, act: InputActivation) -> np.ndarray:
    weight = np.asarray(weight, dtype=np.float64)
    if act.norms.shape != (weight.shape[1],):
        raise ShapeError(f"activation length {act.norms.shape} != C_in {weight.shape[1]}")
    return act.norms[None, :] * np.abs(weight)


@dataclass
class PruneMask:
    keep: np.ndarray
    achieved_ratio: float


def make_mask(importance: np.ndarray, ratio: float, group: str = "per_output_row") -> PruneMask:
    """Drop the floor(ratio * group_size) smallest-importance entries per group.

    Ties are broken by dropping the lower flattened index first, so drop
    sets are nested across ratios.
    """
    if not (0.0 <= ratio <= 1.0):
        raise ConfigError(f"ratio must be in [0, 1], got {ratio}")
    if group not in MASK_GROUPS:
        raise ConfigError(f"unknown comparison group {group!r}")
    importance = np.asarray(importance, dtype=np.float64)
    keep = np.ones(importance.shape, dtype=bool)
    if group == "per_output_row":
        n_drop = int(ratio * importance.shape[1])
        if n_drop:
            order = np.argsort(importance, axis=1, kind="stable")[:, :n_drop]
            keep[np.arange(importance.shape[0])[:, None], order] = False
    else:
        n_drop = int(ratio * importance.size)
        if n_drop:
            order = np.argsort(importance.ravel(), kind="stable")[:n_drop]
            keep.ravel()[order] = False
    achieved = float((~keep).sum()) / keep.size
    return PruneMask(keep, achieved)


# ---------------------------------------------------------------------------
# calibration passes


@dataclass
class PruneConfig:
    method: str = "tamp"
    sparsity: float = 0.5
    lam: float = 0.1
    owl_lam: float = 0.08
    owl_m: float = 5.0
    group: str = "per_output_row"
    selection: str | None = None
    amia: AmiaParams = AmiaParams()
    random_count: int = 100
    max_pairs: int | None = None
    seed: int = 0
    threads: int = 1
    sequential: bool = False

    def resolved_selection(self) -> str:
        return self.selection or METHOD_SPECS[self.method].selection


@dataclass
class LayerSelectionStats:
    threshold: float | None = None
    token_total: int = 0
    selected_total: int = 0
    by_modality: dict[str, int] = field(default_factory=dict)
    stopped_by: dict[str, int] = field(default_factory=dict)
    final_mmd_sum: float = 0.0
    samples: int = 0

    def mean_final_mmd(self) -> float | None:
        return self.final_mmd_sum / self.samples if self.samples else None


def _map_samples(fn, seqs, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            yield from pool.map(fn, range(len(seqs)), seqs)
    else:
        for i, seq in enumerate(seqs):
            yield fn(i, seq)


def compute_diversity_stats(model: ToyModel, seqs: list[TokenSequence], *,
                            max_pairs: int | None = None, seed: int = 0,
                            threads: int = 1) -> dict[tuple[int, str], DiversityStats]:
    """One streaming calibration pass accumulating per-layer diversity terms."""
    acc = DiversityAccumulator(max_pairs=max_pairs, seed=seed)
    capture = CaptureFlags(outputs=True)

    def run(index: int, seq: TokenSequence):
        _, trace = forward(model, seq, capture)
        return trace

    for trace in _map_samples(run, seqs, threads):
        acc.begin_sample()
        for key, z in trace.layer_outputs.items():
            acc.add_layer_sample(key, z, trace.spans)
    return acc.finalize()


def _select_for_layer(key: tuple[int, str], trace, kind: str, config: PruneConfig,
                      sample_index: int, thresholds: dict | None):
    """Returns (indices, SelectionResult | None) for one layer of one sample."""
    block, layer_kind = key
    x = trace.layer_inputs[key]  # any N-row matrix works for the non-amia kinds
    n = x.shape[0]
    if kind == "full":
        return np.arange(n), None
    if kind == "random":
        rng = np.random.default_rng(np.random.SeedSequence(
            [config.seed, 7701, sample_index, block, PROJECTION_KINDS.index(layer_kind)]))
        return select_variant("random", None, x, rng=rng, random_count=config.random_count), None
    a = token_contributions(trace.attention[block])
    if kind == "attention":
        return select_variant("attention", a, x), None
    if kind == "amia":
        if n <= config.amia.k:
            return np.arange(n), None  # too few tokens for a kNN graph
        z = trace.layer_outputs[key]
        threshold = thresholds[key]
        result = select_amia(a, z, threshold, config.amia)
        return result.selected, result
    raise ConfigError(f"unknown selection kind {kind!r}")


def collect_activations(model: ToyModel, seqs: list[TokenSequence], kind: str,
                        config: PruneConfig, thresholds: dict | None = None,
                        blocks: frozenset[int] | None = None):
    """Streaming pass: select tokens per (layer, sample) and accumulate
    per-channel squared sums. Returns (activations, selection stats)."""
    capture = CaptureFlags(
        inputs=True,
        outputs=(kind == "amia"),
        attention=kind in ("attention", "amia"),
        blocks=blocks,
    )

    def run(index: int, seq: TokenSequence):
        _, trace = forward(model, seq, capture)
        partial = {}
        for key in trace.layer_inputs:
            indices, result = _select_for_layer(key, trace, kind, config, index, thresholds)
            x = trace.layer_inputs[key][indices].astype(np.float64)
            by_mod = {}
            for span in trace.spans:
                count = int(((indices >= span.start) & (indices < span.stop)).sum())
                by_mod[span.modality.name] = by_mod.get(span.modality.name, 0) + count
            partial[key] = (np.square(x).sum(axis=0), len(indices), len(seq), by_mod, result)
        return partial

    sq_sums: dict[tuple[int, str], np.ndarray] = {}
    stats: dict[tuple[int, str], LayerSelectionStats] = {}
    counts: dict[tuple[int, str], int] = {}
    for partial in _map_samples(run, seqs, config.threads):
        for key, (sq, n_sel, n_tok, by_mod, result) in partial.items():
            if key not in sq_sums:
                sq_sums[key] = np.zeros_like(sq)
                stats[key] = LayerSelectionStats(
                    threshold=thresholds.get(key) if thresholds else None)
                counts[key] = 0
            sq_sums[key] += sq
            counts[key] += n_sel
            entry = stats[key]
            entry.token_total += n_tok
            entry.selected_total += n_sel
            for name, c in by_mod.items():
                entry.by_modality[name] = entry.by_modality.get(name, 0) + c
            if result is not None:
                entry.stopped_by[result.stopped_by] = entry.stopped_by.get(result.stopped_by, 0) + 1
                entry.final_mmd_sum += result.mmd_trace[-1]
                entry.samples += 1

    activations = {
        key: InputActivation(np.sqrt(sq), counts[key], kind) for key, sq in sq_sums.items()
    }
    return activations, stats


# ---------------------------------------------------------------------------
# unstructured pruning pipeline


@dataclass
class PruneReport:
    method: str
    selection: str
    group: str
    seed: int
    plan: SparsityPlan
    achieved: dict[tuple[int, str], float]
    global_achieved: float
    diversity: dict[tuple[int, str], DiversityStats] | None = None
    selection_stats: dict[tuple[int, str], LayerSelectionStats] | None = None
    owl_ratios: dict[tuple[int, str], float] | None = None

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "selection": self.selection,
            "group": self.group,
            "seed": self.seed,
            "target": self.plan.target,
            "lambda": self.plan.lam,
            "global_achieved": self.global_achieved,
            "layers": [],
        }
        ratios = self.plan.ratios()
        for key in sorted(self.achieved):
            record = {
                "layer": f"{key[0]}:{key[1]}",
                "planned": ratios[key],
                "achieved": self.achieved[key],
            }
            if self.diversity and key in self.diversity:
                stats = self.diversity[key]
                record["importance"] = stats.importance
                record["intra"] = dict(sorted(stats.intra.items()))
                record["inter"] = {f"{a}|{b}": v for (a, b), v in sorted(stats.inter.items())}
            if self.selection_stats and key in self.selection_stats:
                sel = self.selection_stats[key]
                record["selected_total"] = sel.selected_total
                record["token_total"] = sel.token_total
                record["selected_by_modality"] = dict(sorted(sel.by_modality.items()))
                if sel.samples:
                    record["stopped_by"] = dict(sorted(sel.stopped_by.items()))
                    record["mean_final_mmd"] = sel.mean_final_mmd()
                    record["mmd_threshold"] = sel.threshold
            if self.owl_ratios and key in self.owl_ratios:
                record["outlier_ratio"] = self.owl_ratios[key]
            out["layers"].append(record)
        return out


def _build_plan(model: ToyModel, config: PruneConfig, stats, norms) -> tuple[SparsityPlan, dict | None]:
    allocator = METHOD_SPECS[config.method].allocator
    param_counts = model.param_counts()
    if allocator == "uniform":
        return allocate_uniform(param_counts, config.sparsity), None
    if allocator == "das":
        importances = {key: stats[key].importance for key in param_counts}
        return allocate_das(importances, param_counts, config.sparsity, config.lam), None
    if allocator == "das_alltoken":
        importances = {key: stats[key].all_token for key in param_counts}
        return allocate_das(importances, param_counts, config.sparsity, config.lam), None
    if allocator == "das_blockwise":
        importances = {key: stats[key].importance for key in param_counts}
        return allocate_blockwise_das(importances, param_counts, config.sparsity, config.lam), None
    if allocator == "owl":
        ratios = {}
        for layer in model.iter_layers():
            key = (layer.block_index, layer.kind)
            score = importance_wanda(layer.weight, norms[key])
            ratios[key] = owl_outlier_ratio(score, config.owl_m)
        return allocate_owl(ratios, param_counts, config.sparsity, config.owl_lam), ratios
    raise ConfigError(f"unknown allocator {allocator!r}")


def prune_model(model: ToyModel, seqs: list[TokenSequence], config: PruneConfig,
                plan: SparsityPlan | None = None) -> tuple[ToyModel, PruneReport]:
    """Run the full unstructured pipeline; returns (masked copy, report)."""
    if config.method not in METHOD_SPECS:
        raise ConfigError(f"unknown method {config.method!r}")
    if not seqs:
        raise ConfigError("pruning requires at least one calibration sequence")
    spec = METHOD_SPECS[config.method]
    selection = config.resolved_selection()

    needs_diversity = spec.allocator.startswith("das") or selection == "amia"
    stats = None
    thresholds = None
    if needs_diversity:
        stats = compute_diversity_stats(model, seqs, max_pairs=config.max_pairs,
                                        seed=config.seed, threads=config.threads)
        if selection == "amia":
            thresholds = {key: config.amia.mmd_coefficient * float(np.sqrt(st.importance))
                          for key, st in stats.items()}

    needs_norms = spec.importance == "wanda" or spec.allocator == "owl"
    norms = None
    sel_stats = None
    if needs_norms and (spec.allocator == "owl" or not config.sequential):
        norms, sel_stats = collect_activations(model, seqs, selection, config, thresholds)

    if plan is None:
        plan, owl_ratios = _build_plan(model, config, stats, norms)
    else:
        owl_ratios = None
    plan_ratios = plan.ratios()
    missing = [key for key in model.param_counts() if key not in plan_ratios]
    if missing:
        raise ConfigError(f"plan does not cover layers: {missing}")

    pruned = model.copy()
    achieved: dict[tuple[int, str], float] = {}

    if config.sequential and spec.importance == "wanda":
        # Recompute activations on the progressively masked prefix, block by block.
        sel_stats = {}
        for block in pruned.blocks:
            block_norms, block_stats = collect_activations(
                pruned, seqs, selection, config, thresholds, blocks=frozenset({block.index}))
            sel_stats.update(block_stats)
            masks = {}
            for kind in PROJECTION_KINDS:
                layer = block.layers[kind]
                key = (block.index, kind)
                score = importance_wanda(layer.weight, block_norms[key])
                masks[key] = make_mask(score, plan_ratios[key], config.group)
            for kind in PROJECTION_KINDS:
                key = (block.index, kind)
                layer = block.layers[kind]
                layer.mask = masks[key].keep
                layer.apply_mask()
                achieved[key] = masks[key].achieved_ratio
    else:
        masks = {}
        for layer in pruned.iter_layers():
            key = (layer.block_index, layer.kind)
            if spec.importance == "magnitude":
                score = importance_magnitude(layer.weight)
            else:
                score = importance_wanda(layer.weight, norms[key])
            masks[key] = make_mask(score, plan_ratios[key], config.group)
        # commit only after every mask is built
        for layer in pruned.iter_layers():
            key = (layer.block_index, layer.kind)
            layer.mask = masks[key].keep
            layer.apply_mask()
            achieved[key] = masks[key].achieved_ratio

    total = sum(model.param_counts().values())
    global_achieved = sum(achieved[key] * count for key, count in model.param_counts().items()) / total
    report = PruneReport(
        method=config.method,
        selection=selection,
        group=config.group,
        seed=config.seed,
        plan=plan,
        achieved=achieved,
        global_achieved=global_achieved,
        diversity=stats,
        selection_stats=sel_stats,
        owl_ratios=owl_ratios,
    )
    return pruned, report


def collect_selection_records(model: ToyModel, seqs: list[TokenSequence],
                              config: PruneConfig) -> list[dict]:
    """Per (sample, layer) selection details backing the analysis CSV."""
    selection = config.resolved_selection()
    stats = compute_diversity_stats(model, seqs, max_pairs=config.max_pairs,
                                    seed=config.seed, threads=config.threads)
    thresholds = {key: config.amia.mmd_coefficient * float(np.sqrt(st.importance))
                  for key, st in stats.items()}
    capture = CaptureFlags(inputs=True, outputs=True, attention=True)
    records = []
    for index, seq in enumerate(seqs):
        _, trace = forward(model, seq, capture)
        for key in sorted(trace.layer_outputs):
            indices, result = _select_for_layer(key, trace, selection, config, index, thresholds)
            by_mod = {
                span.modality.name: int(((indices >= span.start) & (indices < span.stop)).sum())
                for span in trace.spans
            }
            record = {
                "sample": index,
                "block": key[0],
                "kind": key[1],
                "n_tokens": len(seq),
                "n_selected": int(len(indices)),
                "by_modality": by_mod,
            }
            if result is not None:
                record["stopped_by"] = result.stopped_by
                record["threshold"] = result.threshold
                record["mmd_trace"] = [float(v) for v in result.mmd_trace]
            records.append(record)
    return records


# ---------------------------------------------------------------------------
# structural (block) pruning


def blocks_to_remove(importances: dict[int, float], ratio: float) -> list[int]:
    """Indices of the floor(ratio * n) lowest-importance blocks; ties drop the
    deeper block first."""
    n = len(importances)
    if not (0.0 <= ratio <= 1.0):
        raise ConfigError(f"block ratio must be in [0, 1], got {ratio}")
    n_remove = int(ratio * n)
    if n_remove >= n:
        raise ConfigError(f"removing {n_remove} of {n} blocks would leave no model")
    order = sorted(importances, key=lambda b: (importances[b], -b))
    return sorted(order[:n_remove])


def block_prune(model: ToyModel, importances: dict[int, float], ratio: float) -> ToyModel:
    if set(importances) != set(range(model.n_blocks)):
        raise ConfigError("block importances must cover every block index")
    removed = set(blocks_to_remove(importances, ratio))
    reduced = model.copy()
    survivors = [block for block in reduced.blocks if block.index not in removed]
    for new_index, block in enumerate(survivors):
        block.index = new_index
        for kind in PROJECTION_KINDS:
            block.layers[kind].block_index = new_index
    return ToyModel(survivors, model.n_heads, model.d_model, model.d_ff, model.seed)


def block_importances_shortgpt(model: ToyModel, seqs: list[TokenSequence],
                               threads: int = 1) -> dict[int, float]:
    """1 - mean cosine similarity between each block's input and output rows."""
    capture = CaptureFlags(hiddens=True)

    def run(index: int, seq: TokenSequence):
        _, trace = forward(model, seq, capture)
        return [block_input_output_similarity(trace.hiddens[b], trace.hiddens[b + 1])
                for b in range(model.n_blocks)]

    sums = np.zeros(model.n_blocks)
    count = 0
    for sims in _map_samples(run, seqs, threads):
        sums += np.asarray(sims)
        count += 1
    return {b: float(1.0 - sums[b] / count) for b in range(model.n_blocks)}


def block_importances_das(stats: dict[tuple[int, str], DiversityStats]) -> dict[int, float]:
    """Mean diversity importance of each block's projection layers."""
    terms: dict[int, list[float]] = {}
    for (block, _kind), st in stats.items():
        terms.setdefault(block, []).append(st.importance)
    return {block: float(np.mean(values)) for block, values in sorted(terms.items())}
