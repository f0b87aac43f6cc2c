"""
Retrieval metrics and analyses over influence rankings
Precision at top-X%, macro averaging, max-influence and gap-cut statistics,
ranking curves and the component-sensitivity harness
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

import seqmodel
from corpus import NoiseManifest, ParallelExample, is_hit, perturb_punctuation
from influence import ComponentSelector, InfluenceRanking, tracin
from seqmodel import CheckpointSnapshot, TokenPair, Vocabulary

log = structlog.get_logger()

PERTURBATIONS = ('identical', 'random-source', 'random-target', 'punct-src', 'punct-trg')
PAIRING_MODES = ('random-source', 'random-target')


# ---------------------------------------------------------------------------
# Precision
# ---------------------------------------------------------------------------

def precision_at_topx(ranking: InfluenceRanking, manifest: NoiseManifest, x_percent: float,
                      target: Optional[Union[int, str]] = None) -> float:
    """
    Fraction of the top-k ranked ids that are injected noise for the probe's target

    k = max(1, floor(x_percent / 100 * len(ranking)))
    """
    if not 0 < x_percent <= 100:
        raise ValueError(f"x_percent must be in (0, 100], got {x_percent}")
    if len(ranking) == 0:
        raise ValueError(f"Ranking for probe '{ranking.probe_id}' is empty")
    target = ranking.target if target is None else target
    if target is None:
        raise ValueError("Ranking has no target pattern")
    k = max(1, int(np.floor(x_percent / 100.0 * len(ranking))))
    hits = sum(1 for ex in ranking.example_ids[:k] if is_hit(manifest.provenance.get(ex, ''), target))
    return hits / k


@dataclass
class RetrievalReport:
    variant: str
    selector: str
    direction: str
    top_x: List[float]
    per_probe: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)
    per_pattern: Dict[str, List[float]] = field(default_factory=dict)
    macro: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'variant': self.variant,
            'selector': self.selector,
            'direction': self.direction,
            'top_x': list(self.top_x),
            'per_probe': self.per_probe,
            'per_pattern': self.per_pattern,
            'macro': list(self.macro),
        }


def pattern_report(rankings: Sequence[InfluenceRanking], manifest: NoiseManifest,
                   top_x: Sequence[float]) -> RetrievalReport:
    """Per-probe precisions and their mean for rankings sharing one target and configuration"""
    if not rankings:
        raise ValueError("No rankings to report")
    first = rankings[0]
    target = str(first.target)
    per_probe = {r.probe_id: [precision_at_topx(r, manifest, x) for x in top_x] for r in rankings}
    mean = [float(np.mean([p[i] for p in per_probe.values()])) for i in range(len(top_x))]
    return RetrievalReport(first.variant, first.selector, first.direction, list(top_x),
                           {target: per_probe}, {target: mean}, mean)


def macro_average(reports: Sequence[RetrievalReport]) -> RetrievalReport:
    """Unweighted mean over patterns of the per-pattern probe means"""
    if not reports:
        raise ValueError("macro_average needs at least one pattern report")
    first = reports[0]
    per_probe: Dict[str, Dict[str, List[float]]] = {}
    per_pattern: Dict[str, List[float]] = {}
    for report in reports:
        per_probe.update(report.per_probe)
        per_pattern.update(report.per_pattern)
    macro = [float(np.mean([values[i] for values in per_pattern.values()])) for i in range(len(first.top_x))]
    return RetrievalReport(first.variant, first.selector, first.direction, list(first.top_x),
                           per_probe, per_pattern, macro)


def micro_average(reports: Sequence[RetrievalReport]) -> List[float]:
    """Flat mean over every probe regardless of pattern"""
    values = [p for report in reports for probes in report.per_probe.values() for p in probes.values()]
    return [float(np.mean([v[i] for v in values])) for i in range(len(reports[0].top_x))]


def retrieval_report(rankings: Sequence[InfluenceRanking], manifest: NoiseManifest,
                     top_x: Sequence[float]) -> RetrievalReport:
    by_target: Dict[str, List[InfluenceRanking]] = {}
    for ranking in rankings:
        by_target.setdefault(str(ranking.target), []).append(ranking)
    return macro_average([pattern_report(by_target[t], manifest, top_x) for t in sorted(by_target)])


def precision_grid(
    rankings: Sequence[InfluenceRanking],
    manifest: NoiseManifest,
    top_x: Sequence[float],
    matrix: Sequence[Tuple[str, str]],
    selectors: Sequence[str],
) -> Dict[str, Dict[str, Optional[RetrievalReport]]]:
    """Variant x selector grid of macro reports; None marks a configuration with no rankings"""
    grouped: Dict[Tuple[str, str, str], List[InfluenceRanking]] = {}
    for ranking in rankings:
        if len(ranking):
            grouped.setdefault((ranking.variant, ranking.direction, ranking.selector), []).append(ranking)
    grid: Dict[str, Dict[str, Optional[RetrievalReport]]] = {}
    for variant, direction in matrix:
        row = grid.setdefault(variant, {})
        for selector in selectors:
            group = grouped.get((variant, direction, selector))
            row[selector] = retrieval_report(group, manifest, top_x) if group else None
    return grid


# ---------------------------------------------------------------------------
# Thresholding
# ---------------------------------------------------------------------------

@dataclass
class ThresholdStats:
    max_influence: Dict[str, Dict[str, float]] = field(default_factory=dict)
    gap_cuts: Dict[str, Dict[str, float]] = field(default_factory=dict)
    std: str = 'population'

    def to_dict(self) -> Dict:
        return {'max_influence': self.max_influence, 'gap_cuts': self.gap_cuts, 'std': self.std}


def _mean_std(values: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {'mean': float(arr.mean()), 'std': float(arr.std()), 'n': int(arr.size)}


def max_influence_stats(groups: Mapping[str, Sequence[InfluenceRanking]]) -> ThresholdStats:
    """Mean and population std of each probe's largest score, per configuration"""
    stats = ThresholdStats()
    for label, rankings in sorted(groups.items()):
        tops = [max(r.scores) for r in rankings if len(r)]
        skipped = [r.probe_id for r in rankings if not len(r)]
        if skipped:
            log.warning("Empty rankings excluded from max-influence stats", config=label, probes=skipped)
        if not tops:
            raise ValueError(f"No scored rankings for configuration '{label}'")
        stats.max_influence[label] = _mean_std(tops)
    return stats


def largest_gap_cut(ranking: Union[InfluenceRanking, Sequence[float]]) -> int:
    """Number of items before the largest drop between consecutive scores (ties to the first)"""
    scores = ranking.scores if isinstance(ranking, InfluenceRanking) else list(ranking)
    if len(scores) < 2:
        raise ValueError("largest_gap_cut needs at least two scores")
    drops = np.asarray(scores[:-1], dtype=np.float64) - np.asarray(scores[1:], dtype=np.float64)
    return int(np.argmax(drops)) + 1


def influential_head(ranking: InfluenceRanking, n: int) -> List[float]:
    """Positive scores among the top n, in non-increasing order"""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [s for s in sorted(ranking.scores, reverse=True)[:n] if s > 0]


def head_gap_cut(ranking: InfluenceRanking, n: int) -> int:
    """largest_gap_cut over the influential head; the drop to zero counts as the last gap"""
    head = influential_head(ranking, n)
    if len(head) < 2:
        return len(head)
    return largest_gap_cut(head + [0.0])


def gap_cut_stats(groups: Mapping[str, Sequence[InfluenceRanking]],
                  head: Optional[int] = None) -> Dict[str, Dict[str, float]]:
    """Mean/std of gap cuts per configuration; `head` limits each ranking to its influential top-n"""
    out = {}
    for label, rankings in sorted(groups.items()):
        if head is None:
            cuts = [largest_gap_cut(r) for r in rankings if len(r) >= 2]
        else:
            cuts = [head_gap_cut(r, head) for r in rankings if len(r)]
        if cuts:
            out[label] = _mean_std(cuts)
    return out


@dataclass
class RankingCurve:
    probe_id: str
    label: str
    scores: List[float]


def ranking_curve(ranking: InfluenceRanking, n: int) -> RankingCurve:
    """Top-n scores in non-increasing order"""
    if n < 1:
        raise ValueError("n must be >= 1")
    scores = sorted(ranking.scores, reverse=True)[:n]
    return RankingCurve(ranking.probe_id, ranking.label(), scores)


# ---------------------------------------------------------------------------
# Component sensitivity
# ---------------------------------------------------------------------------

def _gradients(snapshots: Sequence[CheckpointSnapshot], src: Sequence[str], trg: Sequence[str],
               src_vocab: Vocabulary, trg_vocab: Vocabulary):
    pair = TokenPair(src_vocab.encode(src), trg_vocab.encode(trg))
    return [seqmodel.per_example_gradient(s, pair) for s in snapshots]


def perturbation_pair(probe: ParallelExample, kind: str, partner: Optional[ParallelExample] = None):
    """(src, trg) for one perturbation row of the sensitivity matrix"""
    if kind == 'identical':
        return probe.src, probe.trg
    if kind == 'random-source':
        return partner.src, probe.trg
    if kind == 'random-target':
        return probe.src, partner.trg
    if kind == 'punct-src':
        return perturb_punctuation(probe.src), probe.trg
    if kind == 'punct-trg':
        return probe.src, perturb_punctuation(probe.trg)
    raise ValueError(f"Unknown perturbation '{kind}'")


def sensitivity_matrix(
    probe: ParallelExample,
    perturbations: Sequence[str],
    selectors: Sequence[str],
    snapshots: Sequence[CheckpointSnapshot],
    src_vocab: Vocabulary,
    trg_vocab: Vocabulary,
    pool: Sequence[ParallelExample] = (),
    seed: int = 0,
) -> Dict[str, Dict[str, float]]:
    """
    TracIn score between a probe pair and each perturbed pair, per selector

    Args:
        probe: Clean (src, trg) pair
        perturbations: Names from PERTURBATIONS
        selectors: Selector names for the columns
        snapshots: Checkpoints to average over (final only by default in the CLI)
        pool: Sentences used as random partners
        seed: Picks the random partner

    Returns:
        {perturbation: {selector: score}}
    """
    rng = np.random.default_rng(seed)
    partners = [p for p in pool if p.src != probe.src and p.trg != probe.trg]
    probe_grads = _gradients(snapshots, probe.src, probe.trg, src_vocab, trg_vocab)
    matrix: Dict[str, Dict[str, float]] = {}
    for kind in perturbations:
        partner = None
        if kind in PAIRING_MODES:
            if not partners:
                raise ValueError(f"Perturbation '{kind}' needs a nonempty pool")
            partner = partners[int(rng.integers(len(partners)))]
        src, trg = perturbation_pair(probe, kind, partner)
        grads = _gradients(snapshots, src, trg, src_vocab, trg_vocab)
        matrix[kind] = {name: tracin(probe_grads, grads, ComponentSelector.parse(name)) for name in selectors}
    return matrix


def random_pairing_stats(
    probe: ParallelExample,
    pool: Sequence[ParallelExample],
    selector: str,
    mode: str,
    snapshots: Sequence[CheckpointSnapshot],
    src_vocab: Vocabulary,
    trg_vocab: Vocabulary,
) -> float:
    """Mean |tracin| between the probe and pairs that keep one probe side and take the other from the pool"""
    if not pool:
        raise ValueError("Pairing pool is empty")
    if mode not in PAIRING_MODES:
        raise ValueError(f"Unknown pairing mode '{mode}'")
    sel = ComponentSelector.parse(selector)
    probe_grads = _gradients(snapshots, probe.src, probe.trg, src_vocab, trg_vocab)
    magnitudes = []
    for partner in pool:
        src, trg = perturbation_pair(probe, mode, partner)
        grads = _gradients(snapshots, src, trg, src_vocab, trg_vocab)
        magnitudes.append(abs(tracin(probe_grads, grads, sel)))
    return float(np.mean(magnitudes))


# ---------------------------------------------------------------------------
# Report writers
# ---------------------------------------------------------------------------

def write_report_json(path: Union[str, Path], payload: Dict):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n', encoding='utf-8')


def format_precision_grid(grid: Dict[str, Dict[str, Optional[RetrievalReport]]], top_x: Sequence[float]) -> str:
    """Aligned text table, one row per (variant, selector); '-' marks a gap"""
    header = ['variant', 'selector'] + [f"top{x:g}%" for x in top_x]
    rows = [header]
    for variant, row in grid.items():
        for selector, report in row.items():
            values = ['-'] * len(top_x) if report is None else [f"{v:.3f}" for v in report.macro]
            rows.append([variant, selector] + values)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ['  '.join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    return '\n'.join(lines) + '\n'


def write_report_text(path: Union[str, Path], text: str):
    Path(path).write_text(text, encoding='utf-8')


def write_curve_csv(path: Union[str, Path], curve: RankingCurve):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['rank', 'score'])
        for rank, score in enumerate(curve.scores, 1):
            writer.writerow([rank, repr(score)])
