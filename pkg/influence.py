"""
TracIn gradient-similarity engine
Checkpoint-averaged cosine similarity over selectable components, contrastive
probe gradients (masking, gradient difference), subset ranking and caching
"""

import csv
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

import gradient_cache
import seqmodel
from corpus import ProbeCase
from errors import CacheMissError, CheckpointMismatchError, IncompatibleGradientError, ProbeSpecError
from seqmodel import CheckpointSnapshot, GradientVector, Layout, TokenPair, Vocabulary

log = structlog.get_logger()

NORM_FLOOR = 1e-12

SELECTOR_COMPONENTS = {
    'srcEmb': ('srcEmb',),
    'trgEmb': ('trgEmb',),
    'output': ('output',),
    'encoder': ('encoder',),
    'decoder': ('decoder',),
    'concat': ('srcEmb', 'trgEmb', 'output'),
    'emb': ('srcEmb', 'trgEmb'),
    'full': seqmodel.COMPONENTS,
}

BASE_VARIANTS = ('HYP', 'REF', 'CorrHYP', 'HypMask', 'HypMaskExact', 'CorrHypMaskExact')
DIRECTIONS = ('positive', 'negative')

DEFAULT_PATTERN_MATRIX = [
    ('HYP', 'positive'),
    ('REF', 'negative'),
    ('CorrHYP', 'negative'),
    ('HypMask', 'positive'),
    ('HypMaskExact', 'positive'),
    ('CorrHypMaskExact', 'negative'),
    ('GradDiff(HYP,REF)', 'positive'),
    ('GradDiff(HYP,CorrHYP)', 'positive'),
]
DEFAULT_PATTERN_SELECTORS = ['srcEmb', 'encoder', 'trgEmb', 'output', 'concat', 'full']

DEFAULT_COPY_MATRIX = [
    ('HYP', 'positive'),
    ('REF', 'negative'),
    ('GradDiff(HYP,REF)', 'positive'),
]
DEFAULT_COPY_SELECTORS = ['srcEmb', 'encoder', 'full']

_GRAD_DIFF = re.compile(r'^GradDiff\((\w+),(\w+)\)$')


# ---------------------------------------------------------------------------
# Selectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComponentSelector:
    name: str
    components: Tuple[str, ...]

    @classmethod
    def parse(cls, spec: Union[str, Sequence[str], 'ComponentSelector']) -> 'ComponentSelector':
        """Named selector ('full', 'concat', ...) or an explicit component list"""
        if isinstance(spec, ComponentSelector):
            return spec
        if isinstance(spec, str):
            if spec not in SELECTOR_COMPONENTS:
                raise ValueError(f"Unknown selector '{spec}' (known: {sorted(SELECTOR_COMPONENTS)})")
            return cls(spec, tuple(SELECTOR_COMPONENTS[spec]))
        components = tuple(spec)
        unknown = [c for c in components if c not in seqmodel.COMPONENTS]
        if not components or unknown:
            raise ValueError(f"Invalid component set {list(components)}")
        return cls('+'.join(components), components)

    def slices(self, layout: Layout) -> Tuple[slice, ...]:
        return _resolve(self.components, layout)


@lru_cache(maxsize=256)
def _resolve(components: Tuple[str, ...], layout: Layout) -> Tuple[slice, ...]:
    present = {name for name, _, _ in layout.components}
    wanted = [c for c in components if c in present]
    slices = tuple(gradient_cache.component_slices(layout, wanted))
    if not slices or sum(s.stop - s.start for s in slices) == 0:
        raise ValueError(f"Selector {components} resolves to an empty index set")
    return slices


def _check_layouts(g1: GradientVector, g2: GradientVector):
    if g1.layout is not g2.layout and g1.layout != g2.layout:
        raise IncompatibleGradientError("Gradient vectors have different layout tables")


def _restricted_dot(a: np.ndarray, b: np.ndarray, slices: Sequence[slice]) -> float:
    total = 0.0
    for s in slices:
        total += float(np.dot(a[s].astype(np.float64), b[s].astype(np.float64)))
    return total


def _restricted_norm(g: GradientVector, sel: ComponentSelector, slices: Sequence[slice]) -> float:
    return g.cached_norm(sel.components, lambda: math.sqrt(_restricted_dot(g.values, g.values, slices)))


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------

def dot_product(g1: GradientVector, g2: GradientVector, sel='full') -> float:
    sel = ComponentSelector.parse(sel)
    _check_layouts(g1, g2)
    return _restricted_dot(g1.values, g2.values, sel.slices(g1.layout))


def cosine_similarity(g1: GradientVector, g2: GradientVector, sel='full') -> float:
    """
    Cosine of two gradients restricted to a selector

    Returns 0 when either restricted norm is below 1e-12.
    """
    sel = ComponentSelector.parse(sel)
    _check_layouts(g1, g2)
    slices = sel.slices(g1.layout)
    n1 = _restricted_norm(g1, sel, slices)
    n2 = _restricted_norm(g2, sel, slices)
    if n1 < NORM_FLOOR or n2 < NORM_FLOOR:
        return 0.0
    return _restricted_dot(g1.values, g2.values, slices) / (n1 * n2)


def _check_checkpoints(probe_grads: Sequence[GradientVector], train_grads: Sequence[GradientVector]):
    if len(probe_grads) == 0:
        raise CheckpointMismatchError("At least one checkpoint is required")
    if len(probe_grads) != len(train_grads):
        raise CheckpointMismatchError(
            f"Probe has {len(probe_grads)} checkpoints, training example has {len(train_grads)}")
    for p, t in zip(probe_grads, train_grads):
        if p.epoch is not None and t.epoch is not None and p.epoch != t.epoch:
            raise CheckpointMismatchError(f"Checkpoint epochs differ: {p.epoch} vs {t.epoch}")


def tracin(probe_grads: Sequence[GradientVector], train_grads: Sequence[GradientVector], sel='full') -> float:
    """Mean over checkpoints of the per-checkpoint cosine similarity"""
    _check_checkpoints(probe_grads, train_grads)
    sel = ComponentSelector.parse(sel)
    total = 0.0
    for p, t in zip(probe_grads, train_grads):
        total += cosine_similarity(p, t, sel)
    return total / len(probe_grads)


def raw_dot_influence(probe_grads: Sequence[GradientVector], train_grads: Sequence[GradientVector],
                      sel='full') -> float:
    """Mean over checkpoints of the unnormalized dot product"""
    _check_checkpoints(probe_grads, train_grads)
    sel = ComponentSelector.parse(sel)
    total = 0.0
    for p, t in zip(probe_grads, train_grads):
        total += dot_product(p, t, sel)
    return total / len(probe_grads)


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def diff_mask(hyp: Sequence[str], ref: Sequence[str]) -> List[int]:
    """1 where a hypothesis token is not matched under an LCS alignment with the reference"""
    n, m = len(hyp), len(ref)
    table = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if hyp[i] == ref[j]:
                table[i, j] = table[i + 1, j + 1] + 1
            else:
                table[i, j] = max(table[i + 1, j], table[i, j + 1])

    mask = [1] * n
    i = j = 0
    while i < n and j < m:
        if hyp[i] == ref[j]:
            mask[i] = 0
            i += 1
            j += 1
        elif table[i + 1, j] >= table[i, j + 1]:
            i += 1
        else:
            j += 1
    return mask


def exact_mask(hyp: Sequence[str], corrected: Sequence[str]) -> List[int]:
    """1 exactly where the hypothesis differs positionally from its corrected form"""
    if len(hyp) != len(corrected):
        log.warning("Exact mask length mismatch, falling back to LCS mask",
                    hyp_len=len(hyp), corrected_len=len(corrected))
        return diff_mask(hyp, corrected)
    return [int(h != c) for h, c in zip(hyp, corrected)]


# ---------------------------------------------------------------------------
# Probe gradients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeGradientSpec:
    variant: str
    case: ProbeCase

    @property
    def parts(self) -> Tuple[str, ...]:
        return parse_variant(self.variant)


def parse_variant(variant: str) -> Tuple[str, ...]:
    """('HYP',) for a base variant, ('HYP', 'CorrHYP') for GradDiff(HYP,CorrHYP)"""
    match = _GRAD_DIFF.match(variant.replace(' ', ''))
    if match:
        a, b = match.groups()
        for part in (a, b):
            if part not in BASE_VARIANTS:
                raise ProbeSpecError(f"GradDiff argument '{part}' must be a base variant")
        return a, b
    if variant not in BASE_VARIANTS:
        raise ProbeSpecError(f"Unknown probe variant '{variant}'")
    return (variant,)


def variant_slug(variant: str) -> str:
    """Filesystem-safe variant name"""
    parts = parse_variant(variant)
    return parts[0] if len(parts) == 1 else f"GradDiff-{parts[0]}-{parts[1]}"


def probe_target(case: ProbeCase, variant: str) -> Tuple[Tuple[str, ...], Optional[List[int]]]:
    """(target tokens, mask or None) for a base variant"""
    def need_corrected():
        if case.corrected_hypothesis is None:
            raise ProbeSpecError(f"Probe {case.id} has no corrected hypothesis (needed by {variant})")
        return case.corrected_hypothesis

    if variant == 'HYP':
        return case.hypothesis, None
    if variant == 'REF':
        return case.reference, None
    if variant == 'CorrHYP':
        return need_corrected(), None
    if variant == 'HypMask':
        return case.hypothesis, diff_mask(case.hypothesis, case.reference)
    if variant == 'HypMaskExact':
        return case.hypothesis, exact_mask(case.hypothesis, need_corrected())
    if variant == 'CorrHypMaskExact':
        corrected = need_corrected()
        return corrected, exact_mask(corrected, case.hypothesis)
    raise ProbeSpecError(f"Unknown probe variant '{variant}'")


def _base_gradient(case: ProbeCase, variant: str, snapshot: CheckpointSnapshot,
                   src_vocab: Vocabulary, trg_vocab: Vocabulary, reduction: str) -> GradientVector:
    target, mask = probe_target(case, variant)
    if not target:
        raise ProbeSpecError(f"Probe {case.id} has an empty {variant} target")
    pair = TokenPair(src_vocab.encode(case.src), trg_vocab.encode(target))
    return seqmodel.per_example_gradient(snapshot, pair, mask, reduction,
                                         mask_id=variant if mask is not None else None)


def build_probe_gradient(
    spec: ProbeGradientSpec,
    snapshot: CheckpointSnapshot,
    src_vocab: Vocabulary,
    trg_vocab: Vocabulary,
    reduction: str = 'mean',
) -> GradientVector:
    """
    Probing gradient for one variant at one checkpoint

    Args:
        spec: Variant name and probe case
        snapshot: Checkpoint to differentiate at
        src_vocab, trg_vocab: Model vocabularies
        reduction: Loss reduction passed to the model

    Returns:
        GradientVector; GradDiff(A,B) returns grad(A) - grad(B)
    """
    parts = spec.parts
    grad = _base_gradient(spec.case, parts[0], snapshot, src_vocab, trg_vocab, reduction)
    if len(parts) == 2:
        other = _base_gradient(spec.case, parts[1], snapshot, src_vocab, trg_vocab, reduction)
        grad = grad - other
        grad.mask_id = spec.variant
    return grad


# ---------------------------------------------------------------------------
# Rankings
# ---------------------------------------------------------------------------

@dataclass
class InfluenceRanking:
    probe_id: str
    selector: str
    variant: str
    direction: str
    epochs: List[int]
    entries: List[Tuple[int, float]] = field(default_factory=list)
    target: Optional[str] = None

    @property
    def example_ids(self) -> List[int]:
        return [ex for ex, _ in self.entries]

    @property
    def scores(self) -> List[float]:
        return [score for _, score in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def label(self) -> str:
        return f"{self.variant}|{self.selector}|{self.direction}"


def _sort_entries(scored: Sequence[Tuple[int, float]], direction: str) -> List[Tuple[int, float]]:
    if direction == 'positive':
        return sorted(scored, key=lambda e: (-e[1], e[0]))
    if direction == 'negative':
        return sorted(scored, key=lambda e: (e[1], e[0]))
    raise ValueError(f"Unknown direction '{direction}'")


GradientSource = Union[gradient_cache.GradientCache, Mapping[int, Sequence[GradientVector]]]


def _train_gradients(source: GradientSource, example_id: int, epochs: Sequence[int]) -> List[GradientVector]:
    if isinstance(source, gradient_cache.GradientCache):
        return source.vectors(example_id, epochs)
    return list(source[example_id])


def _missing(source: GradientSource, subset: Sequence[int], epochs: Sequence[int]) -> List[Tuple[int, int]]:
    if isinstance(source, gradient_cache.GradientCache):
        return source.missing((ex, ep) for ex in subset for ep in epochs)
    missing = []
    for ex in subset:
        grads = source.get(ex)
        if grads is None:
            missing += [(ex, ep) for ep in epochs]
        elif len(grads) != len(epochs):
            have = {g.epoch for g in grads}
            missing += [(ex, ep) for ep in epochs if ep not in have]
    return missing


def rank_subset(
    probe_grads: Sequence[GradientVector],
    subset: Sequence[int],
    source: GradientSource,
    epochs: Sequence[int],
    sel='full',
    direction: str = 'positive',
    probe_id: str = '',
    variant: str = '',
    target: Optional[str] = None,
    workers: int = 1,
) -> InfluenceRanking:
    """
    Score every subset example with tracin and sort

    Args:
        probe_grads: Probe gradient per checkpoint, in epoch order
        subset: Training example ids to rank
        source: GradientCache or mapping id -> per-checkpoint gradients
        epochs: Checkpoint epochs matching probe_grads
        sel: Component selector
        direction: 'positive' (descending) or 'negative' (ascending); ties by ascending id
        workers: Thread count for scoring (each dot product stays sequential)

    Returns:
        InfluenceRanking over the whole subset
    """
    sel = ComponentSelector.parse(sel)
    epochs = list(epochs)
    if len(probe_grads) != len(epochs):
        raise CheckpointMismatchError(f"{len(probe_grads)} probe gradients for {len(epochs)} epochs")
    if isinstance(source, gradient_cache.GradientCache):
        source.require_slices(sel.slices(source.layout), sel.name)
    missing = _missing(source, subset, epochs)
    if missing:
        raise CacheMissError(missing)

    def score(example_id: int) -> Tuple[int, float]:
        return example_id, tracin(probe_grads, _train_gradients(source, example_id, epochs), sel)

    if workers > 1 and len(subset) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(score, subset))
    else:
        scored = [score(ex) for ex in subset]

    return InfluenceRanking(probe_id, sel.name, variant, direction, epochs,
                            _sort_entries(scored, direction), target)


def brute_force_rank(
    probe_grads: Sequence[GradientVector],
    train_grads: Mapping[int, Sequence[GradientVector]],
    sel='full',
    direction: str = 'positive',
) -> List[Tuple[int, float]]:
    """Quadratic reference ranking: each position is the count of examples that beat it"""
    sel = ComponentSelector.parse(sel)
    scores = {}
    for example_id, grads in train_grads.items():
        total = 0.0
        for p, t in zip(probe_grads, grads):
            total += cosine_similarity(p, t, sel)
        scores[example_id] = total / len(probe_grads)

    def beats(a: int, b: int) -> bool:
        if scores[a] != scores[b]:
            return scores[a] > scores[b] if direction == 'positive' else scores[a] < scores[b]
        return a < b

    ids = list(scores)
    ranked: List[Optional[Tuple[int, float]]] = [None] * len(ids)
    for a in ids:
        position = sum(1 for b in ids if b != a and beats(b, a))
        ranked[position] = (a, scores[a])
    return ranked


# ---------------------------------------------------------------------------
# Checkpoint selection
# ---------------------------------------------------------------------------

def select_checkpoints(history: Union[seqmodel.TrainingHistory, Sequence[float]], count: int) -> List[int]:
    """
    Epochs with the largest validation-loss changes, plus the final epoch

    Deltas are measured from the previous epoch; epoch 1 is measured from the
    initial loss when the history carries one, otherwise it takes the change
    between epochs 1 and 2. Ties go to the earlier epoch.
    """
    if count < 1:
        raise ValueError("Checkpoint count must be >= 1")
    if isinstance(history, seqmodel.TrainingHistory):
        losses = history.validation_losses
        initial = history.initial_validation_loss
    else:
        losses = list(history)
        initial = float('nan')
    if not losses:
        raise ValueError("Validation-loss history is empty")

    final = len(losses)
    if count >= final:
        return list(range(1, final + 1))

    deltas = []
    for epoch in range(1, final):
        if epoch > 1:
            delta = abs(losses[epoch - 1] - losses[epoch - 2])
        elif np.isfinite(initial):
            delta = abs(losses[0] - initial)
        else:
            delta = abs(losses[1] - losses[0])
        deltas.append((epoch, delta))
    picked = [epoch for epoch, _ in sorted(deltas, key=lambda e: (-e[1], e[0]))[:count - 1]]
    return sorted(set(picked) | {final})


# ---------------------------------------------------------------------------
# Gradient cache build
# ---------------------------------------------------------------------------

def gradient_cache_build(
    snapshots: Sequence[CheckpointSnapshot],
    examples: Sequence[TokenPair],
    path: Union[str, Path],
    sel='full',
    workers: int = 1,
    chunk_size: int = 256,
) -> Tuple[gradient_cache.GradientCache, Dict[str, int]]:
    """
    Persist one gradient per (example, checkpoint), reusing records already on disk

    Args:
        snapshots: Checkpoints in epoch order
        examples: Id-carrying TokenPairs to cache
        path: GSIM file; extended in place when compatible, rebuilt otherwise
        sel: Components to store
        workers: Threads computing gradients; each writes only its own slot
        chunk_size: Examples computed per parallel batch

    Returns:
        (cache, {'computed': n, 'reused': m}) counted in gradient records
    """
    sel = ComponentSelector.parse(sel)
    if not snapshots:
        raise ValueError("At least one snapshot is required")
    layout = snapshots[0].params.layout
    epochs = [s.epoch for s in snapshots]
    fingerprint = gradient_cache.snapshot_fingerprint(snapshots)
    components = [c for c in sel.components if c in {n for n, _, _ in layout.components}]

    existing = gradient_cache.open_cache(path)
    if existing is not None and (existing.fingerprint != fingerprint or existing.epochs != epochs
                                 or existing.components != components):
        log.warning("Gradient cache is stale, rebuilding", path=str(path))
        existing = None

    wanted: Dict[int, TokenPair] = {}
    for pair in examples:
        if pair.example_id is None:
            raise ValueError("Cached examples need an example_id")
        wanted.setdefault(pair.example_id, pair)
    kept = set(existing.example_ids) if existing is not None else set()
    to_compute = sorted(i for i in wanted if i not in kept)
    stats = {'computed': len(to_compute) * len(epochs),
             'reused': len(set(wanted) & kept) * len(epochs)}

    if existing is not None and not to_compute:
        log.info("Gradient cache up to date", path=str(path), examples=len(existing), **stats)
        return existing, stats

    all_ids = sorted(kept | set(wanted))

    def compute(example_id: int) -> List[np.ndarray]:
        pair = wanted[example_id]
        return [seqmodel.per_example_gradient(s, pair).values.astype(np.float32) for s in snapshots]

    def records():
        pending = iter(to_compute)
        computed: Dict[int, List[np.ndarray]] = {}
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for example_id in all_ids:
                if example_id in kept:
                    yield example_id, [v.values for v in existing.vectors(example_id)]
                    continue
                if example_id not in computed:
                    computed.clear()
                    chunk = [ex for _, ex in zip(range(chunk_size), pending)]
                    for ex, vectors in zip(chunk, pool.map(compute, chunk)):
                        computed[ex] = vectors
                yield example_id, computed.pop(example_id)

    log.info("Building gradient cache", path=str(path), new_examples=len(to_compute),
             kept_examples=len(kept), epochs=epochs)
    gradient_cache.write_cache(path, layout, fingerprint, epochs, components, all_ids, records())
    return gradient_cache.GradientCache(path), stats


# ---------------------------------------------------------------------------
# Ranking files
# ---------------------------------------------------------------------------

def write_ranking_csv(path: Union[str, Path], ranking: InfluenceRanking, provenance: Mapping[int, str]):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['rank', 'example_id', 'score', 'provenance'])
        for rank, (example_id, score) in enumerate(ranking.entries, 1):
            writer.writerow([rank, example_id, repr(score), provenance.get(example_id, '')])


def read_ranking_csv(path: Union[str, Path], probe_id: str = '', selector: str = '', variant: str = '',
                     direction: str = 'positive', epochs: Sequence[int] = (),
                     target: Optional[str] = None) -> Tuple[InfluenceRanking, Dict[int, str]]:
    entries = []
    provenance = {}
    with open(path, 'r', encoding='utf-8', newline='') as f:
        for row in csv.DictReader(f):
            example_id = int(row['example_id'])
            entries.append((example_id, float(row['score'])))
            provenance[example_id] = row['provenance']
    ranking = InfluenceRanking(probe_id, selector, variant, direction, list(epochs), entries, target)
    return ranking, provenance


def read_indexed_ranking(rankings_dir: Union[str, Path], entry: Mapping) -> InfluenceRanking:
    """Load one rankings/index.json entry; its `path` is relative to the rankings directory"""
    ranking, _ = read_ranking_csv(
        Path(rankings_dir) / entry['path'],
        probe_id=entry['probe_id'],
        selector=entry['selector'],
        variant=entry['variant'],
        direction=entry['direction'],
        epochs=entry.get('epochs', ()),
        target=entry.get('target'),
    )
    return ranking
