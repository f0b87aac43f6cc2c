"""
Synthetic German-English parallel corpus for gradsieve
Template generation, error-pattern and copied-source noise injection,
probing subsets, probe-case construction and corpus file I/O
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

import seqmodel

log = structlog.get_logger()

CLEAN = 'clean'
COPY_NOISE = 'copy_noise'
RANDOM_FILLER = 'random_filler'
PATTERN_PREFIX = 'pattern_noise:'
COPY_TARGET = 'copy'


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParallelExample:
    id: int
    src: Tuple[str, ...]
    trg: Tuple[str, ...]
    provenance: str = CLEAN

    def __post_init__(self):
        if not self.src or not self.trg:
            raise ValueError(f"Example {self.id} has an empty side")

    def with_trg(self, trg: Sequence[str], provenance: str) -> 'ParallelExample':
        return replace(self, trg=tuple(trg), provenance=provenance)


@dataclass(frozen=True)
class ErrorPattern:
    id: int
    src_word: str
    correct_trg: str
    wrong_trg: str

    def label(self) -> str:
        return f"{self.src_word}->{self.wrong_trg}"


@dataclass
class NoiseManifest:
    """Provenance per example id plus per-target counts (train / noisy / probing)"""
    provenance: Dict[int, str] = field(default_factory=dict)
    counts: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def noisy_ids(self, target: Union[int, str]) -> List[int]:
        return sorted(i for i, p in self.provenance.items() if is_hit(p, target))

    def merge(self, other: 'NoiseManifest') -> 'NoiseManifest':
        provenance = dict(self.provenance)
        provenance.update(other.provenance)
        counts = {k: dict(v) for k, v in self.counts.items()}
        for key, value in other.counts.items():
            counts.setdefault(key, {}).update(value)
        return NoiseManifest(provenance, counts)

    def to_dict(self) -> Dict:
        return {
            'provenance': {str(i): p for i, p in sorted(self.provenance.items())},
            'counts': {k: dict(sorted(v.items())) for k, v in sorted(self.counts.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'NoiseManifest':
        return cls(
            provenance={int(i): p for i, p in data.get('provenance', {}).items()},
            counts={k: dict(v) for k, v in data.get('counts', {}).items()},
        )


@dataclass(frozen=True)
class ProbeCase:
    id: str
    src: Tuple[str, ...]
    hypothesis: Tuple[str, ...]
    reference: Tuple[str, ...]
    corrected_hypothesis: Optional[Tuple[str, ...]] = None
    pattern_id: Optional[int] = None
    copy: bool = False

    @property
    def target(self) -> str:
        return COPY_TARGET if self.copy else str(self.pattern_id)

    def to_dict(self) -> Dict:
        return {
            'id': self.id,
            'src': ' '.join(self.src),
            'hypothesis': ' '.join(self.hypothesis),
            'reference': ' '.join(self.reference),
            'corrected_hypothesis': None if self.corrected_hypothesis is None else ' '.join(self.corrected_hypothesis),
            'pattern_id': self.pattern_id,
            'copy': self.copy,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'ProbeCase':
        corrected = data.get('corrected_hypothesis')
        return cls(
            id=data['id'],
            src=tuple(data['src'].split()),
            hypothesis=tuple(data['hypothesis'].split()),
            reference=tuple(data['reference'].split()),
            corrected_hypothesis=None if corrected is None else tuple(corrected.split()),
            pattern_id=data.get('pattern_id'),
            copy=bool(data.get('copy', False)),
        )


@dataclass(frozen=True)
class Template:
    src: str
    weight: float


@dataclass
class CorpusSpec:
    n_examples: int = 5000
    seed: int = 1234
    templates: List[Template] = field(default_factory=list)
    lexicon: Dict[str, str] = field(default_factory=dict)
    slots: Dict[str, List[str]] = field(default_factory=dict)
    copy_templates: List[Template] = field(default_factory=list)


def pattern_provenance(pattern_ids: Iterable[int]) -> str:
    return PATTERN_PREFIX + ','.join(str(i) for i in sorted(set(pattern_ids)))


def provenance_patterns(provenance: str) -> List[int]:
    if not provenance.startswith(PATTERN_PREFIX):
        return []
    return [int(i) for i in provenance[len(PATTERN_PREFIX):].split(',') if i]


def is_hit(provenance: str, target: Union[int, str]) -> bool:
    """Whether an example with this provenance is injected noise for the target"""
    if str(target) == COPY_TARGET:
        return provenance == COPY_NOISE
    return int(target) in provenance_patterns(provenance)


# ---------------------------------------------------------------------------
# Defaults
# ---------------------------------------------------------------------------

_SLOT_WORDS = {
    'MONTH': {
        'januar': 'january', 'maerz': 'march', 'mai': 'may', 'juli': 'july',
        'august': 'august', 'oktober': 'october', 'dezember': 'december',
    },
    'COUNTRY': {
        'deutschland': 'germany', 'italien': 'italy', 'frankreich': 'france', 'spanien': 'spain',
        'tuerkei': 'turkey', 'neuseeland': 'new_zealand', 'polen': 'poland',
    },
    'NOUN': {
        'haus': 'house', 'auto': 'car', 'buch': 'book', 'hund': 'dog', 'katze': 'cat',
        'stadt': 'city', 'schule': 'school', 'garten': 'garden', 'zug': 'train', 'brief': 'letter',
    },
    'VERB': {'fahren': 'drive', 'fliegen': 'fly', 'reisen': 'travel', 'ziehen': 'move', 'segeln': 'sail'},
    'ADJ': {
        'alt': 'old', 'neu': 'new', 'gross': 'big', 'klein': 'small',
        'rot': 'red', 'schnell': 'fast', 'gut': 'good', 'schoen': 'nice',
    },
    'NUM': {'eins': 'one', 'zwei': 'two', 'drei': 'three', 'vier': 'four', 'fuenf': 'five', 'sechs': 'six'},
}

_FUNCTION_WORDS = {
    'im': 'in', 'wir': 'we', 'nach': 'to', 'das': 'the', 'ist': 'is', 'aus': 'from',
    'kommen': 'come', 'ein': 'a', 'bleibt': 'stays', 'bis': 'until', '.': '.', '!': '!',
}

_TEMPLATES = [
    Template('im {MONTH} {VERB} wir nach {COUNTRY} .', 0.30),
    Template('das {NOUN} ist {ADJ} .', 0.25),
    Template('{NUM} {NOUN} aus {COUNTRY} kommen im {MONTH} .', 0.20),
    Template('ein {ADJ} {NOUN} bleibt bis {MONTH} .', 0.20),
    Template('{ADJ} {NOUN} {NOUN}', 0.05),
]

_HEADLINE = Template('{ADJ} {NOUN} {NOUN}', 1.0)


def default_lexicon() -> Dict[str, str]:
    lexicon = {}
    for words in _SLOT_WORDS.values():
        lexicon.update(words)
    lexicon.update(_FUNCTION_WORDS)
    return lexicon


def default_corpus_spec(n_examples: int = 5000, seed: int = 1234) -> CorpusSpec:
    return CorpusSpec(
        n_examples=n_examples,
        seed=seed,
        templates=list(_TEMPLATES),
        lexicon=default_lexicon(),
        slots={slot: sorted(words) for slot, words in _SLOT_WORDS.items()},
        copy_templates=[_HEADLINE],
    )


def default_error_patterns() -> List[ErrorPattern]:
    return [
        ErrorPattern(0, 'august', 'august', 'january'),
        ErrorPattern(1, 'deutschland', 'germany', 'italy'),
        ErrorPattern(2, 'oktober', 'october', 'december'),
        ErrorPattern(3, 'tuerkei', 'turkey', 'new_zealand'),
    ]


def validate_pattern(pattern: ErrorPattern, lexicon: Dict[str, str]) -> Tuple[bool, List[str]]:
    errors = []
    if pattern.correct_trg == pattern.wrong_trg:
        errors.append(f"pattern {pattern.id}: correct_trg equals wrong_trg")
    if pattern.src_word not in lexicon:
        errors.append(f"pattern {pattern.id}: '{pattern.src_word}' is not in the source lexicon")
    elif lexicon[pattern.src_word] != pattern.correct_trg:
        errors.append(f"pattern {pattern.id}: lexicon translates '{pattern.src_word}' "
                      f"as '{lexicon[pattern.src_word]}', not '{pattern.correct_trg}'")
    return len(errors) == 0, errors


def translate(tokens: Sequence[str], lexicon: Dict[str, str]) -> Tuple[str, ...]:
    """Word-by-word lexicon image"""
    return tuple(lexicon[t] for t in tokens)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _fill(template: Template, slots: Dict[str, List[str]], rng: np.random.Generator) -> Tuple[str, ...]:
    tokens = []
    for piece in template.src.split():
        if piece.startswith('{') and piece.endswith('}'):
            words = slots[piece[1:-1]]
            tokens.append(words[int(rng.integers(len(words)))])
        else:
            tokens.append(piece)
    return tuple(tokens)


def _check_spec(spec: CorpusSpec):
    if not spec.templates:
        raise ValueError("Corpus spec has no templates")
    images = list(spec.lexicon.values())
    if len(set(images)) != len(images):
        raise ValueError("Lexicon is not a bijection")


def _draw(spec: CorpusSpec, templates: List[Template], n: int, seed: int) -> List[Tuple[str, ...]]:
    rng = np.random.default_rng(seed)
    weights = np.asarray([t.weight for t in templates], dtype=np.float64)
    weights = weights / weights.sum()
    sentences = []
    for _ in range(n):
        template = templates[int(rng.choice(len(templates), p=weights))]
        sentences.append(_fill(template, spec.slots, rng))
    return sentences


def generate_clean_corpus(spec: CorpusSpec, id_offset: int = 0) -> List[ParallelExample]:
    """Template instantiations paired with their lexicon images"""
    _check_spec(spec)
    sources = _draw(spec, spec.templates, spec.n_examples, spec.seed)
    return [
        ParallelExample(id_offset + i, src, translate(src, spec.lexicon), CLEAN)
        for i, src in enumerate(sources)
    ]


def generate_copy_sources(spec: CorpusSpec, n: int, seed: int) -> List[Tuple[str, ...]]:
    templates = spec.copy_templates or spec.templates
    return _draw(spec, templates, n, seed)


def generate_filler_pool(spec: CorpusSpec, n: int, seed: int, id_offset: int = 0) -> List[ParallelExample]:
    """Held-out clean sentences used as random partners by the sensitivity harness"""
    sources = _draw(spec, spec.templates, n, seed)
    return [
        ParallelExample(id_offset + i, src, translate(src, spec.lexicon), RANDOM_FILLER)
        for i, src in enumerate(sources)
    ]


def perturb_punctuation(tokens: Sequence[str]) -> Tuple[str, ...]:
    """Swap a final period for an exclamation mark (appends one if absent)"""
    tokens = list(tokens)
    if tokens and tokens[-1] == '.':
        tokens[-1] = '!'
    else:
        tokens.append('!')
    return tuple(tokens)


# ---------------------------------------------------------------------------
# Noise injection
# ---------------------------------------------------------------------------

def inject_pattern_noise(
    corpus: Sequence[ParallelExample],
    pattern: ErrorPattern,
    p: float,
    seed: int,
) -> Tuple[List[ParallelExample], NoiseManifest]:
    """
    Flip correct_trg to wrong_trg in sentences containing the pattern word

    All occurrences in one sentence flip together, with probability p per sentence.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Injection probability must be in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    out: List[ParallelExample] = []
    provenance: Dict[int, str] = {}
    matching = noisy = 0

    for example in corpus:
        if pattern.src_word in example.src and pattern.correct_trg in example.trg:
            matching += 1
            if rng.random() < p:
                trg = [pattern.wrong_trg if t == pattern.correct_trg else t for t in example.trg]
                ids = provenance_patterns(example.provenance) + [pattern.id]
                example = example.with_trg(trg, pattern_provenance(ids))
                noisy += 1
        out.append(example)
        provenance[example.id] = example.provenance

    manifest = NoiseManifest(provenance)
    if matching == 0:
        log.warning("Pattern word absent from corpus", pattern_id=pattern.id, src_word=pattern.src_word)
        return out, manifest
    manifest.counts[str(pattern.id)] = {'train': matching, 'noisy': noisy, 'probing': 0}
    log.info("Pattern noise injected", pattern=pattern.label(), matching=matching, noisy=noisy)
    return out, manifest


def inject_copy_noise(
    corpus: Sequence[ParallelExample],
    fraction: float,
    seed: int,
    sources: Optional[Sequence[Sequence[str]]] = None,
) -> Tuple[List[ParallelExample], NoiseManifest]:
    """
    Append floor(fraction * n) pairs whose target is a verbatim copy of the source

    Sources come from the given pool (cycled) or are sampled from the corpus.
    """
    if fraction < 0:
        raise ValueError(f"Copy fraction must be >= 0, got {fraction}")
    out = list(corpus)
    n_copies = int(np.floor(fraction * len(corpus)))
    rng = np.random.default_rng(seed)
    next_id = max((e.id for e in corpus), default=-1) + 1

    if sources:
        picked = [tuple(sources[i % len(sources)]) for i in range(n_copies)]
    elif corpus:
        picked = [corpus[int(i)].src for i in rng.integers(0, len(corpus), size=n_copies)]
    else:
        picked = []
    for offset, src in enumerate(picked):
        out.append(ParallelExample(next_id + offset, tuple(src), tuple(src), COPY_NOISE))

    manifest = NoiseManifest({e.id: e.provenance for e in out})
    if n_copies:
        manifest.counts[COPY_TARGET] = {'train': len(out), 'noisy': n_copies, 'probing': 0}
        log.info("Copy noise injected", appended=n_copies, corpus_size=len(out))
    return out, manifest


def manifest_counts_consistent(corpus: Sequence[ParallelExample], manifest: NoiseManifest,
                               patterns: Sequence[ErrorPattern] = ()) -> Tuple[bool, List[str]]:
    """Rescan the corpus and compare against the manifest"""
    errors = []
    by_id = {e.id: e for e in corpus}
    if set(by_id) != set(manifest.provenance):
        errors.append("manifest ids differ from corpus ids")
    for example in corpus:
        if manifest.provenance.get(example.id) != example.provenance:
            errors.append(f"example {example.id}: provenance mismatch")

    for pattern in patterns:
        counts = manifest.counts.get(str(pattern.id))
        noisy = [e for e in corpus if is_hit(e.provenance, pattern.id)]
        train = [e for e in corpus if pattern.src_word in e.src
                 and (pattern.correct_trg in e.trg or is_hit(e.provenance, pattern.id))
                 and e.provenance != COPY_NOISE]
        for e in corpus:
            if (pattern.src_word in e.src and pattern.wrong_trg in e.trg
                    and not is_hit(e.provenance, pattern.id) and e.provenance != COPY_NOISE):
                errors.append(f"example {e.id}: unmarked '{pattern.wrong_trg}' for '{pattern.src_word}'")
        if counts is None:
            if noisy:
                errors.append(f"pattern {pattern.id}: noisy examples without a manifest entry")
            continue
        if counts.get('noisy') != len(noisy):
            errors.append(f"pattern {pattern.id}: manifest noisy={counts.get('noisy')} corpus={len(noisy)}")
        if counts.get('train') != len(train):
            errors.append(f"pattern {pattern.id}: manifest train={counts.get('train')} corpus={len(train)}")

    copy_counts = manifest.counts.get(COPY_TARGET)
    copies = sum(1 for e in corpus if e.provenance == COPY_NOISE)
    if copy_counts is not None and copy_counts.get('noisy') != copies:
        errors.append(f"copy: manifest noisy={copy_counts.get('noisy')} corpus={copies}")
    return len(errors) == 0, errors


# ---------------------------------------------------------------------------
# Probing subsets and probe cases
# ---------------------------------------------------------------------------

def _sample_others(corpus, chosen: set, n_random: int, seed: int) -> List[int]:
    others = [e.id for e in corpus if e.id not in chosen]
    if n_random <= 0 or not others:
        return []
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(others), size=min(n_random, len(others)), replace=False)
    return [others[int(i)] for i in picked]


def build_probing_subset(corpus: Sequence[ParallelExample], pattern: ErrorPattern,
                         n_random: int, seed: int = 0) -> List[ParallelExample]:
    """Every example mentioning the pattern on either side plus n_random others, sorted by id"""
    if n_random < 0:
        raise ValueError("n_random must be >= 0")
    words = {pattern.src_word, pattern.correct_trg, pattern.wrong_trg}
    matches = {e.id for e in corpus if words & set(e.src) or words & set(e.trg)}
    chosen = matches | set(_sample_others(corpus, matches, n_random, seed))
    return [e for e in sorted(corpus, key=lambda e: e.id) if e.id in chosen]


def build_copy_subset(corpus: Sequence[ParallelExample], n_random: int, seed: int = 0) -> List[ParallelExample]:
    if n_random < 0:
        raise ValueError("n_random must be >= 0")
    copies = {e.id for e in corpus if e.provenance == COPY_NOISE}
    chosen = copies | set(_sample_others(corpus, copies, n_random, seed))
    return [e for e in sorted(corpus, key=lambda e: e.id) if e.id in chosen]


def _decode_tokens(params, src, src_vocab, trg_vocab, beam) -> Tuple[str, ...]:
    ids = seqmodel.decode(params, src_vocab.encode(src), beam=beam)
    return tuple(trg_vocab.decode(ids))


def build_probe_cases(
    snapshot: seqmodel.CheckpointSnapshot,
    test_corpus: Sequence[ParallelExample],
    pattern: ErrorPattern,
    src_vocab: seqmodel.Vocabulary,
    trg_vocab: seqmodel.Vocabulary,
    beam: int = 5,
    max_probes: Optional[int] = None,
) -> List[ProbeCase]:
    """
    Held-out sources whose decoded hypothesis shows the error pattern

    Args:
        snapshot: Final checkpoint
        test_corpus: Held-out clean examples (references are gold)
        pattern: Error pattern to probe
        src_vocab, trg_vocab: Vocabularies of the trained model
        beam: Beam size for decoding
        max_probes: Optional cap on kept cases

    Returns:
        ProbeCase list in test-corpus order, one per distinct source
    """
    cases: List[ProbeCase] = []
    dropped: List[int] = []
    seen = set()
    for example in test_corpus:
        if pattern.src_word not in example.src or example.src in seen:
            continue
        seen.add(example.src)
        hypothesis = _decode_tokens(snapshot.params, example.src, src_vocab, trg_vocab, beam)
        if pattern.wrong_trg not in hypothesis:
            dropped.append(example.id)
            continue
        corrected = tuple(pattern.correct_trg if t == pattern.wrong_trg else t for t in hypothesis)
        cases.append(ProbeCase(
            id=f"p{pattern.id}-{example.id}",
            src=example.src,
            hypothesis=hypothesis,
            reference=example.trg,
            corrected_hypothesis=corrected,
            pattern_id=pattern.id,
        ))
        if max_probes is not None and len(cases) >= max_probes:
            break
    if dropped:
        log.warning("Probes dropped, error not manifested", pattern_id=pattern.id,
                    dropped=len(dropped), example_ids=dropped[:20])
    log.info("Probe cases built", pattern=pattern.label(), kept=len(cases))
    return cases


def build_copy_probe_cases(
    snapshot: seqmodel.CheckpointSnapshot,
    sources: Sequence[ParallelExample],
    src_vocab: seqmodel.Vocabulary,
    trg_vocab: seqmodel.Vocabulary,
    beam: int = 5,
    max_probes: Optional[int] = None,
) -> Tuple[List[ProbeCase], float]:
    """
    Held-out sources the model copies verbatim

    Returns:
        (cases, copy_rate) where copy_rate is over all distinct sources decoded
    """
    cases: List[ProbeCase] = []
    decoded = copied = 0
    seen = set()
    for example in sources:
        if example.src in seen:
            continue
        seen.add(example.src)
        hypothesis = _decode_tokens(snapshot.params, example.src, src_vocab, trg_vocab, beam)
        decoded += 1
        if hypothesis != example.src:
            continue
        copied += 1
        if max_probes is None or len(cases) < max_probes:
            cases.append(ProbeCase(
                id=f"copy-{example.id}",
                src=example.src,
                hypothesis=hypothesis,
                reference=example.trg,
                copy=True,
            ))
    rate = copied / decoded if decoded else 0.0
    log.info("Copy probe cases built", decoded=decoded, copied=copied, copy_rate=round(rate, 4))
    return cases, rate


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def write_corpus_tsv(path: Union[str, Path], corpus: Sequence[ParallelExample]):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for e in corpus:
            f.write(f"{e.id}\t{' '.join(e.src)}\t{' '.join(e.trg)}\t{e.provenance}\n")


def read_corpus_tsv(path: Union[str, Path]) -> List[ParallelExample]:
    corpus = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip('\n')
            if not line:
                continue
            parts = line.split('\t')
            if len(parts) != 4:
                raise ValueError(f"{path}:{line_no}: expected 4 tab-separated fields, got {len(parts)}")
            corpus.append(ParallelExample(int(parts[0]), tuple(parts[1].split()), tuple(parts[2].split()), parts[3]))
    return corpus


def write_manifest(path: Union[str, Path], manifest: NoiseManifest):
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + '\n', encoding='utf-8')


def read_manifest(path: Union[str, Path]) -> NoiseManifest:
    return NoiseManifest.from_dict(json.loads(Path(path).read_text(encoding='utf-8')))


def write_probe_cases(path: Union[str, Path], cases: Sequence[ProbeCase]):
    payload = [c.to_dict() for c in cases]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n', encoding='utf-8')


def read_probe_cases(path: Union[str, Path]) -> List[ProbeCase]:
    return [ProbeCase.from_dict(d) for d in json.loads(Path(path).read_text(encoding='utf-8'))]


def build_vocabularies(corpus: Sequence[ParallelExample], lexicon: Dict[str, str]):
    """Source vocab covers the lexicon; target vocab covers lexicon images plus every corpus target token"""
    src_vocab = seqmodel.Vocabulary.build(sorted(lexicon))
    trg_words = set(lexicon.values())
    for example in corpus:
        trg_words.update(example.trg)
    trg_vocab = seqmodel.Vocabulary.build(sorted(trg_words))
    return src_vocab, trg_vocab
