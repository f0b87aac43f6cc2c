"""
Experiment configuration and run manifest
JSON-backed dataclasses with strict keys, validation and a semantic hash
"""

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import structlog

from corpus import ErrorPattern, default_error_patterns, default_lexicon, validate_pattern
import influence
from errors import ConfigValidationError, ProbeSpecError
from seqmodel import ModelConfig, TrainOptions

log = structlog.get_logger()


@dataclass
class CorpusSection:
    n_examples: int = 5000
    n_validation: int = 300
    n_test: int = 1000
    n_copy_probes: int = 300
    pattern_probability: float = 0.6
    copy_fraction: float = 0.0
    n_random: int = 2000
    max_probes: int = 30
    filler_pool: int = 500


@dataclass
class ModelSection:
    embed_dim: int = 16
    hidden_dim: int = 16
    num_encoder_layers: int = 1
    num_decoder_layers: int = 1
    tie_trg_embedding_and_output: bool = False
    max_positions: int = 32

    def to_model_config(self, src_vocab_size: int, trg_vocab_size: int) -> ModelConfig:
        return ModelConfig(src_vocab_size=src_vocab_size, trg_vocab_size=trg_vocab_size, **asdict(self))


@dataclass
class TrainSection:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 5e-3
    betas: List[float] = field(default_factory=lambda: [0.9, 0.98])
    eps: float = 1e-8

    def to_options(self, seed: int, checkpoint_epochs: List[int]) -> TrainOptions:
        return TrainOptions(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            betas=(self.betas[0], self.betas[1]),
            eps=self.eps,
            seed=seed,
            checkpoint_epochs=list(checkpoint_epochs),
        )


@dataclass
class CheckpointSection:
    """Either explicit epochs or `select` = C for automatic selection"""
    epochs: List[int] = field(default_factory=list)
    select: Optional[int] = 5


@dataclass
class ProbeEntry:
    variant: str
    direction: str


@dataclass
class ProbeSection:
    variants: List[ProbeEntry] = field(
        default_factory=lambda: [ProbeEntry(v, d) for v, d in influence.DEFAULT_PATTERN_MATRIX])
    selectors: List[str] = field(default_factory=lambda: list(influence.DEFAULT_PATTERN_SELECTORS))
    copy_variants: List[ProbeEntry] = field(
        default_factory=lambda: [ProbeEntry(v, d) for v, d in influence.DEFAULT_COPY_MATRIX])
    copy_selectors: List[str] = field(default_factory=lambda: list(influence.DEFAULT_COPY_SELECTORS))

    def matrix(self, copy_mode: bool = False) -> List[Tuple[str, str]]:
        entries = self.copy_variants if copy_mode else self.variants
        return [(e.variant, e.direction) for e in entries]

    def selector_names(self, copy_mode: bool = False) -> List[str]:
        return list(self.copy_selectors if copy_mode else self.selectors)


@dataclass
class ExperimentConfig:
    seed: int = 1234
    corpus: CorpusSection = field(default_factory=CorpusSection)
    patterns: List[ErrorPattern] = field(default_factory=default_error_patterns)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    checkpoints: CheckpointSection = field(default_factory=CheckpointSection)
    probes: ProbeSection = field(default_factory=ProbeSection)
    top_x: List[float] = field(default_factory=lambda: [1.0, 5.0, 10.0])
    beam: int = 5
    curve_length: int = 500
    output_dir: Optional[str] = None

    # ------------------------------------------------------------------
    # Serialization
    # ------------------------------------------------------------------

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'ExperimentConfig':
        errors: List[str] = []
        _check_keys(cls, data, '', errors)

        def section(name, kind):
            raw = data.get(name, {})
            if not isinstance(raw, dict):
                errors.append(f"{name} must be an object")
                return kind()
            _check_keys(kind, raw, f"{name}.", errors)
            return kind(**{k: v for k, v in raw.items() if k in _field_names(kind)})

        def entries(raw, prefix):
            out = []
            for i, item in enumerate(raw):
                if not isinstance(item, dict):
                    errors.append(f"{prefix}[{i}] must be an object")
                    continue
                _check_keys(ProbeEntry, item, f"{prefix}[{i}].", errors)
                if 'variant' in item and 'direction' in item:
                    out.append(ProbeEntry(item['variant'], item['direction']))
                else:
                    errors.append(f"{prefix}[{i}] needs 'variant' and 'direction'")
            return out

        config = cls(
            seed=data.get('seed', 1234),
            corpus=section('corpus', CorpusSection),
            model=section('model', ModelSection),
            train=section('train', TrainSection),
            checkpoints=section('checkpoints', CheckpointSection),
            top_x=list(data.get('top_x', [1.0, 5.0, 10.0])),
            beam=data.get('beam', 5),
            curve_length=data.get('curve_length', 500),
            output_dir=data.get('output_dir'),
        )
        raw_checkpoints = data.get('checkpoints', {})
        if isinstance(raw_checkpoints, dict) and raw_checkpoints.get('epochs') and 'select' not in raw_checkpoints:
            config.checkpoints.select = None
        if 'patterns' in data:
            patterns = []
            for i, item in enumerate(data['patterns']):
                _check_keys(ErrorPattern, item, f"patterns[{i}].", errors)
                try:
                    patterns.append(ErrorPattern(**item))
                except TypeError as e:
                    errors.append(f"patterns[{i}]: {e}")
            config.patterns = patterns
        if 'probes' in data:
            raw = data['probes']
            _check_keys(ProbeSection, raw, 'probes.', errors)
            probes = ProbeSection()
            if 'variants' in raw:
                probes.variants = entries(raw['variants'], 'probes.variants')
            if 'copy_variants' in raw:
                probes.copy_variants = entries(raw['copy_variants'], 'probes.copy_variants')
            probes.selectors = list(raw.get('selectors', probes.selectors))
            probes.copy_selectors = list(raw.get('copy_selectors', probes.copy_selectors))
            config.probes = probes
        if errors:
            raise ConfigValidationError(errors)
        return config

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'ExperimentConfig':
        try:
            data = json.loads(Path(path).read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigValidationError([f"{path}: invalid JSON ({e})"])
        if not isinstance(data, dict):
            raise ConfigValidationError([f"{path}: top level must be an object"])
        return cls.from_dict(data)

    def save(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n', encoding='utf-8')

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of every field except output_dir"""
        data = self.to_dict()
        data.pop('output_dir', None)
        canonical = json.dumps(data, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    # ------------------------------------------------------------------
    # Validation
    # ------------------------------------------------------------------

    def validate(self) -> Tuple[bool, List[str]]:
        """
        Check every section

        Returns:
            (is_valid, errors) with errors naming the offending fields
        """
        errors: List[str] = []
        c = self.corpus
        for name in ('n_examples', 'n_validation', 'n_test', 'n_copy_probes', 'n_random', 'filler_pool'):
            if getattr(c, name) < 0:
                errors.append(f"corpus.{name} must be >= 0")
        if c.n_examples < 1:
            errors.append("corpus.n_examples must be >= 1")
        if not 0.0 <= c.pattern_probability <= 1.0:
            errors.append("corpus.pattern_probability must be in [0, 1]")
        if c.copy_fraction < 0:
            errors.append("corpus.copy_fraction must be >= 0")
        if c.max_probes < 1:
            errors.append("corpus.max_probes must be >= 1")

        lexicon = default_lexicon()
        ids = [p.id for p in self.patterns]
        if len(set(ids)) != len(ids):
            errors.append("patterns: duplicate ids")
        for pattern in self.patterns:
            errors += validate_pattern(pattern, lexicon)[1]

        probe_model = self.model.to_model_config(len(lexicon) + 4, len(lexicon) + 4)
        errors += probe_model.validate()[1]

        t = self.train
        if len(t.betas) != 2 or not all(0 <= b < 1 for b in t.betas):
            errors.append("train.betas must be two values in [0, 1)")
        else:
            errors += t.to_options(self.seed, []).validate()[1]

        cp = self.checkpoints
        if cp.epochs and cp.select is not None:
            errors.append("checkpoints: set either 'epochs' or 'select', not both")
        if not cp.epochs and cp.select is None:
            errors.append("checkpoints: one of 'epochs' or 'select' is required")
        if cp.select is not None and cp.select < 1:
            errors.append("checkpoints.select must be >= 1")
        bad = [e for e in cp.epochs if not 1 <= e <= t.epochs]
        if bad:
            errors.append(f"checkpoints.epochs outside [1, {t.epochs}]: {bad}")

        for copy_mode in (False, True):
            prefix = 'probes.copy_' if copy_mode else 'probes.'
            for variant, direction in self.probes.matrix(copy_mode):
                try:
                    influence.parse_variant(variant)
                except ProbeSpecError as e:
                    errors.append(f"{prefix}variants: {e}")
                if direction not in influence.DIRECTIONS:
                    errors.append(f"{prefix}variants: direction '{direction}' for {variant}")
            for name in self.probes.selector_names(copy_mode):
                if name not in influence.SELECTOR_COMPONENTS:
                    errors.append(f"{prefix}selectors: unknown selector '{name}'")

        if not self.top_x:
            errors.append("top_x must be nonempty")
        for x in self.top_x:
            if not 0 < x <= 100:
                errors.append(f"top_x value {x} outside (0, 100]")
        if self.beam < 1:
            errors.append("beam must be >= 1")
        if self.curve_length < 1:
            errors.append("curve_length must be >= 1")
        return len(errors) == 0, errors

    def ensure_valid(self):
        ok, errors = self.validate()
        if not ok:
            raise ConfigValidationError(errors)

    def pattern(self, pattern_id: int) -> ErrorPattern:
        for p in self.patterns:
            if p.id == pattern_id:
                return p
        raise ConfigValidationError([f"pattern {pattern_id} is not defined (known: {[p.id for p in self.patterns]})"])


def _field_names(kind) -> set:
    return {f.name for f in fields(kind)}


def _check_keys(kind, data: Dict, prefix: str, errors: List[str]):
    unknown = sorted(set(data) - _field_names(kind))
    for key in unknown:
        errors.append(f"{prefix}{key}: unknown field")


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = 'run_manifest.json'


def file_checksum(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    files: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def load(cls, out_dir: Union[str, Path], config_hash: str) -> 'RunManifest':
        path = Path(out_dir) / MANIFEST_NAME
        if path.exists():
            data = json.loads(path.read_text(encoding='utf-8'))
            if data.get('config_hash') == config_hash:
                return cls(config_hash, data.get('files', {}), data.get('timings', {}))
            log.warning("Run manifest belongs to another config, starting fresh", path=str(path))
        return cls(config_hash)

    def refresh(self, out_dir: Union[str, Path]):
        """Rescan the output directory and checksum every artifact"""
        root = Path(out_dir)
        self.files = {
            str(p.relative_to(root)): file_checksum(p)
            for p in sorted(root.rglob('*'))
            if p.is_file() and p.name != MANIFEST_NAME and not p.name.endswith('.tmp')
        }

    def record(self, stage: str, started: float):
        self.timings[stage] = round(time.time() - started, 3)

    def save(self, out_dir: Union[str, Path]):
        payload = {'config_hash': self.config_hash, 'files': self.files, 'timings': self.timings}
        (Path(out_dir) / MANIFEST_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n',
                                                   encoding='utf-8')

    def verify(self, out_dir: Union[str, Path]) -> Tuple[bool, List[str]]:
        root = Path(out_dir)
        errors = []
        for name, checksum in self.files.items():
            path = root / name
            if not path.exists():
                errors.append(f"{name}: missing")
            elif file_checksum(path) != checksum:
                errors.append(f"{name}: checksum mismatch")
        return len(errors) == 0, errors
