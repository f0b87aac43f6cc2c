#!/usr/bin/env python3
"""
gradsieve command line: gen | train | influence | report | check-grad | sensitivity
Drives the influence-based data-filtering pipeline from a single experiment config
"""

import os

# single-threaded BLAS keeps reductions reproducible; must precede the numpy import
for _var in ('OPENBLAS_NUM_THREADS', 'OMP_NUM_THREADS', 'MKL_NUM_THREADS'):
    os.environ[_var] = '1'

import argparse
import json
import logging
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import structlog
from dotenv import load_dotenv

import corpus
import evaluation
import influence
import seqmodel
from errors import (
    CheckpointFormatError,
    ConfigValidationError,
    GradSieveError,
    MissingPrerequisiteError,
    ProbeSpecError,
)
from experiment_config import ExperimentConfig, RunManifest

load_dotenv()

DEFAULT_OUT = os.getenv('GRADSIEVE_OUT', './runs')
DEFAULT_WORKERS = int(os.getenv('GRADSIEVE_WORKERS', '1'))
LOG_LEVEL = os.getenv('GRADSIEVE_LOG_LEVEL', 'INFO')

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VALIDATION = 2
EXIT_MISSING = 3
EXIT_INCOMPLETE = 4

SENSITIVITY_SELECTORS = ['srcEmb', 'trgEmb', 'encoder', 'output', 'full']

structlog.configure(
    wrapper_class=structlog.make_filtering_bound_logger(getattr(logging, LOG_LEVEL.upper(), logging.INFO)),
)
log = structlog.get_logger()


class RunPaths:
    """Output-directory layout shared by every stage"""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.corpus_dir = self.root / 'corpus'
        self.clean = self.corpus_dir / 'clean.tsv'
        self.poisoned = self.corpus_dir / 'poisoned.tsv'
        self.validation = self.corpus_dir / 'validation.tsv'
        self.probes = self.corpus_dir / 'probes.tsv'
        self.copy_probes = self.corpus_dir / 'copy_probes.tsv'
        self.filler = self.corpus_dir / 'filler.tsv'
        self.manifest = self.corpus_dir / 'manifest.json'
        self.vocab_src = self.corpus_dir / 'vocab_src.txt'
        self.vocab_trg = self.corpus_dir / 'vocab_trg.txt'
        self.checkpoints = self.root / 'checkpoints'
        self.history = self.checkpoints / 'history.csv'
        self.selected = self.checkpoints / 'selected.json'
        self.cache = self.root / 'cache' / 'train.gsim'
        self.probe_cases = self.root / 'probes'
        self.rankings = self.root / 'rankings'
        self.index = self.rankings / 'index.json'
        self.reports = self.root / 'reports'

    def checkpoint(self, epoch: int) -> Path:
        return self.checkpoints / f"epoch_{epoch:03d}.gsck"

    def cases_file(self, target: str) -> Path:
        return self.probe_cases / f"{target}.json"


def banner(title: str):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def require(*paths: Path):
    for path in paths:
        if not path.exists():
            raise MissingPrerequisiteError(str(path))


def write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n', encoding='utf-8')


def load_vocabularies(paths: RunPaths):
    require(paths.vocab_src, paths.vocab_trg)
    return seqmodel.load_vocabulary(paths.vocab_src), seqmodel.load_vocabulary(paths.vocab_trg)


def encode_all(examples: Sequence[corpus.ParallelExample], src_vocab, trg_vocab) -> List[seqmodel.TokenPair]:
    return [seqmodel.encode_pair(e, src_vocab, trg_vocab) for e in examples]


def load_snapshots(paths: RunPaths, src_vocab, trg_vocab) -> List[seqmodel.CheckpointSnapshot]:
    require(paths.selected)
    selected = json.loads(paths.selected.read_text(encoding='utf-8'))
    snapshots = []
    for epoch in selected['epochs']:
        require(paths.checkpoint(epoch))
        snapshot, header = seqmodel.load_checkpoint(paths.checkpoint(epoch))
        if (header.get('src_vocab_hash') != src_vocab.content_hash()
                or header.get('trg_vocab_hash') != trg_vocab.content_hash()):
            raise CheckpointFormatError(f"{paths.checkpoint(epoch)} was trained with different vocabularies")
        snapshots.append(snapshot)
    if not snapshots:
        raise MissingPrerequisiteError(str(paths.checkpoints), "No checkpoints were selected by the train stage")
    return snapshots


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def cmd_gen(config: ExperimentConfig, paths: RunPaths) -> int:
    banner("gradsieve - Corpus Generation")
    c = config.corpus
    spec = corpus.default_corpus_spec(c.n_examples, config.seed)
    paths.corpus_dir.mkdir(parents=True, exist_ok=True)

    clean = corpus.generate_clean_corpus(spec)
    poisoned = list(clean)
    manifest = corpus.NoiseManifest({e.id: e.provenance for e in clean})
    for pattern in config.patterns:
        poisoned, injected = corpus.inject_pattern_noise(poisoned, pattern, c.pattern_probability,
                                                         config.seed + 100 + pattern.id)
        manifest = manifest.merge(injected)
    if c.copy_fraction > 0:
        n_copies = int(np.floor(c.copy_fraction * len(poisoned)))
        sources = corpus.generate_copy_sources(spec, n_copies, config.seed + 200)
        poisoned, injected = corpus.inject_copy_noise(poisoned, c.copy_fraction, config.seed + 201, sources)
        manifest = manifest.merge(injected)

    validation = corpus.generate_clean_corpus(replace(spec, n_examples=c.n_validation, seed=config.seed + 1),
                                              id_offset=1_000_000)
    probes = corpus.generate_clean_corpus(replace(spec, n_examples=c.n_test, seed=config.seed + 2),
                                          id_offset=2_000_000)
    filler = corpus.generate_filler_pool(spec, c.filler_pool, config.seed + 4, id_offset=4_000_000)
    src_vocab, trg_vocab = corpus.build_vocabularies(poisoned, spec.lexicon)

    corpus.write_corpus_tsv(paths.clean, clean)
    corpus.write_corpus_tsv(paths.poisoned, poisoned)
    corpus.write_corpus_tsv(paths.validation, validation)
    corpus.write_corpus_tsv(paths.probes, probes)
    corpus.write_corpus_tsv(paths.filler, filler)
    if c.copy_fraction > 0:
        copy_sources = corpus.generate_copy_sources(spec, c.n_copy_probes, config.seed + 3)
        copy_probes = [corpus.ParallelExample(3_000_000 + i, src, corpus.translate(src, spec.lexicon))
                       for i, src in enumerate(copy_sources)]
        corpus.write_corpus_tsv(paths.copy_probes, copy_probes)
    corpus.write_manifest(paths.manifest, manifest)
    seqmodel.save_vocabulary(src_vocab, paths.vocab_src)
    seqmodel.save_vocabulary(trg_vocab, paths.vocab_trg)

    ok, problems = corpus.manifest_counts_consistent(poisoned, manifest, config.patterns)
    if not ok:
        log.warning("Manifest does not match corpus rescan", problems=problems[:10])

    print(f"✓ Clean corpus: {len(clean)} examples")
    print(f"✓ Poisoned corpus: {len(poisoned)} examples")
    for key, counts in sorted(manifest.counts.items()):
        print(f"  target {key}: train={counts['train']} noisy={counts['noisy']}")
    print(f"✓ Vocabularies: src={len(src_vocab)} trg={len(trg_vocab)}")
    print(f"{'✓' if ok else '✗'} Manifest consistent with corpus")
    return EXIT_OK


def cmd_train(config: ExperimentConfig, paths: RunPaths) -> int:
    banner("gradsieve - Training")
    require(paths.poisoned, paths.validation)
    src_vocab, trg_vocab = load_vocabularies(paths)
    train_pairs = encode_all(corpus.read_corpus_tsv(paths.poisoned), src_vocab, trg_vocab)
    validation_pairs = encode_all(corpus.read_corpus_tsv(paths.validation), src_vocab, trg_vocab)

    model_config = config.model.to_model_config(len(src_vocab), len(trg_vocab))
    explicit = list(config.checkpoints.epochs)
    opts = config.train.to_options(config.seed, explicit)
    result = seqmodel.train(model_config, train_pairs, opts, validation_pairs)

    if explicit:
        epochs = sorted(set(explicit))
    elif result.history.rows:
        epochs = influence.select_checkpoints(result.history, config.checkpoints.select)
    else:
        epochs = []

    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    for stale in paths.checkpoints.glob('epoch_*.gsck'):
        stale.unlink()
    extra = {'src_vocab_hash': src_vocab.content_hash(), 'trg_vocab_hash': trg_vocab.content_hash()}
    for snapshot in result.snapshots:
        if snapshot.epoch in epochs:
            seqmodel.save_checkpoint(snapshot, paths.checkpoint(snapshot.epoch), extra)
    paths.history.write_text(result.history.to_csv(), encoding='utf-8')
    write_json(paths.selected, {'epochs': epochs,
                                'initial_validation_loss': result.history.initial_validation_loss})

    print(f"✓ Parameters: {result.params.layout.size}")
    print(f"✓ Epochs trained: {len(result.history.rows)}")
    print(f"✓ Checkpoints kept: {epochs}")
    if result.history.rows:
        print(f"  final validation loss: {result.history.rows[-1][2]:.4f}")
    return EXIT_OK


def _load_index(paths: RunPaths) -> List[Dict]:
    if not paths.index.exists():
        return []
    return json.loads(paths.index.read_text(encoding='utf-8'))


def cmd_influence(
    config: ExperimentConfig,
    paths: RunPaths,
    workers: int = 1,
    pattern_id: Optional[int] = None,
    copy_mode: bool = False,
    fail_on_empty: bool = False,
) -> int:
    banner("gradsieve - Influence Ranking")
    require(paths.poisoned, paths.manifest)
    src_vocab, trg_vocab = load_vocabularies(paths)
    snapshots = load_snapshots(paths, src_vocab, trg_vocab)
    epochs = [s.epoch for s in snapshots]
    final = snapshots[-1]
    train_corpus = corpus.read_corpus_tsv(paths.poisoned)
    manifest = corpus.read_manifest(paths.manifest)

    if copy_mode:
        if config.corpus.copy_fraction <= 0:
            raise ConfigValidationError(["--copy-mode needs corpus.copy_fraction > 0"])
        require(paths.copy_probes)
        targets = [corpus.COPY_TARGET]
    elif pattern_id is not None:
        targets = [str(config.pattern(pattern_id).id)]
    else:
        targets = [str(p.id) for p in config.patterns]

    matrix = config.probes.matrix(copy_mode)
    selectors = config.probes.selector_names(copy_mode)
    totals = {'computed': 0, 'reused': 0}
    index = [e for e in _load_index(paths) if e['target'] not in targets]
    empty_targets = []
    paths.probe_cases.mkdir(parents=True, exist_ok=True)
    paths.cache.parent.mkdir(parents=True, exist_ok=True)

    for target in targets:
        if copy_mode:
            sources = corpus.read_corpus_tsv(paths.copy_probes)
            cases, rate = corpus.build_copy_probe_cases(final, sources, src_vocab, trg_vocab, config.beam,
                                                        config.corpus.max_probes)
            print(f"  copy rate on held-out sources: {rate:.3f}")
            subset = corpus.build_copy_subset(train_corpus, config.corpus.n_random, config.seed)
        else:
            require(paths.probes)
            pattern = config.pattern(int(target))
            cases = corpus.build_probe_cases(final, corpus.read_corpus_tsv(paths.probes), pattern,
                                             src_vocab, trg_vocab, config.beam, config.corpus.max_probes)
            subset = corpus.build_probing_subset(train_corpus, pattern, config.corpus.n_random, config.seed)
        corpus.write_probe_cases(paths.cases_file(target), cases)
        manifest.counts.setdefault(target, {'train': 0, 'noisy': 0})['probing'] = len(cases)

        if not cases:
            log.warning("No probe cases for target", target=target)
            print(f"✗ target {target}: no probe cases")
            empty_targets.append(target)
            continue

        cache, stats = influence.gradient_cache_build(
            snapshots, encode_all(subset, src_vocab, trg_vocab), paths.cache, workers=workers)
        for key in totals:
            totals[key] += stats[key]
        subset_ids = [e.id for e in subset]

        written = 0
        for case in cases:
            case_dir = paths.rankings / case.id
            case_dir.mkdir(parents=True, exist_ok=True)
            for variant, direction in matrix:
                try:
                    probe_grads = [
                        influence.build_probe_gradient(influence.ProbeGradientSpec(variant, case), s,
                                                       src_vocab, trg_vocab)
                        for s in snapshots
                    ]
                except ProbeSpecError as e:
                    log.warning("Probe variant skipped", probe=case.id, variant=variant, reason=str(e))
                    continue
                for selector in selectors:
                    ranking = influence.rank_subset(probe_grads, subset_ids, cache, epochs, selector, direction,
                                                    case.id, variant, target, workers)
                    name = f"{influence.variant_slug(variant)}__{selector}__{direction}.csv"
                    influence.write_ranking_csv(case_dir / name, ranking, manifest.provenance)
                    index.append({
                        'target': target, 'probe_id': case.id, 'variant': variant, 'selector': selector,
                        'direction': direction, 'epochs': epochs, 'path': f"{case.id}/{name}",
                    })
                    written += 1
        print(f"✓ target {target}: {len(cases)} probes, subset {len(subset_ids)}, {written} rankings")

    corpus.write_manifest(paths.manifest, manifest)
    paths.rankings.mkdir(parents=True, exist_ok=True)
    index.sort(key=lambda e: (e['target'], e['probe_id'], e['variant'], e['selector'], e['direction']))
    write_json(paths.index, index)
    print(f"✓ Gradients computed: {totals['computed']}, reused: {totals['reused']}")
    log.info("Influence stage finished", targets=targets, **totals)

    if empty_targets and fail_on_empty:
        return EXIT_INCOMPLETE
    return EXIT_OK


def _expected_rankings(config: ExperimentConfig, paths: RunPaths, targets: Sequence[str]) -> List[tuple]:
    expected = []
    for target in targets:
        cases_file = paths.cases_file(target)
        if not cases_file.exists():
            continue
        copy_mode = target == corpus.COPY_TARGET
        for case in corpus.read_probe_cases(cases_file):
            for variant, direction in config.probes.matrix(copy_mode):
                for selector in config.probes.selector_names(copy_mode):
                    expected.append((case.id, variant, selector, direction))
    return expected


def cmd_report(config: ExperimentConfig, paths: RunPaths) -> int:
    banner("gradsieve - Reports")
    require(paths.manifest)
    manifest = corpus.read_manifest(paths.manifest)
    index = _load_index(paths)
    paths.reports.mkdir(parents=True, exist_ok=True)

    if not index:
        evaluation.write_report_json(paths.reports / 'retrieval.json', {'patterns': {}, 'copy': {}, 'gaps': []})
        print("✗ No rankings found - run the influence stage first")
        return EXIT_MISSING

    rankings = [influence.read_indexed_ranking(paths.rankings, entry) for entry in index]

    pattern_rankings = [r for r in rankings if r.target != corpus.COPY_TARGET]
    copy_rankings = [r for r in rankings if r.target == corpus.COPY_TARGET]
    top_x = config.top_x
    payload = {'top_x': top_x, 'patterns': {}, 'copy': {}}
    text = []
    for key, group, copy_mode in (('patterns', pattern_rankings, False), ('copy', copy_rankings, True)):
        if not group:
            continue
        grid = evaluation.precision_grid(group, manifest, top_x, config.probes.matrix(copy_mode),
                                         config.probes.selector_names(copy_mode))
        payload[key] = {v: {s: (r.to_dict() if r else None) for s, r in row.items()} for v, row in grid.items()}
        text.append(f"[{key}] macro precision at top-X%\n")
        text.append(evaluation.format_precision_grid(grid, top_x))

    present = {(r.probe_id, r.variant, r.selector, r.direction) for r in rankings}
    targets = sorted({e['target'] for e in index})
    gaps = [list(e) for e in _expected_rankings(config, paths, targets) if e not in present]
    payload['gaps'] = gaps
    evaluation.write_report_json(paths.reports / 'retrieval.json', payload)
    evaluation.write_report_text(paths.reports / 'retrieval.txt', '\n'.join(text))

    groups: Dict[str, List[influence.InfluenceRanking]] = {}
    for ranking in rankings:
        if ranking.direction == 'positive' and len(ranking):
            groups.setdefault(f"{ranking.target}|{ranking.label()}", []).append(ranking)
    stats = evaluation.max_influence_stats(groups)
    stats.gap_cuts = evaluation.gap_cut_stats(groups, head=config.curve_length)
    evaluation.write_report_json(paths.reports / 'threshold_stats.json', stats.to_dict())
    cuts = {
        r.probe_id + '|' + r.label(): evaluation.head_gap_cut(r, config.curve_length)
        for group in groups.values() for r in group
    }
    evaluation.write_report_json(paths.reports / 'gap_cuts.json', cuts)

    curves_dir = paths.reports / 'curves'
    curves_dir.mkdir(parents=True, exist_ok=True)
    for group in groups.values():
        for ranking in group:
            curve = evaluation.ranking_curve(ranking, config.curve_length)
            name = f"{ranking.probe_id}__{influence.variant_slug(ranking.variant)}__{ranking.selector}.csv"
            evaluation.write_curve_csv(curves_dir / name, curve)

    print(''.join(text))
    print(f"✓ Rankings read: {len(rankings)}")
    if gaps:
        print(f"✗ Missing rankings: {len(gaps)} (see reports/retrieval.json 'gaps')")
        return EXIT_INCOMPLETE
    return EXIT_OK


def check_grad_config() -> seqmodel.ModelConfig:
    """Tiny 64-bit model well under 500 parameters"""
    return seqmodel.ModelConfig(embed_dim=2, hidden_dim=2, src_vocab_size=7, trg_vocab_size=7,
                                max_positions=6, dtype='float64')


def cmd_check_grad(config: ExperimentConfig, tolerance: float = 1e-5) -> int:
    banner("gradsieve - Gradient Check")
    model_config = check_grad_config()
    passed = True
    for tie in (False, True):
        cfg = replace(model_config, tie_trg_embedding_and_output=tie)
        for seed in (config.seed, config.seed + 1):
            error = seqmodel.finite_difference_check(cfg, seed)
            ok = error <= tolerance
            passed = passed and ok
            print(f"{'✓' if ok else '✗'} seed={seed} tied={tie} max relative error {error:.2e}")
    return EXIT_OK if passed else EXIT_FAILURE


def cmd_sensitivity(config: ExperimentConfig, paths: RunPaths, all_checkpoints: bool = False) -> int:
    banner("gradsieve - Component Sensitivity")
    require(paths.probes, paths.filler)
    src_vocab, trg_vocab = load_vocabularies(paths)
    snapshots = load_snapshots(paths, src_vocab, trg_vocab)
    if not all_checkpoints:
        snapshots = snapshots[-1:]
    probe = corpus.read_corpus_tsv(paths.probes)[0]
    pool = corpus.read_corpus_tsv(paths.filler)

    matrix = evaluation.sensitivity_matrix(probe, evaluation.PERTURBATIONS, SENSITIVITY_SELECTORS, snapshots,
                                           src_vocab, trg_vocab, pool, config.seed)
    pairing = {
        mode: {sel: evaluation.random_pairing_stats(probe, pool, sel, mode, snapshots, src_vocab, trg_vocab)
               for sel in ('srcEmb', 'output')}
        for mode in evaluation.PAIRING_MODES
    }
    paths.reports.mkdir(parents=True, exist_ok=True)
    evaluation.write_report_json(paths.reports / 'sensitivity.json', {
        'probe': {'src': ' '.join(probe.src), 'trg': ' '.join(probe.trg)},
        'epochs': [s.epoch for s in snapshots],
        'matrix': matrix,
        'random_pairing': pairing,
        'pool_size': len(pool),
    })
    for kind, row in matrix.items():
        print(f"  {kind:14s} " + '  '.join(f"{sel}={score:+.3f}" for sel, score in row.items()))
    for mode, row in pairing.items():
        print(f"  mean |score| {mode:14s} " + '  '.join(f"{sel}={v:.3f}" for sel, v in row.items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='gradsieve', description=__doc__.strip().split('\n')[0])
    parser.add_argument('command', choices=['gen', 'train', 'influence', 'report', 'check-grad', 'sensitivity'])
    parser.add_argument('--config', help='Experiment config (JSON)')
    parser.add_argument('--out', help=f'Output directory (default: config output_dir or {DEFAULT_OUT})')
    parser.add_argument('--workers', type=int, default=DEFAULT_WORKERS, help='Threads for gradient caching/scoring')
    target = parser.add_mutually_exclusive_group()
    target.add_argument('--pattern', type=int, help='Only this error-pattern id')
    target.add_argument('--copy-mode', action='store_true', help='Rank against copied-source noise')
    parser.add_argument('--fail-on-empty', action='store_true', help='Exit 4 when a target yields no probes')
    parser.add_argument('--all-checkpoints', action='store_true', help='Sensitivity over every kept checkpoint')
    return parser


def run(args: argparse.Namespace) -> int:
    if args.config:
        config = ExperimentConfig.load(args.config)
    elif args.command == 'check-grad':
        config = ExperimentConfig()
    else:
        raise ConfigValidationError(["--config is required"])
    config.ensure_valid()

    if args.command == 'check-grad':
        return cmd_check_grad(config)

    paths = RunPaths(Path(args.out or config.output_dir or DEFAULT_OUT))
    paths.root.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.load(paths.root, config.config_hash())
    started = time.time()

    if args.command == 'gen':
        code = cmd_gen(config, paths)
    elif args.command == 'train':
        code = cmd_train(config, paths)
    elif args.command == 'influence':
        code = cmd_influence(config, paths, max(1, args.workers), args.pattern, args.copy_mode, args.fail_on_empty)
    elif args.command == 'report':
        code = cmd_report(config, paths)
    else:
        code = cmd_sensitivity(config, paths, args.all_checkpoints)

    manifest.record(args.command, started)
    manifest.refresh(paths.root)
    manifest.save(paths.root)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigValidationError as e:
        print("✗ Invalid configuration:")
        for error in e.errors:
            print(f"  - {error}")
        return EXIT_VALIDATION
    except MissingPrerequisiteError as e:
        print(f"✗ {e}")
        return EXIT_MISSING
    except GradSieveError as e:
        print(f"✗ {type(e).__name__}: {e}")
        return EXIT_FAILURE
    except Exception as e:
        print(f"Error running {args.command}: {e}")
        traceback.print_exc()
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
