"""
Tests for retrieval precision, threshold statistics, ranking curves and the sensitivity harness
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest
from hypothesis import given, strategies as st

import evaluation
from corpus import ParallelExample, NoiseManifest
from influence import InfluenceRanking


def ranking(ids, scores=None, probe_id='p', target='0', variant='HYP', selector='full'):
    scores = scores if scores is not None else [float(len(ids) - i) for i in range(len(ids))]
    return InfluenceRanking(probe_id, selector, variant, 'positive', [1], list(zip(ids, scores)), target)


def manifest_with(noisy_ids, total, target='0'):
    label = 'copy_noise' if target == 'copy' else f'pattern_noise:{target}'
    return NoiseManifest({i: (label if i in noisy_ids else 'clean') for i in range(total)})


# ---------------------------------------------------------------------------
# Precision
# ---------------------------------------------------------------------------

def test_precision_counts_hits_in_the_top_slice():
    r = ranking(list(range(10)))
    manifest = manifest_with({0, 2, 9}, 10)
    assert evaluation.precision_at_topx(r, manifest, 10) == 1.0
    assert evaluation.precision_at_topx(r, manifest, 30) == pytest.approx(2 / 3)
    assert evaluation.precision_at_topx(r, manifest, 100) == pytest.approx(0.3)


def test_precision_uses_at_least_one_item():
    r = ranking([5, 1, 2])
    assert evaluation.precision_at_topx(r, manifest_with({5}, 6), 1) == 1.0
    assert evaluation.precision_at_topx(r, manifest_with({1}, 6), 1) == 0.0


def test_precision_only_counts_the_probe_target():
    r = ranking([0, 1])
    manifest = NoiseManifest({0: 'pattern_noise:1', 1: 'pattern_noise:0,1'})
    assert evaluation.precision_at_topx(r, manifest, 50) == 0.0
    assert evaluation.precision_at_topx(r, manifest, 100) == 0.5
    assert evaluation.precision_at_topx(r, manifest, 50, target=1) == 1.0


def test_precision_argument_checks():
    with pytest.raises(ValueError):
        evaluation.precision_at_topx(ranking([1]), manifest_with(set(), 2), 0)
    with pytest.raises(ValueError):
        evaluation.precision_at_topx(ranking([]), manifest_with(set(), 2), 10)


def test_random_rankings_average_the_noise_rate():
    rng = np.random.default_rng(0)
    total, noisy = 200, set(range(0, 200, 4))
    manifest = manifest_with(noisy, total)
    values = [evaluation.precision_at_topx(ranking(list(rng.permutation(total))), manifest, 10)
              for _ in range(1000)]
    # hypergeometric standard error of the mean over 1000 shuffles is about 0.003
    assert abs(np.mean(values) - 0.25) <= 0.009


@given(st.lists(st.booleans(), min_size=1, max_size=60).filter(any), st.data(),
       st.sampled_from([1, 5, 10, 50, 100]))
def test_moving_a_hit_to_the_front_never_lowers_precision(flags, data, x):
    manifest = NoiseManifest({i: ('pattern_noise:0' if f else 'clean') for i, f in enumerate(flags)})
    hits = [i for i, f in enumerate(flags) if f]
    moved = data.draw(st.sampled_from(hits))
    base = ranking(list(range(len(flags))))
    promoted = ranking([moved] + [i for i in range(len(flags)) if i != moved])
    assert (evaluation.precision_at_topx(promoted, manifest, x)
            >= evaluation.precision_at_topx(base, manifest, x))


def test_macro_average_weights_patterns_equally():
    manifest = NoiseManifest({0: 'pattern_noise:0', 1: 'clean', 2: 'pattern_noise:1', 3: 'clean'})
    pattern0 = [ranking([0, 1], probe_id=f'p0-{i}', target='0') for i in range(3)]
    pattern1 = [ranking([3, 2], probe_id='p1-0', target='1')]
    report = evaluation.retrieval_report(pattern0 + pattern1, manifest, [50])
    assert report.per_pattern == {'0': [1.0], '1': [0.0]}
    assert report.macro == [0.5]
    assert evaluation.micro_average([evaluation.pattern_report(pattern0, manifest, [50]),
                                     evaluation.pattern_report(pattern1, manifest, [50])]) == [0.75]


def test_precision_grid_marks_gaps():
    manifest = manifest_with({0}, 3)
    rankings = [ranking([0, 1, 2], probe_id='p0-1', variant='HYP', selector='full')]
    grid = evaluation.precision_grid(rankings, manifest, [50], [('HYP', 'positive'), ('REF', 'negative')],
                                     ['full', 'srcEmb'])
    assert grid['HYP']['full'].macro == [1.0]
    assert grid['HYP']['srcEmb'] is None
    assert grid['REF']['full'] is None
    text = evaluation.format_precision_grid(grid, [50])
    assert 'top50%' in text.splitlines()[0]
    assert any(line.startswith('REF') and line.rstrip().endswith('-') for line in text.splitlines())


# ---------------------------------------------------------------------------
# Thresholding
# ---------------------------------------------------------------------------

def test_max_influence_uses_population_std():
    groups = {'HYP|full|positive': [ranking([1, 2], [0.2, 0.1], probe_id='a'),
                                    ranking([1, 2], [0.4, -0.3], probe_id='b')]}
    stats = evaluation.max_influence_stats(groups)
    summary = stats.max_influence['HYP|full|positive']
    assert summary['mean'] == pytest.approx(0.3)
    assert summary['std'] == pytest.approx(0.1)
    assert summary['n'] == 2
    assert stats.std == 'population'


def test_max_influence_skips_empty_rankings():
    groups = {'g': [ranking([1], [0.5], probe_id='a'), ranking([], [], probe_id='b')]}
    assert evaluation.max_influence_stats(groups).max_influence['g']['n'] == 1
    with pytest.raises(ValueError):
        evaluation.max_influence_stats({'g': [ranking([], [])]})


def test_largest_gap_cut_examples():
    assert evaluation.largest_gap_cut([0.9, 0.85, 0.2, 0.1]) == 2
    assert evaluation.largest_gap_cut([1.0, 0.0]) == 1
    assert evaluation.largest_gap_cut([0.5, 0.5, 0.5]) == 1
    assert evaluation.largest_gap_cut([3.0, 2.0, 1.0]) == 1
    assert evaluation.largest_gap_cut(ranking([4, 5, 6], [0.9, 0.2, 0.1])) == 1
    with pytest.raises(ValueError):
        evaluation.largest_gap_cut([0.4])


@given(st.lists(st.integers(min_value=-1000, max_value=1000), min_size=2, max_size=40),
       st.sampled_from([1, 2, 4, 8]), st.integers(min_value=-1000, max_value=1000))
def test_gap_cut_is_affine_invariant(values, a, b):
    scores = sorted((float(v) for v in values), reverse=True)
    cut = evaluation.largest_gap_cut(scores)
    assert 1 <= cut < len(scores)
    assert evaluation.largest_gap_cut([a * s + b for s in scores]) == cut


def test_gap_cut_stats_per_configuration():
    groups = {'g': [ranking([1, 2, 3], [0.9, 0.1, 0.0], probe_id='a'),
                    ranking([1, 2, 3], [0.9, 0.8, 0.0], probe_id='b')]}
    assert evaluation.gap_cut_stats(groups)['g'] == {'mean': 1.5, 'std': 0.5, 'n': 2}


def test_head_gap_cut_ignores_the_non_positive_tail():
    r = ranking([1, 2, 3, 4, 5], [0.9, 0.8, 0.05, -2.0, -9.0])
    assert evaluation.influential_head(r, 500) == [0.9, 0.8, 0.05]
    assert evaluation.influential_head(r, 2) == [0.9, 0.8]
    assert evaluation.largest_gap_cut(r) == 4
    assert evaluation.head_gap_cut(r, 500) == 2
    assert evaluation.head_gap_cut(ranking([1, 2], [0.4, -1.0]), 500) == 1
    assert evaluation.head_gap_cut(ranking([1, 2], [-0.4, -1.0]), 500) == 0
    flat = ranking([1, 2, 3], [0.5, 0.5, 0.5])
    assert evaluation.head_gap_cut(flat, 500) == 3
    with pytest.raises(ValueError):
        evaluation.influential_head(r, 0)


def test_gap_cut_stats_over_the_influential_head():
    groups = {'g': [ranking([1, 2, 3], [0.9, 0.1, -5.0], probe_id='a'),
                    ranking([1, 2, 3], [0.9, 0.8, -5.0], probe_id='b')]}
    assert evaluation.gap_cut_stats(groups)['g']['mean'] == 2.0
    assert evaluation.gap_cut_stats(groups, head=500)['g'] == {'mean': 1.5, 'std': 0.5, 'n': 2}


def test_ranking_curve_is_sorted_and_truncated():
    r = InfluenceRanking('p', 'full', 'REF', 'negative', [1], [(1, -0.5), (2, 0.1), (3, 0.4)], '0')
    curve = evaluation.ranking_curve(r, 2)
    assert curve.scores == [0.4, 0.1]
    assert evaluation.ranking_curve(r, 1).scores == [0.4]
    assert len(evaluation.ranking_curve(r, 50).scores) == 3
    with pytest.raises(ValueError):
        evaluation.ranking_curve(r, 0)


def test_curve_csv(tmp_path):
    curve = evaluation.RankingCurve('p', 'HYP|full|positive', [0.5, 0.25])
    evaluation.write_curve_csv(tmp_path / 'c.csv', curve)
    assert (tmp_path / 'c.csv').read_text().splitlines() == ['rank,score', '1,0.5', '2,0.25']


# ---------------------------------------------------------------------------
# Sensitivity
# ---------------------------------------------------------------------------

def test_perturbation_pairs():
    probe = ParallelExample(1, ('das', 'haus', 'ist', 'alt', '.'), ('the', 'house', 'is', 'old', '.'))
    partner = ParallelExample(2, ('ein', 'auto'), ('a', 'car'))
    assert evaluation.perturbation_pair(probe, 'identical') == (probe.src, probe.trg)
    assert evaluation.perturbation_pair(probe, 'random-source', partner) == (partner.src, probe.trg)
    assert evaluation.perturbation_pair(probe, 'random-target', partner) == (probe.src, partner.trg)
    assert evaluation.perturbation_pair(probe, 'punct-trg')[1][-1] == '!'
    with pytest.raises(ValueError):
        evaluation.perturbation_pair(probe, 'shuffle')


def test_sensitivity_identical_row_is_one(small_corpus, small_snapshots):
    examples, src_vocab, trg_vocab = small_corpus
    probe, pool = examples[0], examples[1:40]
    matrix = evaluation.sensitivity_matrix(probe, evaluation.PERTURBATIONS, ['srcEmb', 'output', 'full'],
                                           small_snapshots, src_vocab, trg_vocab, pool, seed=3)
    assert set(matrix) == set(evaluation.PERTURBATIONS)
    for selector in ('srcEmb', 'output', 'full'):
        assert matrix['identical'][selector] == pytest.approx(1.0, abs=1e-5)
        for kind in evaluation.PERTURBATIONS:
            assert -1.0 - 1e-6 <= matrix[kind][selector] <= 1.0 + 1e-6


def test_random_pairing_with_the_probe_itself(small_corpus, small_snapshots):
    examples, src_vocab, trg_vocab = small_corpus
    probe = examples[0]
    score = evaluation.random_pairing_stats(probe, [probe], 'full', 'random-source',
                                            small_snapshots, src_vocab, trg_vocab)
    assert score == pytest.approx(1.0, abs=1e-5)


def test_random_pairing_needs_a_pool(small_corpus, small_snapshots):
    examples, src_vocab, trg_vocab = small_corpus
    with pytest.raises(ValueError):
        evaluation.random_pairing_stats(examples[0], [], 'full', 'random-source',
                                        small_snapshots, src_vocab, trg_vocab)
    with pytest.raises(ValueError):
        evaluation.sensitivity_matrix(examples[0], ['random-source'], ['full'],
                                      small_snapshots, src_vocab, trg_vocab, pool=[])


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
