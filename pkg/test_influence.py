"""
Tests for gradient similarity, probe gradients, ranking and checkpoint selection
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from structlog.testing import capture_logs

import influence
import seqmodel
from corpus import ProbeCase
from errors import CacheMissError, CheckpointMismatchError, IncompatibleGradientError, ProbeSpecError
from influence import ComponentSelector, InfluenceRanking, ProbeGradientSpec
from seqmodel import CheckpointSnapshot, GradientVector, Layout, ModelConfig, TokenPair, Vocabulary

FLAT = Layout(components=(('srcEmb', 0, 3),), tensors=(), size=3)
SPLIT = Layout(components=(('srcEmb', 0, 3), ('encoder', 3, 3)), tensors=(), size=6)


def vec(values, layout=FLAT, epoch=None, example_id=None):
    return GradientVector(layout, np.asarray(values, dtype=np.float64), example_id=example_id, epoch=epoch)


finite = st.floats(min_value=-100, max_value=100, allow_nan=False, allow_infinity=False)
vectors = st.lists(finite, min_size=3, max_size=3).filter(lambda v: math.sqrt(sum(x * x for x in v)) > 1e-3)


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------

def test_cosine_of_hand_vectors():
    assert influence.cosine_similarity(vec([1, 2, 2]), vec([2, 0, 1])) == pytest.approx(4 / (3 * math.sqrt(5)))


def test_cosine_extremes():
    g = vec([0.3, -1.2, 2.0])
    assert influence.cosine_similarity(g, g) == pytest.approx(1.0, abs=1e-6)
    assert influence.cosine_similarity(g, -g) == pytest.approx(-1.0, abs=1e-6)
    assert influence.cosine_similarity(g, g.scaled(2.0)) == pytest.approx(1.0, abs=1e-6)


def test_cosine_of_zero_vector_is_zero():
    assert influence.cosine_similarity(vec([0, 0, 0]), vec([1, 2, 3])) == 0.0


@settings(max_examples=50, deadline=None)
@given(vectors, vectors)
def test_cosine_is_symmetric_and_bounded(a, b):
    forward = influence.cosine_similarity(vec(a), vec(b))
    assert forward == pytest.approx(influence.cosine_similarity(vec(b), vec(a)), abs=1e-12)
    assert -1 - 1e-9 <= forward <= 1 + 1e-9


@settings(max_examples=50, deadline=None)
@given(vectors, vectors, st.floats(min_value=0.1, max_value=10))
def test_cosine_is_scale_invariant(a, b, alpha):
    plain = influence.cosine_similarity(vec(a), vec(b))
    assert influence.cosine_similarity(vec(a).scaled(alpha), vec(b)) == pytest.approx(plain, abs=1e-9)


def test_selectors_restrict_the_vector():
    g1 = vec([1, 0, 0, 5, 5, 5], SPLIT)
    g2 = vec([1, 0, 0, -5, -5, -5], SPLIT)
    assert influence.cosine_similarity(g1, g2, 'srcEmb') == pytest.approx(1.0)
    assert influence.cosine_similarity(g1, g2, 'encoder') == pytest.approx(-1.0)
    assert influence.dot_product(g1, g2, ['srcEmb', 'encoder']) == pytest.approx(1 - 75)


def test_full_selector_matches_flat_cosine(tiny_params):
    a = seqmodel.per_example_gradient(tiny_params, TokenPair((4, 5), (6, 7)))
    b = seqmodel.per_example_gradient(tiny_params, TokenPair((5, 6, 7), (8, 7)))
    expected = a.values @ b.values / (np.linalg.norm(a.values) * np.linalg.norm(b.values))
    assert influence.cosine_similarity(a, b, 'full') == pytest.approx(expected, abs=1e-6)


def test_unknown_selector_is_rejected():
    with pytest.raises(ValueError):
        ComponentSelector.parse('attention')
    with pytest.raises(ValueError):
        ComponentSelector.parse(['srcEmb', 'bogus'])
    with pytest.raises(ValueError):
        influence.cosine_similarity(vec([1, 2, 3]), vec([1, 2, 3]), 'output')


def test_layout_mismatch_is_rejected():
    with pytest.raises(IncompatibleGradientError):
        influence.cosine_similarity(vec([1, 2, 3]), vec([1, 2, 3, 4, 5, 6], SPLIT))


# ---------------------------------------------------------------------------
# TracIn
# ---------------------------------------------------------------------------

def _with_cosine(c, epoch):
    return vec([c, math.sqrt(1 - c * c), 0], epoch=epoch)


def test_tracin_averages_checkpoint_cosines():
    probe = [vec([1, 0, 0], epoch=1), vec([1, 0, 0], epoch=2)]
    train = [_with_cosine(0.2, 1), _with_cosine(0.4, 2)]
    assert influence.tracin(probe, train) == pytest.approx(0.3)


def test_tracin_with_one_checkpoint_is_the_cosine():
    a, b = vec([1, 2, 2], epoch=5), vec([2, 0, 1], epoch=5)
    assert influence.tracin([a], [b]) == influence.cosine_similarity(a, b)


def test_tracin_checkpoint_checks():
    with pytest.raises(CheckpointMismatchError):
        influence.tracin([], [])
    with pytest.raises(CheckpointMismatchError):
        influence.tracin([vec([1, 0, 0], epoch=1)], [vec([1, 0, 0], epoch=1), vec([1, 0, 0], epoch=2)])
    with pytest.raises(CheckpointMismatchError):
        influence.tracin([vec([1, 0, 0], epoch=1)], [vec([1, 0, 0], epoch=2)])


def test_raw_dot_grows_with_repetition_but_cosine_does_not():
    probe = [vec([0.5, 1.0, -0.2], epoch=1)]
    short = [vec([0.4, 0.9, 0.1], epoch=1)]
    repeated = [short[0].scaled(3.0)]
    assert influence.raw_dot_influence(probe, repeated) == pytest.approx(3 * influence.raw_dot_influence(probe, short))
    assert influence.tracin(probe, repeated) == pytest.approx(influence.tracin(probe, short))


split_vectors = st.lists(finite, min_size=6, max_size=6).filter(
    lambda v: math.sqrt(sum(x * x for x in v[:3])) > 1e-3 and math.sqrt(sum(x * x for x in v[3:])) > 1e-3)
nonzero_scales = st.one_of(st.floats(min_value=-10, max_value=-0.1), st.floats(min_value=0.1, max_value=10))


def _checkpoints(rows):
    return [vec(values, SPLIT, epoch=epoch) for epoch, values in enumerate(rows, 1)]


@settings(max_examples=100, deadline=None)
@given(st.lists(split_vectors, min_size=2, max_size=2), st.lists(split_vectors, min_size=2, max_size=2),
       st.sampled_from(['full', 'srcEmb', 'encoder']))
def test_tracin_is_symmetric(a, b, sel):
    a, b = _checkpoints(a), _checkpoints(b)
    assert influence.tracin(a, b, sel) == pytest.approx(influence.tracin(b, a, sel), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(split_vectors, split_vectors, nonzero_scales, nonzero_scales, st.sampled_from(['full', 'srcEmb']))
def test_tracin_scaling_keeps_only_the_sign(g, h, alpha, beta, sel):
    g, h = _checkpoints([g]), _checkpoints([h])
    plain = influence.tracin(g, h, sel)
    scaled = influence.tracin([g[0].scaled(alpha)], [h[0].scaled(beta)], sel)
    assert scaled == pytest.approx(math.copysign(1.0, alpha * beta) * plain, abs=1e-9)


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def test_diff_mask_marks_unaligned_tokens():
    assert influence.diff_mask(['in', 'january', 'we'], ['in', 'august', 'we']) == [0, 1, 0]
    assert influence.diff_mask(['a', 'b'], ['a', 'b']) == [0, 0]
    assert influence.diff_mask(['a', 'b'], ['c', 'd']) == [1, 1]
    assert influence.diff_mask(['a', 'x', 'b', 'c'], ['a', 'b', 'c']) == [0, 1, 0, 0]


@given(st.lists(st.sampled_from(['a', 'b', 'c', 'd']), min_size=1, max_size=8),
       st.lists(st.sampled_from(['a', 'b', 'c', 'd']), min_size=1, max_size=8))
def test_diff_mask_keeps_a_common_subsequence(hyp, ref):
    mask = influence.diff_mask(hyp, ref)
    assert len(mask) == len(hyp)
    kept = [t for t, m in zip(hyp, mask) if m == 0]
    it = iter(ref)
    assert all(token in it for token in kept)
    assert influence.diff_mask(hyp, hyp) == [0] * len(hyp)


def test_exact_mask_and_fallback():
    assert influence.exact_mask(['in', 'january'], ['in', 'august']) == [0, 1]
    with capture_logs() as logs:
        mask = influence.exact_mask(['in', 'january', 'now'], ['in', 'august'])
    assert mask == influence.diff_mask(['in', 'january', 'now'], ['in', 'august'])
    assert any(entry['log_level'] == 'warning' for entry in logs)


@given(st.lists(st.sampled_from(['in', 'we', 'go', '.', 'august']), min_size=1, max_size=8),
       st.lists(st.sampled_from(['in', 'we', 'go', '.', 'august', 'to']), min_size=1, max_size=8))
def test_exact_mask_stays_inside_diff_mask(corrected, reference):
    # the wrong word never occurs in the reference, so LCS cannot keep an error position
    hyp = ['january' if token == 'august' else token for token in corrected]
    exact = influence.exact_mask(hyp, corrected)
    assert exact == [int(token == 'january') for token in hyp]
    assert all(e <= d for e, d in zip(exact, influence.diff_mask(hyp, reference)))


# ---------------------------------------------------------------------------
# Probe gradients
# ---------------------------------------------------------------------------

@pytest.fixture
def probe_setup():
    src_vocab = Vocabulary.build(['im', 'august', 'fahren'])
    trg_vocab = Vocabulary.build(['in', 'august', 'january', 'drive'])
    config = ModelConfig(embed_dim=4, hidden_dim=4, src_vocab_size=len(src_vocab),
                         trg_vocab_size=len(trg_vocab), dtype='float64')
    snapshot = CheckpointSnapshot(1, seqmodel.init_params(config, seed=4, scale=0.3), 1.0)
    case = ProbeCase('p0-1', ('im', 'august'), ('in', 'january'), ('in', 'august'), ('in', 'august'), 0)
    return snapshot, src_vocab, trg_vocab, case


def _probe_grad(variant, setup, case=None):
    snapshot, src_vocab, trg_vocab, default_case = setup
    return influence.build_probe_gradient(ProbeGradientSpec(variant, case or default_case),
                                          snapshot, src_vocab, trg_vocab)


def test_self_difference_is_zero(probe_setup):
    assert not np.any(_probe_grad('GradDiff(HYP,HYP)', probe_setup).values)


def test_difference_matches_subtraction(probe_setup):
    diff = _probe_grad('GradDiff(HYP,CorrHYP)', probe_setup)
    expected = _probe_grad('HYP', probe_setup).values - _probe_grad('CorrHYP', probe_setup).values
    assert np.array_equal(diff.values, expected)


def test_difference_cancels_rows_of_unused_source_words(probe_setup):
    snapshot, src_vocab, _, _ = probe_setup
    diff = _probe_grad('GradDiff(HYP,CorrHYP)', probe_setup)
    rows = diff.tensor('src_embedding')
    assert not np.any(rows[src_vocab.index['fahren']])
    assert np.any(rows[src_vocab.index['august']])


def test_full_mask_equals_unmasked_hypothesis(probe_setup):
    case = ProbeCase('p0-2', ('im', 'august'), ('in', 'january'), ('drive', 'august'), None, 0)
    assert influence.probe_target(case, 'HypMask')[1] == [1, 1]
    assert np.array_equal(_probe_grad('HypMask', probe_setup, case).values,
                          _probe_grad('HYP', probe_setup, case).values)


def test_exact_mask_variants_target_the_error_token(probe_setup):
    _, _, _, case = probe_setup
    assert influence.probe_target(case, 'HypMaskExact') == (('in', 'january'), [0, 1])
    assert influence.probe_target(case, 'CorrHypMaskExact') == (('in', 'august'), [0, 1])


def test_missing_corrected_hypothesis_is_a_probe_error(probe_setup):
    case = ProbeCase('copy-1', ('im', 'august'), ('im', 'august'), ('in', 'august'), copy=True)
    with pytest.raises(ProbeSpecError):
        _probe_grad('GradDiff(HYP,CorrHYP)', probe_setup, case)


def test_variant_parsing():
    assert influence.parse_variant('HYP') == ('HYP',)
    assert influence.parse_variant('GradDiff(HYP, REF)') == ('HYP', 'REF')
    assert influence.variant_slug('GradDiff(HYP,CorrHYP)') == 'GradDiff-HYP-CorrHYP'
    for bad in ('hyp', 'GradDiff(HYP,Nope)', 'GradDiff(GradDiff(HYP,REF),REF)'):
        with pytest.raises(ProbeSpecError):
            influence.parse_variant(bad)


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------

def _random_source(rng, n, epochs=(1, 2)):
    source = {}
    for example_id in range(n):
        source[example_id] = [vec(rng.normal(size=6), SPLIT, epoch=e, example_id=example_id) for e in epochs]
    # exact ties
    source[n] = [vec(g.values.copy(), SPLIT, epoch=g.epoch, example_id=n) for g in source[3]]
    source[n + 1] = [vec(g.values.copy(), SPLIT, epoch=g.epoch, example_id=n + 1) for g in source[0]]
    return source


@pytest.mark.parametrize('seed', range(50))
@pytest.mark.parametrize('direction', influence.DIRECTIONS)
def test_rank_subset_matches_brute_force(seed, direction):
    rng = np.random.default_rng(seed)
    source = _random_source(rng, int(rng.integers(5, 199)))
    assert len(source) <= 200
    probe = [vec(rng.normal(size=6), SPLIT, epoch=e) for e in (1, 2)]
    for sel in ('full', 'srcEmb'):
        ranking = influence.rank_subset(probe, list(source), source, [1, 2], sel, direction)
        assert ranking.entries == influence.brute_force_rank(probe, source, sel, direction)


def test_parallel_scoring_gives_the_same_ranking():
    rng = np.random.default_rng(42)
    source = _random_source(rng, 60)
    probe = [vec(rng.normal(size=6), SPLIT, epoch=e) for e in (1, 2)]
    serial = influence.rank_subset(probe, list(source), source, [1, 2])
    threaded = influence.rank_subset(probe, list(source), source, [1, 2], workers=4)
    assert serial.entries == threaded.entries


def test_ties_break_by_ascending_id():
    g = vec([1, 2, 2], epoch=1)
    source = {9: [vec([2, 4, 4], epoch=1)], 4: [vec([1, 2, 2], epoch=1)], 6: [vec([0, 1, 0], epoch=1)]}
    ranking = influence.rank_subset([g], [9, 4, 6], source, [1])
    assert ranking.example_ids[:2] == [4, 9]
    negative = influence.rank_subset([g], [9, 4, 6], source, [1], direction='negative')
    assert negative.example_ids == [6, 4, 9]


def test_probe_ranks_its_own_training_pair_first(tiny_params):
    pairs = [TokenPair((4, 5), (6, 7), 0), TokenPair((5, 6, 7), (8, 9), 1),
             TokenPair((4, 8), (6, 9, 7), 2), TokenPair((7,), (5,), 3)]
    source = {p.example_id: [seqmodel.per_example_gradient(tiny_params, p)] for p in pairs}
    probe = [seqmodel.per_example_gradient(tiny_params, TokenPair((4, 8), (6, 9, 7)))]
    ranking = influence.rank_subset(probe, [0, 1, 2, 3], source, [None])
    assert ranking.example_ids[0] == 2
    assert ranking.scores[0] == pytest.approx(1.0, abs=1e-9)


def test_empty_subset_gives_empty_ranking():
    ranking = influence.rank_subset([vec([1, 0, 0], epoch=1)], [], {}, [1], probe_id='p', target='0')
    assert len(ranking) == 0
    assert ranking.label() == '|full|positive'


def test_missing_gradients_raise_cache_miss():
    source = {1: [vec([1, 0, 0], epoch=1), vec([0, 1, 0], epoch=2)]}
    with pytest.raises(CacheMissError) as info:
        influence.rank_subset([vec([1, 0, 0], epoch=1), vec([1, 0, 0], epoch=2)], [1, 7], source, [1, 2])
    assert info.value.missing == [(7, 1), (7, 2)]


def test_ranking_csv_roundtrip(tmp_path):
    ranking = InfluenceRanking('p0-3', 'full', 'HYP', 'positive', [1, 2], [(5, 0.75), (2, -0.125)], '0')
    path = tmp_path / 'HYP__full__positive.csv'
    influence.write_ranking_csv(path, ranking, {5: 'pattern_noise:0', 2: 'clean'})
    loaded, provenance = influence.read_ranking_csv(path, probe_id='p0-3', selector='full', variant='HYP',
                                                    direction='positive', epochs=[1, 2], target='0')
    assert loaded == ranking
    assert provenance == {5: 'pattern_noise:0', 2: 'clean'}


def test_indexed_ranking_resolves_path_against_rankings_dir(tmp_path):
    ranking = InfluenceRanking('p0-3', 'srcEmb', 'HYP', 'negative', [4], [(1, 0.5)], '0')
    (tmp_path / 'p0-3').mkdir()
    influence.write_ranking_csv(tmp_path / 'p0-3' / 'HYP__srcEmb__negative.csv', ranking, {})
    entry = {'target': '0', 'probe_id': 'p0-3', 'variant': 'HYP', 'selector': 'srcEmb',
             'direction': 'negative', 'epochs': [4], 'path': 'p0-3/HYP__srcEmb__negative.csv'}
    assert influence.read_indexed_ranking(tmp_path, entry) == ranking


# ---------------------------------------------------------------------------
# Checkpoint selection
# ---------------------------------------------------------------------------

def test_single_checkpoint_is_the_final_epoch():
    assert influence.select_checkpoints([3.0, 2.0, 1.5, 1.4, 1.35], 1) == [5]


def test_asking_for_more_checkpoints_than_epochs_returns_all():
    assert influence.select_checkpoints([3.0, 2.0, 1.5], 7) == [1, 2, 3]


def test_equal_steps_prefer_earlier_epochs():
    assert influence.select_checkpoints([4.0, 3.0, 2.0, 1.0], 2) == [1, 4]
    assert influence.select_checkpoints([4.0, 3.0, 2.0, 1.0], 3) == [1, 2, 4]


def test_largest_changes_are_selected():
    losses = [5.0, 4.9, 3.0, 2.9, 2.0, 1.99]
    assert influence.select_checkpoints(losses, 3) == [3, 5, 6]


def test_history_initial_loss_ranks_the_first_epoch():
    history = seqmodel.TrainingHistory(10.0, [(1, 0, 4.0), (2, 0, 3.0), (3, 0, 2.0), (4, 0, 1.0)])
    assert influence.select_checkpoints(history, 2) == [1, 4]


def test_selection_argument_checks():
    with pytest.raises(ValueError):
        influence.select_checkpoints([1.0], 0)
    with pytest.raises(ValueError):
        influence.select_checkpoints([], 2)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
