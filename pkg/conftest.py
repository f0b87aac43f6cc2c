"""
Shared pytest fixtures for the gradsieve test suite
"""

import os
import sys

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import pytest

import corpus
import seqmodel

RUN_SLOW = os.getenv('GRADSIEVE_RUN_SLOW') == '1'


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: full-size pipeline runs (set GRADSIEVE_RUN_SLOW=1)')


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set GRADSIEVE_RUN_SLOW=1 to run")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_config():
    return seqmodel.ModelConfig(embed_dim=4, hidden_dim=4, src_vocab_size=9, trg_vocab_size=10,
                                max_positions=8, dtype='float64')


@pytest.fixture
def tiny_params(tiny_config):
    return seqmodel.init_params(tiny_config, seed=7, scale=0.3)


@pytest.fixture
def small_corpus():
    """A few hundred clean template sentences with their vocabularies"""
    spec = corpus.default_corpus_spec(n_examples=300, seed=11)
    examples = corpus.generate_clean_corpus(spec)
    src_vocab, trg_vocab = corpus.build_vocabularies(examples, spec.lexicon)
    return examples, src_vocab, trg_vocab


@pytest.fixture
def small_snapshots(small_corpus):
    """Two checkpoints of a small model trained for two epochs on small_corpus"""
    examples, src_vocab, trg_vocab = small_corpus
    config = seqmodel.ModelConfig(embed_dim=8, hidden_dim=8, src_vocab_size=len(src_vocab),
                                  trg_vocab_size=len(trg_vocab))
    pairs = [seqmodel.encode_pair(e, src_vocab, trg_vocab) for e in examples]
    result = seqmodel.train(config, pairs, seqmodel.TrainOptions(epochs=2, batch_size=32, seed=3))
    return result.snapshots
