"""
Tests for experiment configuration loading, validation, hashing and the run manifest
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import json
from pathlib import Path

import pytest

from errors import ConfigValidationError
from experiment_config import ExperimentConfig, RunManifest

CONFIG_DIR = Path(__file__).resolve().parent / 'configs'


def test_defaults_are_valid():
    config = ExperimentConfig()
    assert config.validate() == (True, [])
    assert [p.src_word for p in config.patterns] == ['august', 'deutschland', 'oktober', 'tuerkei']
    assert len(config.probes.matrix()) == 8
    assert config.probes.selector_names() == ['srcEmb', 'encoder', 'trgEmb', 'output', 'concat', 'full']


@pytest.mark.parametrize('path', sorted(CONFIG_DIR.glob('*.json')), ids=lambda p: p.name)
def test_shipped_configs_load_and_validate(path):
    config = ExperimentConfig.load(path)
    ok, errors = config.validate()
    assert ok, errors


def test_dict_roundtrip():
    config = ExperimentConfig.load(CONFIG_DIR / 'shared_params.json')
    assert ExperimentConfig.from_dict(json.loads(json.dumps(config.to_dict()))) == config


def test_save_and_load(tmp_path):
    config = ExperimentConfig(seed=5, top_x=[2.0])
    config.save(tmp_path / 'c.json')
    loaded = ExperimentConfig.load(tmp_path / 'c.json')
    assert loaded == config
    assert loaded.config_hash() == config.config_hash()


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigValidationError) as info:
        ExperimentConfig.from_dict({'sed': 1, 'corpus': {'n_exmaples': 10}})
    assert 'sed: unknown field' in info.value.errors
    assert 'corpus.n_exmaples: unknown field' in info.value.errors


def test_invalid_json_is_a_validation_error(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"seed": ', encoding='utf-8')
    with pytest.raises(ConfigValidationError):
        ExperimentConfig.load(path)


@pytest.mark.parametrize('data, fragment', [
    ({'top_x': [0]}, 'top_x'),
    ({'top_x': []}, 'top_x'),
    ({'model': {'embed_dim': 8, 'hidden_dim': 16, 'tie_trg_embedding_and_output': True}},
     'tie_trg_embedding_and_output'),
    ({'corpus': {'pattern_probability': 1.5}}, 'pattern_probability'),
    ({'probes': {'selectors': ['attention']}}, 'attention'),
    ({'probes': {'variants': [{'variant': 'GradDiff(HYP,XYZ)', 'direction': 'positive'}]}}, 'XYZ'),
    ({'probes': {'variants': [{'variant': 'HYP', 'direction': 'sideways'}]}}, 'sideways'),
    ({'checkpoints': {'epochs': [1, 2], 'select': 3}}, 'either'),
    ({'checkpoints': {'epochs': [99]}}, 'checkpoints.epochs'),
    ({'patterns': [{'id': 0, 'src_word': 'august', 'correct_trg': 'june', 'wrong_trg': 'may'}]}, 'lexicon'),
    ({'beam': 0}, 'beam'),
])
def test_validation_names_the_offending_field(data, fragment):
    ok, errors = ExperimentConfig.from_dict(data).validate()
    assert not ok
    assert any(fragment in e for e in errors), errors


def test_explicit_epochs_disable_selection():
    config = ExperimentConfig.from_dict({'train': {'epochs': 10}, 'checkpoints': {'epochs': [3, 10]}})
    assert config.checkpoints.select is None
    assert config.validate() == (True, [])


def test_hash_ignores_output_dir_only():
    base = ExperimentConfig()
    assert ExperimentConfig(output_dir='/tmp/elsewhere').config_hash() == base.config_hash()
    assert ExperimentConfig(seed=4321).config_hash() != base.config_hash()


def test_unknown_pattern_lookup():
    config = ExperimentConfig()
    assert config.pattern(2).src_word == 'oktober'
    with pytest.raises(ConfigValidationError):
        config.pattern(9)


def test_run_manifest_tracks_artifacts(tmp_path):
    (tmp_path / 'corpus').mkdir()
    (tmp_path / 'corpus' / 'clean.tsv').write_text('0\ta\tb\tclean\n', encoding='utf-8')
    (tmp_path / 'cache.gsim.tmp').write_text('partial', encoding='utf-8')

    manifest = RunManifest.load(tmp_path, 'abc')
    manifest.refresh(tmp_path)
    manifest.record('gen', 0.0)
    manifest.save(tmp_path)
    assert list(manifest.files) == [os.path.join('corpus', 'clean.tsv')]
    assert manifest.verify(tmp_path) == (True, [])

    reloaded = RunManifest.load(tmp_path, 'abc')
    assert reloaded.files == manifest.files
    assert 'gen' in reloaded.timings
    assert RunManifest.load(tmp_path, 'other').files == {}

    (tmp_path / 'corpus' / 'clean.tsv').write_text('tampered\n', encoding='utf-8')
    ok, errors = reloaded.verify(tmp_path)
    assert not ok
    assert 'checksum mismatch' in errors[0]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
