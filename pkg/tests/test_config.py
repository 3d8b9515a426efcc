"""Run-file parsing: strictness, canonical form, and the config hash."""

import pytest

from tadpool.config import ConfigError, RunConfig
from tadpool.losses import Mode

FULL_EXAMPLE = """
# reference recipe, spelled out
num_classes = 6
dim = 32
n_source = 2400
n_target = 600
n_pool = 50000
rotation = 0.35
translation = 1.0,-0.5
num_planes = 16
pool_target_mix = 0.2
num_distractors = 3
separation = 4.0
scale = 1.0

hidden_dims = 64
feature_dim = 16

epochs = 30
batch_size = 64
bank_capacity = 65536
base_lr = 0.001
start_lr = 1e-5
min_lr = 1e-6
warmup_epochs = 4
momentum = 0.9
weight_decay = 1e-4
target_fraction = 1.0
retriever = embedding
data_seed = 1
init_seed = 1
augment_seed = 1
augment_scale = 1.0

temperature = 0.07
num_retrieved = 2
candidate_factor = 50
contrastive_weight = 1.0
include_positive = true
mode = test_time

source_epochs = 15
source_lr = 0.1
"""


class TestParsing:
    def test_empty_text_gives_pure_defaults(self):
        assert RunConfig.from_text("") == RunConfig()

    def test_full_example_parses(self):
        cfg = RunConfig.from_text(FULL_EXAMPLE)
        assert cfg.task.num_planes == 16
        assert cfg.task.translation == (1.0, -0.5)
        assert cfg.model.hidden_dims == (64,)
        assert cfg.adapt.bank_capacity == 65536
        assert cfg.adapt.loss.candidate_factor == 50
        assert cfg.adapt.loss.mode is Mode.TEST_TIME
        assert cfg.source_epochs == 15

    def test_comments_blank_lines_and_spacing_are_ignored(self):
        cfg = RunConfig.from_text("#hi\n\n  epochs=3\n temperature =  0.5  \n")
        assert cfg.adapt.epochs == 3
        assert cfg.adapt.loss.temperature == 0.5

    def test_unknown_key_is_an_error(self):
        with pytest.raises(ConfigError, match="unknown config key 'learning_rate'"):
            RunConfig.from_text("learning_rate = 0.1")

    def test_duplicate_key_reports_line(self):
        with pytest.raises(ConfigError, match=":3: duplicate key 'epochs'"):
            RunConfig.from_text("epochs = 1\n# pad\nepochs = 2")

    def test_line_without_equals_is_an_error(self):
        with pytest.raises(ConfigError, match="expected 'key = value'"):
            RunConfig.from_text("epochs")

    def test_bad_value_names_the_key(self):
        with pytest.raises(ConfigError, match="bad value for 'epochs'"):
            RunConfig.from_text("epochs = many")

    def test_booleans_are_strict(self):
        assert RunConfig.from_text("include_positive = false").adapt.loss.include_positive is False
        with pytest.raises(ConfigError, match="include_positive"):
            RunConfig.from_text("include_positive = True")

    def test_mode_values_are_strict(self):
        assert RunConfig.from_text("mode = train_time").adapt.loss.mode is Mode.TRAIN_TIME
        with pytest.raises(ConfigError, match="mode"):
            RunConfig.from_text("mode = eval")

    def test_empty_translation_means_none(self):
        assert RunConfig.from_text("translation =").task.translation == ()

    def test_domain_validation_is_applied(self):
        with pytest.raises(ConfigError, match="temperature"):
            RunConfig.from_text("temperature = -1.0")
        with pytest.raises(ConfigError, match="retriever"):
            RunConfig.from_text("retriever = oracle")

    def test_missing_file_is_a_config_error(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read config"):
            RunConfig.from_file(str(tmp_path / "nope.cfg"))

    def test_source_keys_validated(self):
        with pytest.raises(ConfigError, match="source_lr"):
            RunConfig.from_text("source_lr = 0")


class TestCanonicalForm:
    def test_roundtrip_through_canonical_text(self):
        cfg = RunConfig.from_text(FULL_EXAMPLE)
        again = RunConfig.from_text(cfg.canonical_text())
        assert cfg == again
        assert cfg.config_hash() == again.config_hash()

    def test_hash_ignores_key_order_and_comments(self):
        a = RunConfig.from_text("epochs = 5\nbase_lr = 0.01")
        b = RunConfig.from_text("# swapped\nbase_lr = 0.01\nepochs = 5")
        assert a.config_hash() == b.config_hash()

    def test_hash_changes_with_any_value(self):
        base = RunConfig.from_text("epochs = 5")
        assert base.config_hash() != RunConfig.from_text("epochs = 6").config_hash()
        assert base.config_hash() != RunConfig.from_text("epochs = 5\ndata_seed = 1").config_hash()

    def test_effective_lists_every_key_sorted(self):
        keys = list(RunConfig().effective())
        assert keys == sorted(keys)
        assert "bank_capacity" in keys and "mode" in keys and "source_lr" in keys
        assert len(keys) == 37

    def test_with_seed_overrides_all_three_seeds(self):
        cfg = RunConfig.from_text("data_seed = 3").with_seed(9)
        assert cfg.adapt.data_seed == 9
        assert cfg.adapt.init_seed == 9
        assert cfg.adapt.augment_seed == 9
