"""Configuration tests: TOML parsing, validation key paths, overrides, builders.

Run with: pytest tests/test_config.py
"""
import os
import sys

import pytest

sys.path.append(os.getcwd())

from advfedkd.config import ExperimentConfig, load_config, override, parse_config, parse_value
from advfedkd.exceptions import ConfigError
from advfedkd.models import param_count


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.toml"
    path.write_text("")
    cfg = load_config(path)
    assert cfg == ExperimentConfig()
    assert cfg.fed.method == "pm_afl_pp"
    assert cfg.partition.num_clients == 5 and cfg.partition.concentration == 0.1
    assert cfg.attack.train.epsilon == 0.3 and cfg.attack.train.step_size == 0.01
    assert list(cfg.attack.eval) == ["fgsm", "bim10", "pgd40", "pgd100"]


def test_dotted_keys():
    cfg = parse_config(
        """
        seed = 3
        method = "fedpgd"
        fed.rounds = 4
        distill.rho = 5.0
        attack.eval.pgd7.kind = "pgd"
        attack.eval.pgd7.iterations = 7
        """
    )
    assert cfg.seed == 3 and cfg.fed.method == "fedpgd" and cfg.fed.rounds == 4
    assert [a.name for a in cfg.to_eval_attacks()] == ["pgd7"]
    assert cfg.to_eval_attacks()[0].budget.iterations == 7
    assert cfg.to_weights().coefficients() == pytest.approx((1 / 6, 5 / 6))


def test_errors_carry_key_paths():
    with pytest.raises(ConfigError) as exc:
        parse_config("fed.rounds = -1\npartition.concentration = 0.0\nfed.bogus = 1\n")
    keys = {k for k, _ in exc.value.problems}
    assert {"fed.rounds", "partition.concentration", "fed.bogus"} <= keys


def test_unknown_method():
    with pytest.raises(ConfigError):
        parse_config('fed.method = "fedprox"')


def test_missing_referenced_files(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_config(f'data.source = "idx"\ndata.train_images = "{tmp_path}/a"\ndata.train_labels = "{tmp_path}/b"')
    assert "data" in exc.value.problems[0][0]
    with pytest.raises(ConfigError):
        parse_config(f'teacher.load = "{tmp_path}/teacher.ckpt"')


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_malformed_toml():
    with pytest.raises(ConfigError):
        parse_config("fed.rounds = = 3")


def test_override_revalidates():
    cfg = ExperimentConfig()
    assert override(cfg, "distill.temperature", 4.0).distill.temperature == 4.0
    assert override(cfg, "seed", 9).seed == 9
    assert cfg.seed == 0
    with pytest.raises(ConfigError):
        override(cfg, "distill.temperature", -1.0)
    with pytest.raises(ConfigError):
        override(cfg, "nosuch.key", 1)


def test_parse_value():
    assert parse_value("3") == 3
    assert parse_value("0.5") == 0.5
    assert parse_value("true") is True
    assert parse_value("fedavg") == "fedavg"


def test_seeds_are_derived_and_stable():
    a, b = ExperimentConfig(seed=1), ExperimentConfig(seed=2)
    assert a.to_partition().seed == ExperimentConfig(seed=1).to_partition().seed
    assert a.to_partition().seed != b.to_partition().seed
    fed = a.to_fed(16, 4)
    assert fed.init_seed != fed.eval_seed


def test_builders_follow_data_shape():
    fed = ExperimentConfig().to_fed(784, 10)
    assert fed.student_spec.layer_dims == (784, 64, 10)
    assert param_count(fed.student_spec) == 784 * 64 + 64 + 64 * 10 + 10
    assert fed.eval_every == 5


def test_zero_step_with_iterations_rejected():
    with pytest.raises(ConfigError):
        parse_config("attack.train.step_size = 0.0")
