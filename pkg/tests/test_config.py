import json

import pytest

from fedcoe.config import ConfigError, RunConfig, config_from_dict, echo_config, parse_config


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("")
    cfg = parse_config(path, env={})
    assert (cfg.num_clients, cfg.num_experts, cfg.k_active, cfg.tau, cfg.n_top) == (10, 4, 2, 0.5, 5)
    assert (cfg.rounds, cfg.gate_update_every) == (200, 10)
    assert (cfg.sgd.learning_rate, cfg.sgd.momentum, cfg.sgd.weight_decay) == (0.1, 0.9, 5e-4)
    (tmp_path / "d.json").write_text("{}")
    assert parse_config(tmp_path / "d.json", env={}) == cfg


def test_override_wins(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"tau": 0.2, "sgd": {"learning_rate": 0.05}}))
    cfg = parse_config(path, ["tau=0.9", "sgd.momentum=0.5"], env={})
    assert cfg.tau == 0.9 and cfg.sgd.learning_rate == 0.05 and cfg.sgd.momentum == 0.5


def test_n_top_follows_num_clients():
    assert parse_config(None, ["num_clients=7"], env={}).n_top == 4
    assert parse_config(None, ["num_clients=7", "n_top=2"], env={}).n_top == 2


def test_seed_env_then_override():
    assert parse_config(None, [], env={"FEDCOE_SEED": "42"}).seed == 42
    assert parse_config(None, ["seed=3"], env={"FEDCOE_SEED": "42"}).seed == 3


@pytest.mark.parametrize(
    "assignment, key",
    [
        ("alpha_dirichlet=-1", "alpha_dirichlet"),
        ("tau=1.5", "tau"),
        ("k_active=9", "k_active"),
        ("num_experts=9", "num_experts"),
        ("method=scaffold", "method"),
        ("gate_confidence=entropy", "gate_confidence"),
        ("rounds=0", "rounds"),
        ("n_top=11", "n_top"),
        ("sgd.momentum=1.0", "sgd.momentum"),
        ("sgd.batch_size=0", "sgd.batch_size"),
        ("bogus=1", "bogus"),
        ("sgd.bogus=1", "sgd.bogus"),
        ("rounds=2.5", "rounds"),
        ("hidden_dims=5", "hidden_dims"),
    ],
)
def test_errors_name_the_key(assignment, key):
    with pytest.raises(ConfigError) as info:
        parse_config(None, [assignment], env={})
    assert info.value.key == key
    assert key in str(info.value)


def test_malformed_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        parse_config(path, env={})
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        parse_config(path, env={})


def test_echo_round_trip(tmp_path):
    cfg = parse_config(None, ["tau=0.3", "hidden_dims=[5,4]", "method=fedprox"], env={})
    echo_config(cfg, tmp_path)
    again = config_from_dict(json.loads((tmp_path / "config.json").read_text()))
    assert again == cfg
    assert config_from_dict(again.to_dict()) == cfg


def test_single_expert_method():
    cfg = parse_config(None, ["method=ablation_single_expert"], env={})
    assert cfg.effective_num_experts == 1 and cfg.effective_k_active == 1
    assert isinstance(cfg, RunConfig)
