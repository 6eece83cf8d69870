import pytest

from routedistill.config import (
    ConfigError,
    apply_overrides,
    config_hash,
    default_config,
    parse_config,
)
from routedistill.losses import lambda_weights


def test_empty_file_gives_documented_defaults():
    cfg = parse_config("")
    assert cfg["graph.k"] == 8
    assert cfg["router.tau"] == 0.5
    assert cfg["loss.alpha"] == 1.0
    assert cfg["loss.beta"] == 1.0
    assert cfg["loss.eta"] == 0.5
    assert cfg["loss.gamma"] == 0.05
    assert cfg["loss.kappa"] == 2.0
    assert cfg["train.clip"] == 1.0
    assert cfg["train.wd"] == 0.01


def test_comments_and_whitespace():
    cfg = parse_config("# full line comment\n  graph.k = 4  # trailing\n\n")
    assert cfg["graph.k"] == 4


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("graph.k = 4\nnot.a.key = 1\n")


def test_type_mismatch_reports_line():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("graph.k = banana\n")


def test_k_zero_rejected():
    with pytest.raises(ConfigError, match="graph.k"):
        parse_config("graph.k = 0\n")


def test_kappa_feeds_lambda_weights():
    cfg = parse_config("loss.kappa = 2\nbackbone.layers = 4\n")
    lam = lambda_weights(cfg["backbone.layers"], cfg["loss.kappa"])
    assert list(lam) == [0.0625, 0.25, 0.5625, 1.0]


def test_overrides_validate():
    cfg = default_config()
    cfg2 = apply_overrides(cfg, ["router.tau=0.7", "train.batch=8"])
    assert cfg2["router.tau"] == 0.7
    assert cfg["router.tau"] == 0.5  # original untouched
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["no.such.key=1"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["router.tau=1.5"])


@pytest.mark.parametrize(
    "line",
    [
        "world.token_dim = 10",
        "world.n_objects = 1",
        "world.n_objects = 9",
        "backbone.layers = 1",
        "backbone.width = 30",  # not divisible by 4 heads
        "backbone.capsule_dim = 100",
        "router.tau = 0",
        "train.clip = 0",
        "graph.encoder = fancy",
    ],
)
def test_invariant_violations_rejected(line):
    with pytest.raises(ConfigError):
        parse_config(line + "\n")


def test_bool_parsing():
    assert parse_config("train.cosine = false\n")["train.cosine"] is False
    assert parse_config("train.cosine = true\n")["train.cosine"] is True
    with pytest.raises(ConfigError):
        parse_config("train.cosine = maybe\n")


def test_config_hash_tracks_content():
    a = default_config()
    b = apply_overrides(a, ["graph.k=4"])
    assert config_hash(a) != config_hash(b)
    assert config_hash(a) == config_hash(default_config())
