import pytest

from graphparse.config import DEFAULTS, SEED_ENV, RunConfig, format_value, parse_flags, parse_text, parse_value
from graphparse.errors import ConfigError


def test_defaults_cover_every_section():
    assert DEFAULTS["train.base_lr"] == 0.007
    assert DEFAULTS["backbone.widths"] == (16, 32, 64)
    assert DEFAULTS["model.node_dim"] == 128
    assert DEFAULTS["scene.resolution"] == 64
    assert "train.seed" not in DEFAULTS and "model.backbone" not in DEFAULTS


@pytest.mark.parametrize("key, text, value", [
    ("train.base_lr", "0.1", 0.1),
    ("train.augment", "off", False),
    ("train.batch_size", " 4 ", 4),
    ("backbone.widths", "8,16", (8, 16)),
    ("model.datasets", "coarse, fine", ("coarse", "fine")),
    ("model.transfers", "fine->coarse,coarse->fine", (("fine", "coarse"), ("coarse", "fine"))),
    ("data.train", "a.tsv,b.tsv", ("a.tsv", "b.tsv")),
    ("out.dir", "runs/x", "runs/x"),
])
def test_parse_value_is_typed_by_default(key, text, value):
    assert parse_value(key, text) == value
    assert parse_value(key, format_value(value)) == value


@pytest.mark.parametrize("key, text", [("train.batch_size", "four"), ("train.augment", "maybe"),
                                       ("model.transfers", "fine-coarse"), ("nope", "1")])
def test_parse_value_errors(key, text):
    with pytest.raises(ConfigError):
        parse_value(key, text)


def test_parse_text_comments_and_line_numbers():
    vals = parse_text("# header\ntrain.steps = 5  # inline\n\nseed=3\n")
    assert vals == {"train.steps": 5, "seed": 3}
    with pytest.raises(ConfigError, match="cfg:2"):
        parse_text("seed=1\nbogus.key=2\n", "cfg")
    with pytest.raises(ConfigError, match="cfg:1"):
        parse_text("no equals sign\n", "cfg")


def test_parse_flags():
    assert parse_flags(["--seed=4", "--train.steps=9"]) == {"seed": 4, "train.steps": 9}
    with pytest.raises(ConfigError):
        parse_flags(["seed=4"])


def test_precedence_file_env_flags(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed=1\ntrain.steps=10\ntrain.base_lr=0.5\n")
    cfg = RunConfig.resolve(p, [], env={})
    assert cfg["seed"] == 1 and cfg["train.steps"] == 10
    cfg = RunConfig.resolve(p, [], env={SEED_ENV: "2"})
    assert cfg["seed"] == 2
    cfg = RunConfig.resolve(p, ["--seed=3", "--train.steps=20"], env={SEED_ENV: "2"})
    assert cfg["seed"] == 3 and cfg["train.steps"] == 20 and cfg["train.base_lr"] == 0.5


def test_missing_file_and_unknown_key(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.resolve(tmp_path / "none.cfg", [], env={})
    with pytest.raises(ConfigError):
        RunConfig({"train.speed": 1})


def test_derived_configs():
    cfg = RunConfig.resolve(None, ["--seed=5", "--backbone.widths=4,6,8", "--model.datasets=coarse,fine",
                                   "--model.transfers=fine->coarse", "--train.steps=3"], env={})
    t = cfg.train_config()
    assert t.seed == 5 and t.steps == 3
    m = cfg.model_config()
    assert m.seed == 5 and m.backbone.widths == (4, 6, 8) and m.transfers == (("fine", "coarse"),)
    assert cfg.scene_config().resolution == 64
    bad = RunConfig.resolve(None, ["--train.base_lr=-1"], env={})
    with pytest.raises(ConfigError):
        bad.train_config()


def test_dump_roundtrips():
    cfg = RunConfig.resolve(None, ["--model.transfers=fine->coarse", "--train.augment=false"], env={})
    again = RunConfig(parse_text(cfg.dump()))
    assert again.values == cfg.values
