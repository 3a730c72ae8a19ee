import json

import pytest

from mrl.config import DEFAULTS, config_from_dict, parse_config
from mrl.errors import ConfigError


def write(tmp_path, doc):
    p = tmp_path / "cfg.json"
    p.write_text(doc if isinstance(doc, str) else json.dumps(doc))
    return p


def test_empty_document_gives_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, "{}"))
    m = cfg.model_config()
    assert (m.channels, m.heads, m.head_dim, m.pme_layers, m.fmp_layers) == (128, 8, 32, 3, 3)
    t = cfg.train_config("pretrain")
    assert (t.lr, t.batch, t.mask_rate, t.alpha) == (5e-4, 24, 0.75, 1.0)
    assert cfg.to_dict() == DEFAULTS
    assert parse_config(None).to_dict() == DEFAULTS


def test_override_keeps_the_rest(tmp_path):
    cfg = parse_config(write(tmp_path, {"model": {"pme_layers": 2}}))
    assert cfg.model_config().pme_layers == 2
    assert cfg.model_config().fmp_layers == 3


def test_constraint_message_names_key(tmp_path):
    with pytest.raises(ConfigError, match=r"mask\.rate.*rate ∈ \[0,1\]"):
        parse_config(write(tmp_path, {"mask": {"rate": 1.5}}))


@pytest.mark.parametrize("doc, pattern", [
    ({"model": {"depth": 3}}, r"model\.depth: unknown key"),
    ({"extra": 1}, "extra: unknown key"),
    ({"model": {"channels": "wide"}}, r"model\.channels: expected int"),
    ({"mask": {"invert": 1}}, r"mask\.invert: expected bool"),
    ({"train": {"lr": 0}}, r"train\.lr"),
    ({"model": 3}, r"model: expected an object"),
    ({"mask": {"strategy": "blocks"}}, r"mask\.strategy"),
])
def test_invalid_documents(doc, pattern):
    with pytest.raises(ConfigError, match=pattern):
        config_from_dict(doc)


def test_bad_json_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(write(tmp_path, "{oops"))
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "nope.json")


def test_int_promotes_to_float_and_overrides():
    cfg = config_from_dict({"train": {"lr": 1}})
    assert cfg["train"]["lr"] == 1.0 and isinstance(cfg["train"]["lr"], float)
    cfg2 = cfg.with_overrides(seed=4, out=None)
    assert cfg2.seed == 4 and cfg2.out == cfg.out
    assert json.loads(cfg2.to_json())["seed"] == 4


def test_stage_specific_train_config():
    cfg = config_from_dict({"pretrain": {"steps": 7}, "finetune": {"steps": 9, "freeze_pme": True}})
    assert cfg.train_config("pretrain").steps == 7
    ft = cfg.train_config("finetune")
    assert ft.steps == 9 and ft.freeze_pme
