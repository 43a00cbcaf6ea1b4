import pytest
import yaml

from resadapt.adapters import Placement
from resadapt.config import DEFAULT_CONFIG, default_config, load_config, parse_config
from resadapt.errors import ConfigError
from resadapt.finetune import Mode


def test_defaults_are_the_desk_scale_protocol():
    rc = default_config()
    p = rc.protocol
    assert (p.encoder.num_blocks, p.encoder.d_model, p.encoder.heads, p.encoder.conv_kernel) == (4, 32, 4, 7)
    assert p.adapter.placement is Placement.TPA and p.adapter.width == 8
    assert p.pretrain.mode is Mode.FULL_FINETUNE and p.adapt.mode is Mode.ADAPTER
    assert rc.report.widths == [2, 4, 8, 16]
    assert (rc.gradcheck.d_model, rc.gradcheck.num_blocks, rc.gradcheck.seq_len) == (8, 2, 5)


def test_partial_file_overrides_only_its_keys(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("adapter:\n  placement: serial\n  width: 16\nadapt:\n  steps: 7\n")
    rc = load_config(path)
    assert rc.protocol.adapter.placement is Placement.SERIAL and rc.protocol.adapter.width == 16
    assert rc.protocol.adapt.steps == 7 and rc.protocol.adapt.lr == 0.002
    assert rc.protocol.encoder == default_config().protocol.encoder


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("")
    assert load_config(path) == default_config()


@pytest.mark.parametrize("raw,match", [
    ({"encoderr": {}}, "top level"),
    ({"encoder": {"depth": 3}}, r"\[encoder\].*depth"),
    ({"adapt": {"mode": "full"}}, r"\[adapt\].*mode"),
    ({"task": {"seed": 1}}, r"\[task\]"),
    ({"encoder": {"heads": 5}}, "heads"),
    ({"adapter": {"placement": "diagonal"}}, "invalid configuration value"),
    ({"adapter": {"width": 0}}, "width"),
    ({"task": {"num_classes": 1}}, "num_classes"),
    ({"encoder": [1, 2]}, "mapping"),
])
def test_invalid_configs_are_rejected(raw, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(raw)


def test_bad_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("encoder: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(path)


def test_default_text_parses_to_default_config():
    assert parse_config(yaml.safe_load(DEFAULT_CONFIG)) == default_config()
