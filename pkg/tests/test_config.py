import pytest

from dmsanet.block import DmsaConfig
from dmsanet.config import NetConfigFile, load_net_config, parse_net_config
from dmsanet.errors import ConfigFileError


def test_shipped_configs_load(config_dir):
    names = {path.stem: load_net_config(path).name for path in config_dir.glob("*.json")}
    assert names == {"resnet50": "resnet50", "resnet101": "resnet101", "dmsanet50": "dmsanet50",
                     "dmsanet101": "dmsanet101", "toy": "toy"}


def test_unknown_key_reports_field_and_line():
    text = '{\n  "depht": 50,\n  "block_kind": "dmsa_bottleneck"\n}'
    with pytest.raises(ConfigFileError) as info:
        parse_net_config(text)
    assert info.value.field == "depht"
    assert info.value.line == 2
    assert info.value.diagnostic().startswith("line 2, field 'depht'")


def test_unknown_dmsa_key_is_rejected():
    with pytest.raises(ConfigFileError) as info:
        parse_net_config('{"dmsa": {"groups": 4}}')
    assert info.value.field == "dmsa.groups"


def test_malformed_json_reports_line():
    with pytest.raises(ConfigFileError) as info:
        parse_net_config('{\n  "depth": 50,\n  oops\n}')
    assert info.value.line == 3


@pytest.mark.parametrize("text,field", [
    ('{"depth": 34}', "depth"),
    ('{"block_kind": "basic"}', "block_kind"),
    ('{"classes": 0}', "classes"),
    ('{"seed": "zero"}', "seed"),
    ('{"dtype": "float16"}', "dtype"),
    ('{"dmsa": {"sa_groups": 3}}', "dmsa"),
    ('[1, 2]', None),
])
def test_invalid_values(text, field):
    with pytest.raises(ConfigFileError) as info:
        parse_net_config(text)
    assert info.value.field == field


def test_defaults_are_filled_in():
    cfg = parse_net_config("{}")
    assert cfg == NetConfigFile()
    echoed = cfg.to_dict()
    assert echoed["depth"] == 50
    assert echoed["dmsa"]["kernel_schedule"] == [3, 5, 7, 9]
    assert echoed["dmsa"]["conv_groups_schedule"] == [1, 1, 2, 4]
    assert echoed["dmsa"]["reduction"] == 16


def test_toy_config_builds(toy_config):
    cfg = load_net_config(toy_config)
    assert cfg.is_toy
    dmsa = cfg.dmsa_config()
    assert isinstance(dmsa, DmsaConfig)
    assert (dmsa.channels, dmsa.splits, dmsa.sa_groups, dmsa.reduction) == (16, 2, 2, 4)
    assert dmsa.kernel_schedule == [3, 5]
    net = cfg.build()
    assert net.name == "toy"
    assert net.layers[3].cfg.dtype == "float64"


def test_splits_override_resets_schedules():
    cfg = parse_net_config('{"depth": "toy", "width": 32, "dmsa": {"splits": 4}}')
    dmsa = cfg.dmsa_config()
    assert dmsa.kernel_schedule == [3, 5, 7, 9]
    assert dmsa.conv_groups_schedule == [1, 4, 8, 8]


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigFileError):
        load_net_config(tmp_path / "absent.json")
