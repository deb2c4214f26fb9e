import pytest

from lesa.config import ConfigError, load_config, parse_config

BASIC = """
# desk-scale LESA run
model.op_per_stage = conv,conv,lesa,lesa
model.base_channels = 16
optim.total_epochs = 20
optim.warmup_epochs = 5
data.source = synthetic
data.train_count = 500
run.out_dir = runs/x
run.deterministic = true
"""


def test_parse_values():
    cfg = parse_config(BASIC)
    assert cfg.model.op_per_stage == {1: "conv", 2: "conv", 3: "lesa", 4: "lesa"}
    assert cfg.optim.total_epochs == 20 and cfg.optim.warmup_epochs == 5.0
    assert cfg.data.train_count == 500
    assert cfg.run.deterministic is True


def test_canonical_round_trip_is_fixed_point():
    cfg = parse_config(BASIC)
    text = cfg.to_text()
    again = parse_config(text)
    assert again == cfg
    assert again.to_text() == text


@pytest.mark.parametrize(
    "line",
    ["model.base_chanels = 16", "optimizer.lr_init = 0.1", "lr_init = 0.1", "run.seed"],
)
def test_unknown_or_malformed_keys_rejected(line):
    with pytest.raises(ConfigError):
        parse_config(line)


def test_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("run.seed = 1\nrun.seed = 2")


def test_bad_value():
    with pytest.raises(ConfigError, match="optim.batch_size"):
        parse_config("optim.batch_size = lots")


def test_invalid_model_surfaces_as_config_error():
    with pytest.raises(ConfigError):
        parse_config("model.op_per_stage = sa,conv,conv,conv")


def test_data_section_drives_model_shape():
    cfg = parse_config("data.num_classes = 4\ndata.image_size = 16")
    assert cfg.model.num_classes == 4 and cfg.model.input_size == 16
    with pytest.raises(ConfigError):
        parse_config("data.num_classes = 4\nmodel.num_classes = 5")


def test_tensor_dir_path_must_exist(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(f"data.source = tensor-dir\ndata.path = {tmp_path / 'missing'}")
    cfg = parse_config(f"data.source = tensor-dir\ndata.path = {tmp_path}")
    assert cfg.data.path == str(tmp_path)


def test_relative_path_resolved_against_config_dir(tmp_path):
    (tmp_path / "ds").mkdir()
    path = tmp_path / "exp.cfg"
    path.write_text("data.source = tensor-dir\ndata.path = ds\n")
    cfg = load_config(str(path), env={})
    assert cfg.data.path == str(tmp_path / "ds")


def test_seed_env_override(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("run.seed = 1\n")
    assert load_config(str(path), env={}).run.seed == 1
    assert load_config(str(path), env={"LESA_SEED": "42"}).run.seed == 42
    with pytest.raises(ConfigError):
        load_config(str(path), env={"LESA_SEED": "abc"})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.cfg"))
