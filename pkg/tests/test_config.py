import pytest

from casdm.config import ConfigError, ExperimentConfig, dump_config, from_dict, load_config, full_preset


def test_defaults_are_desk_scale():
    c = ExperimentConfig()
    assert (c.schedule.T, c.data.image_size, c.train.batch_size, c.train.steps, c.sample.steps) == (1000, 8, 32, 2000, 50)
    assert c.train.ema is False


def test_full_preset():
    c = full_preset()
    assert c.schedule.T == 4000 and c.sample.steps == 100 and c.train.lr == 1e-4
    assert c.loss.lambda_lpips == 0.1


def test_round_trip_and_hash(tmp_path):
    c = from_dict({"model": {"variant": "dual", "attention": [False, True]}, "train": {"lr": 3e-4}})
    dump_config(c, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == c and back.hash() == c.hash()
    assert len(c.hash()) == 16
    assert c.replace(loss={"lambda_lpips": 0.0}).hash() != c.hash()


@pytest.mark.parametrize(
    "raw",
    [
        {"modle": {}},
        {"train": {"stepz": 3}},
        {"train": {"steps": "10"}},
        {"train": {"lr": True}},
        {"train": {"ema": 1}},
        {"model": {"variant": "ddpm"}},
        {"schedule": {"T": 1}},
        {"data": {"kind": "folder"}},
        {"model": {"image_size": 16}},
        {"sample": {"eta": -1.0}},
        {"loss": {"lambda_mu": -1}},
        {"train": []},
        [1, 2],
    ],
)
def test_strict_parsing(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_int_accepted_for_float():
    assert from_dict({"train": {"lr": 1}}).train.lr == 1.0


def test_bad_yaml_and_missing(tmp_path):
    (tmp_path / "bad.yaml").write_text("train: [unclosed")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "e.yaml").write_text("")
    assert load_config(tmp_path / "e.yaml") == ExperimentConfig()
