import logging
from pathlib import Path

import jsonschema
import pytest

from histo_ssl import utils
from histo_ssl.errors import ConfigError
from histo_ssl.training.config import (
    PRESET_NAMES,
    SCHEMA_PATH,
    TeacherTempMode,
    TeacherTemperature,
    build_train_config,
    format_config,
    load_train_config,
    parse_config_text,
    preset_path,
    read_config_file,
    resolve_config,
    write_config_snapshot,
)
from histo_ssl.training.loop import ablation_overrides, teacher_temp


def test_schemas_valid():
    """Validate all jsons in the 'benchmarks_configs' dir against the schema"""

    configs_dir = Path(__file__).parent.parent / "benchmarks" / "benchmark_configs"
    schema = utils.read_json_file(configs_dir / "schema" / "benchmark.schema.json")

    for config_file in configs_dir.glob("*.json"):
        json_to_validate = utils.read_json_file(config_file)
        jsonschema.validate(schema=schema, instance=json_to_validate)


def test_run_schema_is_valid():
    jsonschema.Draft202012Validator.check_schema(utils.read_json_file(SCHEMA_PATH))


@pytest.mark.parametrize("preset", PRESET_NAMES)
def test_presets_resolve_and_build(preset):
    cfg = load_train_config(preset=preset)
    assert cfg.preset == preset
    assert cfg.model.embed_dim % cfg.model.heads == 0
    assert cfg.views.global_size % cfg.model.patch_size == 0


def test_toy_preset_schedule_lengths():
    cfg = load_train_config()
    assert cfg.steps == 2000
    assert cfg.peak_lr == pytest.approx(2e-3 * (64 / 1024) ** 0.5)
    assert cfg.warmup_steps == 200
    assert cfg.teacher_warmup_steps == 200
    assert cfg.teacher_temperature.mode is TeacherTempMode.WARMUP


def test_ablation_preset_transcribes_the_baseline():
    cfg = load_train_config(preset="ablation")
    assert cfg.model.patch_size == 16
    assert cfg.model.embed_dim == 768
    assert cfg.head.prototypes == 65536
    assert cfg.method.value == "crop_resize"
    assert cfg.regularizer.kind.value == "koleo"
    assert cfg.photometric.solarize_enabled


def test_fp16_falls_back_with_a_warning(caplog):
    with caplog.at_level(logging.WARNING):
        values = resolve_config(preset="ablation")
    assert values["precision"] == "FP16"
    assert "FP16" in caplog.text


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="not_a_key"):
        resolve_config(overrides=["not_a_key=1"])


def test_out_of_range_value_is_rejected():
    with pytest.raises(ConfigError):
        resolve_config(overrides={"mask_ratio": 1.5})


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset_path("virchow3")


def test_parse_config_text():
    values = parse_config_text("# comment\nseed = 3\nscale_range = (0.9, 1.1)  # inline\nmethod = ect\n")
    assert values == {"seed": 3, "scale_range": (0.9, 1.1), "method": "ect"}


def test_parse_config_text_reports_the_line():
    with pytest.raises(ConfigError, match="run.cfg:2"):
        parse_config_text("seed = 1\nnot a pair\n", source="run.cfg")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "missing.cfg")


def test_config_file_and_overrides_layer_on_the_preset(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("preset = toy\nbatch_size = 32\nregularizer = koleo\n")
    values = resolve_config(path, ["regularizer=none", "seed=9"])
    assert values["batch_size"] == 32
    assert values["regularizer"] == "none"
    assert values["seed"] == 9
    assert values["prototypes"] == 1024


def test_snapshot_round_trip(tmp_path):
    values = resolve_config(overrides=["regularizer=none"])
    path = write_config_snapshot(values, tmp_path)
    assert "regularizer = none" in path.read_text()
    assert read_config_file(path) == values
    assert format_config(values) == path.read_text()


def test_snapshot_rebuilds_the_same_config(tmp_path):
    values = resolve_config(overrides=["layers=2", "seed=4"])
    path = write_config_snapshot(values, tmp_path)
    rebuilt = build_train_config(resolve_config(path))
    assert rebuilt.model == build_train_config(values).model
    assert rebuilt.seed == 4


def test_local_view_must_divide_by_patch_size():
    with pytest.raises(ConfigError):
        load_train_config(overrides={"local_view_size": 30})


def test_teacher_temperature_from_value():
    warmup = TeacherTemperature.from_value((0.07, 0.04), 0.1)
    assert (warmup.start, warmup.final) == (0.04, 0.07)
    assert warmup.mode is TeacherTempMode.WARMUP
    assert TeacherTemperature.from_value(0.04, 0.1).mode is TeacherTempMode.CONSTANT


def test_teacher_temp_schedule():
    assert teacher_temp(0, "warmup") == pytest.approx(0.04)
    assert teacher_temp(6000, "warmup") == pytest.approx(0.055)
    assert teacher_temp(12_000, "warmup") == pytest.approx(0.07)
    assert teacher_temp(50_000, "warmup") == pytest.approx(0.07)
    assert teacher_temp(50_000, "constant") == pytest.approx(0.04)
    assert TeacherTempMode("virchow2g") is TeacherTempMode.CONSTANT


def test_ablation_overrides():
    assert ablation_overrides("baseline") == {
        "method": "crop_resize",
        "regularizer": "koleo",
        "regularizer_weight": 0.1,
        "solarization": True,
    }
    final = ablation_overrides("+ECT,+KDE,-SOL")
    assert final["method"] == "ect"
    assert final["regularizer"] == "kde"
    assert final["solarization"] is False
    with pytest.raises(ConfigError):
        ablation_overrides("+SOL")
