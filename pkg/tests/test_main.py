import json

import pytest

import main
from align_gen_app.repository.datasets import read_dataset
from align_gen_app.repository.reports import read_csv

TINY_MODEL = """
# small enough for a test run
d = 16
blocks = 1
heads = 2
mlp_ratio = 2
redux_tokens = 4
redux_patch = 4
lora_rank = 2
dem_heads = 2
dem_mlp_ratio = 2
batch_size = 2
log_every = 0
steps = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.conf"
    config.write_text(TINY_MODEL)
    data, base, adapted = root / "data", root / "base.agck", root / "adapted.agck"
    assert main.main(["synth-data", "--out", str(data), "--concepts", "12", "--images-per-concept", "2",
                      "--pairs-per-concept", "2", "--seed", "1", "--config", str(config)]) == 0
    assert main.main(["pretrain", "--data", str(data), "--out", str(base), "--iterations", "1",
                      "--config", str(config)]) == 0
    assert main.main(["adapt", "--data", str(data), "--base", str(base), "--out", str(adapted),
                      "--iterations", "1", "--config", str(config)]) == 0
    return {"root": root, "config": config, "data": data, "base": base, "adapted": adapted}


def test_training_outputs(workspace):
    assert workspace["adapted"].is_file()
    assert (workspace["root"] / "adapted.agck.json").is_file()
    assert len(read_csv(workspace["root"] / "adapted.agck.log.csv")) == 1
    run = json.loads((workspace["root"] / "adapted.agck.run_config.json").read_text())
    assert run["command"] == "adapt"
    assert run["settings"]["d"] == 16


def test_synth_data_prints_manifest_hash(workspace, capsys):
    out = workspace["root"] / "again"
    assert main.main(["synth-data", "--out", str(out), "--concepts", "12", "--images-per-concept", "2",
                      "--pairs-per-concept", "2", "--seed", "1"]) == 0
    assert capsys.readouterr().out.strip() == read_dataset(workspace["data"]).manifest_hash


def test_sample_with_mask_dump_and_telemetry(workspace):
    dataset = read_dataset(workspace["data"])
    record = dataset.pairs[0][0]
    out = workspace["root"] / "sample.ppm"
    code = main.main(["sample", "--ckpt", str(workspace["adapted"]), "--prompt", "a {C} on white background",
                      "--concept", record.concept_id, "--ref", str(workspace["data"] / "images" / record.reference_file),
                      "--out", str(out), "--dump-mask", "--telemetry", str(workspace["root"] / "tel.csv"),
                      "--config", str(workspace["config"])])
    assert code == 0
    assert out.is_file()
    assert "X" in (workspace["root"] / "sample.ppm.mask.txt").read_text()
    assert len(read_csv(workspace["root"] / "tel.csv")) == 2


def test_vary(workspace):
    dataset = read_dataset(workspace["data"])
    image = workspace["data"] / "images" / dataset.pairs[0][0].target_file
    out = workspace["root"] / "vary.ppm"
    assert main.main(["vary", "--ckpt", str(workspace["adapted"]), "--image", str(image), "--out", str(out),
                      "--steps", "2"]) == 0
    assert out.is_file()


def test_eval_writes_reports(workspace):
    out = workspace["root"] / "eval"
    assert main.main(["eval", "--ckpt", str(workspace["adapted"]), "--data", str(workspace["data"]), "--out", str(out),
                      "--seeds", "1", "--per-concept", "1", "--contact-sheet",
                      "--config", str(workspace["config"])]) == 0
    report = json.loads((out / "report.json").read_text())
    assert 0.0 <= report["cp"] <= 1.0
    assert read_csv(out / "report.csv")
    assert (out / "contact_sheet.ppm").is_file()


def test_usage_errors_exit_1(workspace, capsys):
    assert main.main([]) == 1
    assert main.main(["sample", "--ckpt", str(workspace["adapted"]), "--prompt", "a {C} and a {C}",
                      "--concept", "square-red-plain", "--ref", "x.ppm", "--out", "y.ppm"]) == 1
    assert main.main(["probe", "--ckpt", str(workspace["adapted"]), "--data", str(workspace["data"]),
                      "--seeds", "3"]) == 1
    assert "error: usage:" in capsys.readouterr().err


def test_data_errors_exit_2(workspace, capsys):
    assert main.main(["eval", "--ckpt", str(workspace["root"] / "absent.agck"), "--data", str(workspace["data"]),
                      "--out", str(workspace["root"] / "e2")]) == 2
    assert main.main(["pretrain", "--data", str(workspace["root"] / "nowhere"),
                      "--out", str(workspace["root"] / "m.agck")]) == 2
    assert "error: data:" in capsys.readouterr().err


def test_bad_config_file_exit_1(workspace):
    bad = workspace["root"] / "bad.conf"
    bad.write_text("no_such_key = 3\n")
    assert main.main(["synth-data", "--out", str(workspace["root"] / "x"), "--config", str(bad)]) == 1


def test_gradcheck_exit_codes():
    assert main.main(["gradcheck", "--module", "lora"]) == 0
    assert main.main(["gradcheck", "--module", "lora", "--tol", "0"]) == 4


def test_out_of_range_settings_exit_1(workspace, capsys):
    assert main.main(["adapt", "--data", str(workspace["data"]), "--base", str(workspace["base"]),
                      "--out", str(workspace["root"] / "never.agck"), "--drop-ratio", "1.5",
                      "--config", str(workspace["config"])]) == 1
    record = read_dataset(workspace["data"]).pairs[0][0]
    assert main.main(["sample", "--ckpt", str(workspace["adapted"]), "--prompt", "a {C} on white background",
                      "--concept", record.concept_id, "--ref", str(workspace["data"] / "images" / record.reference_file),
                      "--out", str(workspace["root"] / "never.ppm"), "--steps", "0"]) == 1
    assert "error: usage:" in capsys.readouterr().err
    assert not (workspace["root"] / "never.agck").exists()


def test_reference_offset_inside_grid_exit_1(workspace, capsys):
    overlapping = workspace["root"] / "overlap.conf"
    overlapping.write_text(workspace["config"].read_text() + "ref_offset = 1\n")
    assert main.main(["pretrain", "--data", str(workspace["data"]), "--out", str(workspace["root"] / "o.agck"),
                      "--iterations", "1", "--config", str(overlapping)]) == 1
    assert "ref_offset" in capsys.readouterr().err
