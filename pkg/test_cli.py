import json

import pytest
import torch

from src.cli import main
from src.models.config import LossWeights
from src.neural.model import HeadModel
from src.services.checkpoint_service import CheckpointService
from src.services.mesh_service import read_obj


@pytest.fixture
def stage1_run(tmp_path, desk_dataset, toy_model_config):
    """An output directory holding an untrained stage-1 checkpoint for the desk identities"""
    torch.manual_seed(0)
    model = HeadModel(toy_model_config, desk_dataset.training_identity_ids)
    CheckpointService().save(tmp_path / "checkpoints" / "stage1.ckpt", model, LossWeights())
    return tmp_path


def test_gradcheck_passes_and_writes_a_report(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["passed"] is True
    assert report["first_order_max_rel_error"] < 1e-5
    assert report["second_order_max_rel_error"] < 1e-4
    assert {term["name"] for term in report["terms"]} >= {"color", "eikonal", "displacement_tv"}


def test_unknown_subcommand_is_a_usage_error(capsys):
    assert main(["sculpt"]) == 1
    assert "error:" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path), "--config", str(tmp_path / "nope.json")]) == 1
    assert "Config file not found" in capsys.readouterr().err


def test_log_level_must_be_a_known_level(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path), "--log-level", "chatty"]) == 1
    assert "invalid choice" in capsys.readouterr().err


def test_log_level_is_case_insensitive(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--identities", "1", "--views", "1",
                 "--size", "10", "--resolution", "12", "--log-level", "debug"]) == 0


def test_synth_writes_a_dataset(tmp_path):
    code = main(["synth", "--out", str(tmp_path), "--identities", "2", "--views", "2",
                 "--size", "10", "--resolution", "12"])
    assert code == 0
    dataset = tmp_path / "dataset"
    assert (dataset / "manifest.json").is_file()
    assert len(list((dataset / "images").rglob("*.png"))) == 4
    assert (tmp_path / "logs" / "cli.log").is_file()


def test_render_of_unknown_identity_is_a_data_error(stage1_run, desk_dataset, capsys):
    code = main(["render", "nobody", "0", "--out", str(stage1_run), "--data", str(desk_dataset.root)])
    assert code == 2
    assert "nobody" in capsys.readouterr().err


def test_render_writes_color_and_normal_images(stage1_run, desk_dataset):
    code = main(["render", "id00", "1", "--out", str(stage1_run), "--data", str(desk_dataset.root)])
    assert code == 0
    assert (stage1_run / "renders" / "id00_view01_stage1.png").is_file()
    assert (stage1_run / "renders" / "id00_view01_stage1_normals.png").is_file()


def test_render_view_out_of_range(stage1_run, desk_dataset):
    assert main(["render", "id00", "9", "--out", str(stage1_run), "--data", str(desk_dataset.root)]) == 1


def test_stage_two_output_needs_a_stage_two_checkpoint(stage1_run):
    assert main(["extract-mesh", "id00", "--stage", "2", "--out", str(stage1_run)]) == 1


def test_extract_mesh_writes_an_obj(stage1_run):
    assert main(["extract-mesh", "id01", "--resolution", "12", "--out", str(stage1_run)]) == 0
    path = stage1_run / "meshes" / "id01_stage1.obj"
    assert read_obj(path).vertices.shape[1] == 3


def test_export_writes_a_single_precision_copy(stage1_run):
    assert main(["export", "--out", str(stage1_run)]) == 0
    target = stage1_run / "checkpoints" / "stage1.float32.ckpt"
    assert CheckpointService().read_header(target).dtype == "float32"


def test_missing_checkpoint_is_a_data_error(tmp_path):
    assert main(["extract-mesh", "id00", "--out", str(tmp_path)]) == 2


@pytest.mark.slow
def test_full_pipeline(tmp_path, quick_config):
    config = tmp_path / "config.json"
    config.write_text(quick_config.model_dump_json())
    common = ["--out", str(tmp_path), "--config", str(config)]

    assert main(["synth", *common, "--identities", "2", "--held-out", "1", "--views", "3",
                 "--size", "12", "--resolution", "16"]) == 0
    assert main(["train-template", *common]) == 0
    assert main(["refine", "id00", *common]) == 0
    assert main(["fit-unseen", *common]) == 0
    assert main(["eval", *common]) == 0
    assert main(["eval", *common, "--stage", "2", "--identities", "id00", "--no-psnr"]) == 0
    assert main(["transfer-color", "id00", "id01", *common]) == 0

    checkpoints = tmp_path / "checkpoints"
    assert {p.name for p in checkpoints.glob("*.ckpt")} >= {"stage1.ckpt", "stage2_id00.ckpt", "fit_id02.ckpt"}
    stage1 = json.loads((tmp_path / "metrics_stage1.json").read_text())
    assert [row["identity"] for row in stage1["identities"]] == ["id00", "id01"]
    stage2 = json.loads((tmp_path / "metrics_stage2.json").read_text())
    assert stage2["identities"][0]["psnr_train"] is None
    assert (tmp_path / "renders" / "transfer_id00_id01_view00.png").is_file()
