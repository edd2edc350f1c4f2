from __future__ import annotations

import json

import numpy as np
import pytest

from occlumove.cli import main
from occlumove.imgio import save_image, save_mask
from occlumove.masks import PIXEL, Mask

from conftest import block_constant_image, disk_mask_grid


@pytest.fixture()
def inputs(tmp_path):
    img = block_constant_image(512, seed=20)
    mask = disk_mask_grid(512, (220, 180), 60)
    save_image(img, tmp_path / "img.png")
    save_mask(Mask(mask, PIXEL), tmp_path / "mask.png")
    return tmp_path


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["edit", "--nonsense"])
    assert e.value.code == 2


def test_edit_writes_result_dir(inputs, capsys):
    out = inputs / "out"
    code = main(["edit", "--image", str(inputs / "img.png"),
                 "--mask", str(inputs / "mask.png"),
                 "--target", "300,360", "--category", "donut",
                 "--steps", "4", "--lora-steps", "2", "--seed", "7",
                 "--out", str(out)])
    assert code == 0
    assert (out / "edited.png").is_file()
    assert (out / "manifest.json").is_file()


def test_edit_config_merge_order(inputs):
    cfg_file = inputs / "run.json"
    cfg_file.write_text(json.dumps({"steps": 4, "gamma": 0.07, "lora_steps": 2}))
    out = inputs / "out2"
    code = main(["edit", "--image", str(inputs / "img.png"),
                 "--mask", str(inputs / "mask.png"),
                 "--target", "300,360", "--category", "donut",
                 "--config", str(cfg_file), "--gamma", "0.2",
                 "--out", str(out)])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["steps"] == 4          # from file
    assert manifest["config"]["gamma"] == 0.2        # flag wins
    assert manifest["config"]["lora_steps"] == 2


def test_edit_deterministic_across_invocations(inputs):
    args = ["--image", str(inputs / "img.png"), "--mask", str(inputs / "mask.png"),
            "--target", "300,360", "--category", "donut",
            "--steps", "4", "--lora-steps", "2", "--seed", "7"]
    assert main(["edit", *args, "--out", str(inputs / "r1")]) == 0
    assert main(["edit", *args, "--out", str(inputs / "r2")]) == 0
    assert (inputs / "r1" / "edited.png").read_bytes() == \
           (inputs / "r2" / "edited.png").read_bytes()


def test_deocclude_only_branch(inputs):
    out = inputs / "deocc"
    code = main(["deocclude", "--image", str(inputs / "img.png"),
                 "--mask", str(inputs / "mask.png"), "--category", "donut",
                 "--steps", "4", "--lora-steps", "2", "--out", str(out)])
    assert code == 0
    assert (out / "completed_object.png").is_file()
    assert (out / "amodal_mask.png").is_file()
    assert not (out / "edited.png").exists()


def test_invert_persists_cache(inputs):
    out = inputs / "cache"
    code = main(["invert", "--image", str(inputs / "img.png"),
                 "--prompt", "A photo of donut", "--steps", "4",
                 "--capture-kv", "--out", str(out)])
    assert code == 0
    from occlumove.latent import InversionCache

    cache = InversionCache.load(out)
    assert cache.latents.shape[0] == 5
    assert cache.has_kv


def test_pipeline_failure_exit_1(inputs, capsys):
    code = main(["edit", "--image", str(inputs / "img.png"),
                 "--mask", str(inputs / "mask.png"),
                 "--target", "300,360", "--category", "zebra",
                 "--prompt", "A photo of donut",
                 "--steps", "4", "--lora-steps", "0",
                 "--out", str(inputs / "fail")])
    assert code == 1
    assert "prompt" in capsys.readouterr().err


def test_eval_subcommand_smoke(tmp_path):
    from occlumove.evalharness.dataset import FilterConfig, build_dataset, save_manifest

    side = 128
    img = block_constant_image(side, seed=7)
    save_image(img, tmp_path / "img.png")
    vis = disk_mask_grid(side, (50, 50), 14)
    amo = disk_mask_grid(side, (50, 50), 18)
    save_mask(Mask(vis, PIXEL), tmp_path / "v.png")
    save_mask(Mask(amo, PIXEL), tmp_path / "a.png")
    ann = {
        "images": [{"id": 1, "file_name": "img.png", "width": side, "height": side}],
        "annotations": [
            {"id": 1, "image_id": 1, "category": "donut",
             "visible": "v.png", "amodal": "a.png"},
        ],
    }
    records = build_dataset(ann, FilterConfig(), seed=1, base_dir=tmp_path)
    assert len(records) == 1
    manifest = save_manifest(records, tmp_path / "ds.jsonl")

    out = tmp_path / "report"
    code = main(["eval", "--dataset", str(manifest), "--out", str(out),
                 "--steps", "4", "--no-lora", "--limit", "2"])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert {"dino_op", "dino_tp", "clip_tp"} <= set(report["aggregates"])
    assert len(report["per_sample"]) == 2
    assert (out / "report.csv").is_file()
