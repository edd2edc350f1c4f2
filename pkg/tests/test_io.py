from __future__ import annotations

import os
import subprocess
import sys

import numpy as np

from occlumove.arrayio import load_array_dir, save_array_dir
from occlumove.attention import export_snapshot, load_snapshot
from occlumove.backbone.base import HookSet, LoRAAdapter
from occlumove.imgio import (
    from_uint8,
    image_from_bytes,
    load_image,
    load_mask,
    mask_from_bytes,
    png_bytes,
    save_image,
    save_mask,
    to_uint8,
)
from occlumove.masks import PIXEL, Mask

from conftest import block_constant_image


def test_array_dir_round_trip(tmp_path):
    arrays = {"a": np.arange(12).reshape(3, 4).astype(np.float64),
              "weird name/x": np.ones((2, 2))}
    save_array_dir(tmp_path / "d", arrays, meta={"k": 1})
    loaded, meta = load_array_dir(tmp_path / "d")
    assert meta == {"k": 1}
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k])
    assert (tmp_path / "d" / "index.json").is_file()


def test_snapshot_export_round_trip(tmp_path, toy, donut_cond):
    z = toy.encode_image(block_constant_image(512, seed=40))
    pred = toy.predict_noise(z, 500, donut_cond, HookSet(capture_maps=True))
    export_snapshot(pred.snapshot, tmp_path / "snap")
    loaded = load_snapshot(tmp_path / "snap")
    assert loaded.head_dim == pred.snapshot.head_dim
    for lid in pred.snapshot.layers():
        assert np.array_equal(loaded.self_attn[lid], pred.snapshot.self_attn[lid])
        assert np.array_equal(loaded.cross[lid], pred.snapshot.cross[lid])
        assert loaded.resolutions[lid] == pred.snapshot.resolutions[lid]


def test_png_round_trips(tmp_path):
    img = block_constant_image(64, seed=41)
    save_image(img, tmp_path / "i.png")
    assert np.array_equal(load_image(tmp_path / "i.png"), img)
    grid = (np.random.default_rng(0).uniform(size=(32, 32)) < 0.5).astype(np.uint8)
    save_mask(Mask(grid, PIXEL), tmp_path / "m.png")
    assert np.array_equal(load_mask(tmp_path / "m.png").grid, grid)
    assert np.array_equal(image_from_bytes(png_bytes(img)), img)
    assert np.array_equal(mask_from_bytes(png_bytes(grid.astype(np.float64), "L")).grid,
                          grid)
    assert np.array_equal(from_uint8(to_uint8(img)), img)


def test_lora_adapter_save_load(tmp_path, toy):
    adapter = toy.init_lora(rank=3, scale=0.5, seed=2)
    for tgt in adapter.deltas:
        down, up = adapter.deltas[tgt]
        adapter.deltas[tgt] = (down, up + 0.1)
    path = adapter.save(tmp_path / "l.npz")
    loaded = LoRAAdapter.load(path)
    assert loaded.rank == 3 and loaded.scale == 0.5
    assert loaded.target_layers == adapter.target_layers
    for tgt in adapter.deltas:
        assert np.array_equal(loaded.deltas[tgt][0], adapter.deltas[tgt][0])
        assert np.array_equal(loaded.deltas[tgt][1], adapter.deltas[tgt][1])


def test_numpy_fallback_path_selectable():
    code = (
        "from occlumove import kernels\n"
        "import numpy as np\n"
        "assert kernels.active_backend() == 'numpy', kernels.active_backend()\n"
        "x = np.random.default_rng(0).standard_normal((4, 6, 6))\n"
        "assert np.array_equal(kernels.bilinear_resize(x, 6, 6), x)\n"
        "print('numpy path ok')\n"
    )
    env = dict(os.environ, OCCLUMOVE_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert "numpy path ok" in out.stdout
