from __future__ import annotations

import json

import numpy as np
import pytest

from occlumove.errors import ContractError
from occlumove.evalharness.dataset import (
    FilterConfig,
    SampleRecord,
    build_dataset,
    decode_rle,
    load_manifest,
    polygon_to_mask,
    save_manifest,
)
from occlumove.evalharness.embedders import ConstantEmbedder, StubEmbedder
from occlumove.evalharness.metrics import (
    MetricReport,
    clip_t,
    clip_tp,
    composite_on_white,
    cosine,
    crop_box,
    dino_op,
    dino_tp,
    kid_from_embeddings,
    mmd2_unbiased,
    polynomial_kernel,
)
from occlumove.imgio import save_image, save_mask
from occlumove.masks import PIXEL, Mask

from conftest import block_constant_image, disk_mask_grid

RNG = np.random.default_rng(41)


# --- KID ----------------------------------------------------------------------

def naive_mmd2(x, y):
    """Double-loop unbiased MMD^2 oracle; coincident samples skipped in the
    cross term (they are the same draw, not independent ones)."""
    m, n = len(x), len(y)
    d = x.shape[1]

    def k(u, v):
        return (float(np.dot(u, v)) / d + 1.0) ** 3

    sxx = syy = sxy = 0.0
    n_cross = 0
    for i in range(m):
        for j in range(m):
            if i != j:
                sxx += k(x[i], x[j])
    for i in range(n):
        for j in range(n):
            if i != j:
                syy += k(y[i], y[j])
    for i in range(m):
        for j in range(n):
            if not np.array_equal(x[i], y[j]):
                sxy += k(x[i], y[j])
                n_cross += 1
    return sxx / (m * (m - 1)) + syy / (n * (n - 1)) - 2 * sxy / n_cross


def test_kid_matches_naive_oracle_on_gaussian_clouds():
    a = RNG.standard_normal((40, 64))
    b = RNG.standard_normal((40, 64)) + 0.5
    ours = kid_from_embeddings(a, b)
    oracle = naive_mmd2(a, b)
    assert ours == pytest.approx(oracle, abs=1e-8)


def test_kid_identical_sets_is_zero():
    a = RNG.standard_normal((30, 16))
    assert abs(kid_from_embeddings(a, a.copy())) <= 1e-9


def test_kid_symmetry_bit_exact():
    a = RNG.standard_normal((25, 16))
    b = RNG.standard_normal((31, 16)) + 0.3
    assert kid_from_embeddings(a, b) == kid_from_embeddings(b, a)


def test_kid_single_block_fallback_warns():
    a = RNG.standard_normal((5, 8))
    b = RNG.standard_normal((9, 8))
    with pytest.warns(UserWarning):
        kid_from_embeddings(a, b)
    with pytest.raises(ContractError):
        kid_from_embeddings(a[:1], b)


def test_kid_reorder_invariance():
    a = RNG.standard_normal((20, 8))
    b = RNG.standard_normal((20, 8)) + 1.0
    perm = RNG.permutation(20)
    assert kid_from_embeddings(a, b) == kid_from_embeddings(a[perm], b)


def test_mmd_requires_two_samples():
    with pytest.raises(ContractError):
        mmd2_unbiased(RNG.standard_normal((1, 3)), RNG.standard_normal((5, 3)))


# --- CLIP-T ---------------------------------------------------------------------

def test_clip_t_identical_vectors_scores_100():
    emb = ConstantEmbedder(np.array([1.0, 2.0, 3.0]))
    imgs = [np.zeros((8, 8, 3))] * 3
    assert clip_t(imgs, ["a", "b", "c"], emb) == pytest.approx(100.0, abs=1e-9)


def test_clip_t_orthogonal_vectors_scores_0():
    class Ortho:
        fingerprint = "ortho"

        def embed_images(self, images):
            return np.tile([1.0, 0.0], (len(images), 1))

        def embed_texts(self, texts):
            return np.tile([0.0, 1.0], (len(texts), 1))

    assert clip_t([np.zeros((4, 4, 3))] * 2, ["x", "y"], Ortho()) == pytest.approx(0.0)


def test_clip_t_hand_computed_three_pairs():
    class Fixed:
        fingerprint = "fixed"
        imgs = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]])
        txts = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 1.0]])

        def embed_images(self, images):
            return self.imgs[: len(images)]

        def embed_texts(self, texts):
            return self.txts[: len(texts)]

    expect = np.mean([1.0, 1.0 / np.sqrt(2.0), 2.0 / (2.0 * np.sqrt(2.0))]) * 100.0
    got = clip_t([np.zeros((2, 2, 3))] * 3, ["a", "b", "c"], Fixed())
    assert got == pytest.approx(expect, abs=1e-9)
    with pytest.raises(ContractError):
        clip_t([np.zeros((2, 2, 3))], ["a", "b"], Fixed())


# --- crop metrics ----------------------------------------------------------------

def test_dino_op_identity_image_scores_one():
    img = block_constant_image(64, seed=1)
    emb = StubEmbedder(dim=16, seed=2)
    assert dino_op(img, img.copy(), (8, 8, 32), emb) == pytest.approx(1.0, abs=1e-12)


def test_dino_tp_pixel_perfect_relocation_scores_one():
    src = block_constant_image(64, seed=2)
    edited = np.zeros_like(src)
    edited[24:56, 16:48] = src[0:32, 0:32]
    emb = StubEmbedder(dim=16, seed=2)
    assert dino_tp(src, edited, (0, 0, 32), (24, 16, 32), emb) == pytest.approx(1.0, abs=1e-12)


def test_crop_metrics_match_cosine_oracle():
    src = block_constant_image(64, seed=3)
    edited = block_constant_image(64, seed=4)
    emb = StubEmbedder(dim=16, seed=5)
    ob, tb = (4, 4, 24), (30, 30, 24)
    ea = emb.embed_images([crop_box(src, ob)])[0]
    eb = emb.embed_images([crop_box(edited, tb)])[0]
    oracle = float(np.dot(ea, eb) / (np.linalg.norm(ea) * np.linalg.norm(eb)))
    assert dino_tp(src, edited, ob, tb, emb) == pytest.approx(oracle, abs=1e-9)
    assert clip_tp(src, edited, ob, tb, emb) == pytest.approx(oracle, abs=1e-9)


def test_crop_box_rejects_degenerate():
    img = np.zeros((32, 32, 3))
    with pytest.raises(ContractError):
        crop_box(img, (20, 20, 16))
    with pytest.raises(ContractError):
        crop_box(img, (0, 0, 0))


def test_composite_on_white():
    img = np.zeros((4, 4, 3))
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[1, 1] = 1
    out = composite_on_white(img, mask)
    assert out[1, 1].tolist() == [0.0, 0.0, 0.0]
    assert out[0, 0].tolist() == [1.0, 1.0, 1.0]


# --- dataset -----------------------------------------------------------------------

def _mask_png(tmp_path, name, grid):
    p = tmp_path / name
    save_mask(Mask(grid, PIXEL), p)
    return name


def _fixture_annotations(tmp_path):
    side = 96
    img = block_constant_image(side, seed=7)
    save_image(img, tmp_path / "img.png")
    images = [{"id": 1, "file_name": "img.png", "width": side, "height": side}]
    anns = []
    # three valid occluded objects
    for i, c in enumerate(((30, 30), (60, 40), (40, 64))):
        vis = disk_mask_grid(side, c, 9)
        amo = disk_mask_grid(side, c, 12)
        anns.append({
            "id": 10 + i, "image_id": 1, "category": "donut",
            "visible": _mask_png(tmp_path, f"v{i}.png", vis),
            "amodal": _mask_png(tmp_path, f"a{i}.png", amo),
        })
    # occlusion-free object (amodal == visible)
    free = disk_mask_grid(side, (48, 20), 10)
    anns.append({
        "id": 20, "image_id": 1, "category": "donut",
        "visible": _mask_png(tmp_path, "free_v.png", free),
        "amodal": _mask_png(tmp_path, "free_a.png", free),
    })
    # too-small object
    tiny = np.zeros((side, side), dtype=np.uint8)
    tiny[50, 50] = 1
    anns.append({
        "id": 21, "image_id": 1, "category": "donut",
        "visible": _mask_png(tmp_path, "tiny_v.png", tiny),
        "amodal": _mask_png(tmp_path, "tiny_a.png",
                            disk_mask_grid(side, (50, 50), 4)),
    })
    return {"images": images, "annotations": anns}


def test_build_dataset_counts_and_prompts(tmp_path):
    ann = _fixture_annotations(tmp_path)
    records = build_dataset(ann, FilterConfig(), seed=3, base_dir=tmp_path)
    assert len(records) == 3
    assert sum(len(r.target_points) for r in records) == 24
    for r in records:
        assert r.prompt == "A photo of donut"
        for (x, y) in r.target_points:
            half = r.box_side // 2
            assert 0 <= x - half and x - half + r.box_side <= 96
            assert 0 <= y - half and y - half + r.box_side <= 96


def test_build_dataset_seeded_targets_reproducible(tmp_path):
    ann = _fixture_annotations(tmp_path)
    a = build_dataset(ann, FilterConfig(), seed=3, base_dir=tmp_path)
    b = build_dataset(ann, FilterConfig(), seed=3, base_dir=tmp_path)
    assert [r.target_points for r in a] == [r.target_points for r in b]
    c = build_dataset(ann, FilterConfig(), seed=4, base_dir=tmp_path)
    assert [r.target_points for r in a] != [r.target_points for r in c]


def test_build_dataset_drops_unplaceable(tmp_path):
    side = 64
    img = block_constant_image(side, seed=8)
    save_image(img, tmp_path / "img.png")
    vis = np.zeros((side, side), dtype=np.uint8)
    vis[2:62, 2:62] = 1  # relaxed box exceeds the image; no target fits
    amo = np.ones((side, side), dtype=np.uint8)
    ann = {
        "images": [{"id": 1, "file_name": "img.png", "width": side, "height": side}],
        "annotations": [{
            "id": 1, "image_id": 1, "category": "cat",
            "visible": _mask_png(tmp_path, "v.png", vis),
            "amodal": _mask_png(tmp_path, "a.png", amo),
        }],
    }
    assert build_dataset(ann, FilterConfig(), seed=0, base_dir=tmp_path) == []


def test_rle_decode_uncompressed():
    # column-major: 3x3, first column all on, rest off
    rle = {"size": [3, 3], "counts": [0, 3, 6]}
    grid = decode_rle(rle)
    assert grid[:, 0].tolist() == [1, 1, 1]
    assert grid[:, 1:].sum() == 0


def test_polygon_to_mask_square():
    grid = polygon_to_mask([[1, 1, 4, 1, 4, 4, 1, 4]], 6, 6)
    assert grid[2, 2] == 1
    assert grid[0, 0] == 0
    assert grid[5, 5] == 0


def test_manifest_round_trip(tmp_path):
    rec = SampleRecord(
        sample_id="1-1", image_path="img.png", category="cat",
        prompt="A photo of cat", visible_mask_path="v.png", box_side=20,
        target_points=[(i, i + 1) for i in range(8)])
    path = save_manifest([rec], tmp_path / "m.jsonl")
    loaded = load_manifest(path)
    assert loaded == [rec]


def test_record_requires_eight_targets():
    with pytest.raises(ContractError):
        SampleRecord(sample_id="x", image_path="i", category="c", prompt="p",
                     target_points=[(1, 1)])


def test_report_aggregates_are_means():
    rep = MetricReport(embedder_fingerprints={"image": "stub"}, config_fingerprint="x")
    vals = RNG.uniform(size=5)
    for i, v in enumerate(vals):
        rep.add(f"s{i}", {"dino_op": float(v)})
    assert rep.aggregates()["dino_op"] == pytest.approx(float(np.mean(vals)), abs=1e-9)


def test_stub_embedder_deterministic():
    emb = StubEmbedder(dim=8, seed=3)
    img = block_constant_image(32, seed=9)
    a = emb.embed_images([img])
    b = emb.embed_images([img.copy()])
    assert np.array_equal(a, b)
    assert emb.fingerprint == StubEmbedder(dim=8, seed=3).fingerprint
