import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from b2s import geometry, metrics, palette, scene


def stats_of(rng, d=4, n=200, shift=0.0):
    feats = rng.normal(size=(n, d)) + shift
    return metrics.FeatureStats.from_features(feats)


# ---------------------------------------------------------------------------
# Frechet distance


def test_frechet_identity_is_zero():
    s = stats_of(np.random.default_rng(0))
    assert metrics.frechet_distance(s, s) == pytest.approx(0.0, abs=1e-6)


def test_frechet_mean_shift_closed_form():
    a = metrics.FeatureStats(mu=np.zeros(3), sigma=np.eye(3), count=100)
    b = metrics.FeatureStats(mu=np.array([2.0, 0.0, 0.0]), sigma=np.eye(3), count=100)
    assert metrics.frechet_distance(a, b) == pytest.approx(4.0, abs=1e-9)


def test_frechet_scalar_closed_form():
    a = metrics.FeatureStats(mu=np.zeros(1), sigma=np.array([[1.0]]), count=50)
    b = metrics.FeatureStats(mu=np.zeros(1), sigma=np.array([[4.0]]), count=50)
    assert metrics.frechet_distance(a, b) == pytest.approx(1.0, abs=1e-12)


def test_frechet_symmetry_and_nonnegativity():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a = stats_of(rng, d=6)
        b = stats_of(rng, d=6, shift=rng.normal())
        d_ab = metrics.frechet_distance(a, b)
        d_ba = metrics.frechet_distance(b, a)
        assert abs(d_ab - d_ba) <= 1e-8
        assert d_ab >= 0.0


def test_frechet_dim_mismatch_and_nonfinite():
    a = stats_of(np.random.default_rng(0), d=3)
    b = stats_of(np.random.default_rng(0), d=4)
    with pytest.raises(ValueError, match="dims"):
        metrics.frechet_distance(a, b)
    bad = metrics.FeatureStats(mu=np.array([np.nan, 0.0]), sigma=np.eye(2), count=10)
    with pytest.raises(ValueError, match="finite"):
        metrics.frechet_distance(bad, stats_of(np.random.default_rng(0), d=2))


def test_frechet_rejects_badly_negative_product():
    # a strongly non-PSD "covariance" drives the product's eigenvalues negative
    a = metrics.FeatureStats(mu=np.zeros(2), sigma=np.eye(2), count=10)
    b = metrics.FeatureStats(mu=np.zeros(2), sigma=np.array([[1.0, 0.0], [0.0, -1.0]]), count=10)
    with pytest.raises(ValueError, match="eigenvalue"):
        metrics.frechet_distance(a, b)


def test_fid_monotone_under_pixel_noise():
    cfg = scene.SceneConfig(extent_m=50.0)
    frames = []
    for seed in range(4):
        sg = scene.sample_scene(seed, cfg)
        frames.extend(scene.render_frame(sg, cam).image for cam in sg.cameras.cameras)
    images = np.stack(frames).astype(np.float32)
    extractor = metrics.RandomConvExtractor(seed=0)
    rng = np.random.default_rng(0)
    dists = []
    for sigma in (0.05, 0.1, 0.2):
        noisy = np.clip(images + rng.normal(0, sigma, size=images.shape), 0, 1).astype(np.float32)
        dists.append(metrics.fid_between(noisy, images, extractor))
    assert dists[0] < dists[1] < dists[2], dists


# ---------------------------------------------------------------------------
# mIOU


def view_of(grid):
    return geometry.SemanticView(grid=grid.astype(np.uint8), camera_name="t", resolution_tag="groundtruth", classes=list(palette.CLASSES))


def test_miou_identity():
    grid = np.zeros((4, 4, 2))
    grid[:2, :, 0] = 1
    grid[3:, :2, 1] = 1
    out = metrics.miou(view_of(grid), view_of(grid))
    assert out["per_class"] == {"road": 1.0, "vehicle": 1.0}
    assert out["mean"] == 1.0


def test_miou_disjoint_masks():
    a = np.zeros((4, 4, 2))
    b = np.zeros((4, 4, 2))
    a[:2, :, 0] = 1
    b[2:, :, 0] = 1
    out = metrics.miou(view_of(a), view_of(b))
    assert out["per_class"]["road"] == 0.0


def test_miou_hand_counted_case():
    """3x3 grid; pred and gt vehicle masks of 4 cells overlapping in 2."""
    pred = np.zeros((3, 3, 2))
    gt = np.zeros((3, 3, 2))
    pred[0, 0, 1] = pred[0, 1, 1] = pred[1, 0, 1] = pred[1, 1, 1] = 1
    gt[1, 1, 1] = gt[1, 0, 1] = gt[2, 1, 1] = gt[2, 2, 1] = 1
    out = metrics.miou(view_of(pred), view_of(gt))
    assert out["per_class"]["vehicle"] == pytest.approx(2.0 / 6.0)


def test_miou_excludes_empty_union_classes():
    a = np.zeros((4, 4, 2))
    a[:2, :, 0] = 1
    out = metrics.miou(view_of(a), view_of(a))
    assert out["excluded"] == ["vehicle"]
    assert out["mean"] == 1.0


def test_miou_dim_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        metrics.miou(view_of(np.zeros((4, 4, 2))), view_of(np.zeros((5, 4, 2))))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_miou_bounds_property(seed):
    rng = np.random.default_rng(seed)
    a = view_of(rng.integers(0, 2, size=(6, 6, 2)))
    b = view_of(rng.integers(0, 2, size=(6, 6, 2)))
    out = metrics.miou(a, b)
    for iou in out["per_class"].values():
        assert 0.0 <= iou <= 1.0


# ---------------------------------------------------------------------------
# rule-based segmentation


def test_segment_pure_blue_is_background():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    img[:, :, 2] = 1.0
    seg = metrics.segment_generated(img)
    assert seg.grid.sum() == 0


def test_segment_gray_value_is_road():
    img = np.full((8, 8, 3), 0.4, dtype=np.float32)
    seg = metrics.segment_generated(img)
    assert (seg.grid[:, :, 0] == 1).all()
    assert seg.grid[:, :, 1].sum() == 0


def test_segment_idempotent_on_palette_pure_rendering():
    """Painting a view with band-center colors and segmenting returns the
    identical view (no boundary exclusion needed for pure colors)."""
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 3, size=(16, 24))
    hue = np.where(labels == palette.VEHICLE, 10.0, 215.0)
    sat = np.select([labels == palette.ROAD, labels == palette.VEHICLE], [0.02, 0.8], default=0.5)
    val = np.select([labels == palette.ROAD, labels == palette.VEHICLE], [0.4, 0.6], default=0.9)
    img = palette.hsv_to_rgb(hue, sat, val)
    seg = metrics.segment_generated(img)
    assert np.array_equal(seg.class_map(), labels.astype(np.uint8))


def test_hsv_roundtrip():
    rng = np.random.default_rng(0)
    rgb = rng.uniform(0, 1, size=(32, 32, 3))
    h, s, v = palette.rgb_to_hsv(rgb)
    back = palette.hsv_to_rgb(h, s, v)
    assert np.abs(back - rgb).max() < 1e-12


# ---------------------------------------------------------------------------
# feature extraction


def test_extract_features_deterministic_and_order_preserving():
    cfg = scene.SceneConfig(extent_m=50.0)
    sg = scene.sample_scene(0, cfg)
    images = np.stack([scene.render_frame(sg, cam).image for cam in sg.cameras.cameras]).astype(np.float32)
    ex = metrics.RandomConvExtractor(seed=1)
    f1 = metrics.extract_features(images, ex)
    f2 = metrics.extract_features(images, ex)
    assert np.array_equal(f1, f2)
    assert np.array_equal(f1[0], metrics.extract_features(images[:1], ex)[0])
    perm = np.array([3, 1, 0, 2, 5, 4])
    assert np.array_equal(metrics.extract_features(images[perm], ex), f1[perm])


def test_feature_variance_live_dimensions():
    cfg = scene.SceneConfig(extent_m=50.0)
    images = []
    for seed in range(17):
        sg = scene.sample_scene(seed, cfg)
        images.append(scene.render_frame(sg, sg.cameras.cameras[seed % 6]).image)
    feats = metrics.extract_features(np.stack(images).astype(np.float32), metrics.RandomConvExtractor(seed=0))
    live = (feats != 0).any(axis=0)  # dead-dimension scan
    assert live.any()
    assert (feats.var(axis=0)[live] > 0).all()


# ---------------------------------------------------------------------------
# BEV round trip


def test_bev_roundtrip_missing_views_rejected():
    sg = scene.sample_scene(0, scene.SceneConfig(extent_m=50.0))
    with pytest.raises(ValueError, match="missing views"):
        metrics.bev_roundtrip_miou({}, sg)


def test_bev_roundtrip_empty_views_zero_vehicle_iou():
    sg = scene.sample_scene(0, scene.SceneConfig(extent_m=50.0))
    w, h = sg.cameras.cameras[0].image_wh
    empty = {
        cam.name: geometry.view_from_class_map(np.zeros((h, w), dtype=np.uint8), cam.name, "groundtruth")
        for cam in sg.cameras.cameras
    }
    out = metrics.bev_roundtrip_miou(empty, sg)
    assert out["vehicle"] == 0.0 or np.isnan(out["vehicle"])
    assert out["road"] == 0.0


def test_bev_roundtrip_ground_truth_road_threshold():
    """Ground-truth renders splatted back to BEV reach road IOU >= 0.6
    aggregated over scenes (IPM is lossy at range)."""
    cfg = scene.SceneConfig(extent_m=50.0)
    ious = []
    for seed in range(6):
        sg = scene.sample_scene(seed, cfg)
        views = {cam.name: scene.render_frame(sg, cam).semantics for cam in sg.cameras.cameras}
        ious.append(metrics.bev_roundtrip_miou(views, sg, 0.5)["road"])
    assert float(np.mean(ious)) >= 0.6, ious


# ---------------------------------------------------------------------------
# report


def test_eval_report_serialization(tmp_path):
    rep = metrics.EvalReport(
        fid=12.5,
        per_class_iou={"road": 0.7, "vehicle": 0.4},
        miou=0.55,
        config_hash="abc",
        sample_counts={"generated": 64},
        protocol={"held_scenes": 150, "views_per_scene": 6},
    )
    back = __import__("json").loads(rep.to_json())
    assert back["fid"] == 12.5
    header, row = rep.csv_row()
    assert header[0] == "config_hash" and "iou_road" in header
    assert len(header) == len(row)
