"""Evaluation: Fréchet feature distance, mIOU, rule-based segmentation of
generated images, and BEV round-trip scoring."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import palette
from .geometry import SemanticView, ipm_ground, view_from_class_map
from .scene import SceneGraph, points_in_polygon, rasterize_bev

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# feature statistics and Fréchet distance


@dataclass
class FeatureStats:
    mu: np.ndarray  # (d,)
    sigma: np.ndarray  # (d, d), symmetric
    count: int

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        n, d = feats.shape
        if n < d:
            log.warning("FeatureStats from %d samples < %d dims; covariance is unreliable", n, d)
        mu = feats.mean(axis=0)
        sigma = np.cov(feats, rowvar=False)  # unbiased (n-1)
        sigma = np.atleast_2d(sigma)
        sigma = (sigma + sigma.T) / 2.0
        return cls(mu=mu, sigma=sigma, count=n)


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a-mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The matrix square root comes from an eigen-decomposition of the
    symmetrized product sqrt(S_a) S_b sqrt(S_a); small negative eigenvalues
    (within 1e-6 of the largest) are clipped at zero, larger ones raise.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"feature dims differ: {a.mu.shape} vs {b.mu.shape}")
    for stats in (a, b):
        if not (np.isfinite(stats.mu).all() and np.isfinite(stats.sigma).all()):
            raise ValueError("non-finite feature statistics")

    va, Ua = np.linalg.eigh(a.sigma)
    sqrt_a = (Ua * np.sqrt(np.clip(va, 0.0, None))) @ Ua.T
    prod = sqrt_a @ b.sigma @ sqrt_a
    prod = (prod + prod.T) / 2.0
    lam = np.linalg.eigvalsh(prod)
    lam_max = max(float(lam.max()), 0.0)
    if lam.min() < -1e-6 * max(lam_max, 1e-12):
        raise ValueError(f"matrix square root failed: eigenvalue {lam.min():.3e} too negative")
    tr_sqrt = np.sqrt(np.clip(lam, 0.0, None)).sum()

    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_sqrt)


def extract_features(images: np.ndarray, extractor) -> np.ndarray:
    """One feature vector per image via the pluggable extractor.

    `extractor` exposes features(images (N,H,W,3) in [0,1]) -> (N, d).
    """
    feats = extractor.features(np.asarray(images, dtype=np.float32))
    return np.asarray(feats, dtype=np.float64)


class EncoderFeatureExtractor:
    """Default FID feature extractor: the trained autoencoder's encoder
    output, spatially mean-pooled (one value per latent channel)."""

    def __init__(self, bundle):
        if not bundle.ae_trained:
            raise ValueError("feature extraction requires a trained autoencoder")
        self.bundle = bundle

    def features(self, images: np.ndarray) -> np.ndarray:
        import torch

        from .diffusion import encode_batch

        with torch.no_grad():
            latents = encode_batch(self.bundle, images)
        return latents.mean(dim=(2, 3)).numpy()


class RandomConvExtractor:
    """Fixed random-weight conv feature extractor (extractor-independence
    testing; no training involved)."""

    def __init__(self, seed: int = 0, channels: int = 16):
        import torch

        gen = torch.Generator().manual_seed(seed)
        self.conv1 = torch.nn.Conv2d(3, channels, 5, stride=2, padding=2)
        self.conv2 = torch.nn.Conv2d(channels, channels, 5, stride=2, padding=2)
        for conv in (self.conv1, self.conv2):
            torch.nn.init.normal_(conv.weight, std=0.2, generator=gen)
            torch.nn.init.zeros_(conv.bias)
            conv.requires_grad_(False)
        self.channels = channels

    def features(self, images: np.ndarray) -> np.ndarray:
        import torch

        x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
        with torch.no_grad():
            h = torch.relu(self.conv1(x))
            h = torch.relu(self.conv2(h))
            pooled = h.mean(dim=(2, 3))
        return pooled.numpy()


def fid_between(images_a: np.ndarray, images_b: np.ndarray, extractor) -> float:
    fa = FeatureStats.from_features(extract_features(images_a, extractor))
    fb = FeatureStats.from_features(extract_features(images_b, extractor))
    return frechet_distance(fa, fb)


# ---------------------------------------------------------------------------
# segmentation metrics


def miou(pred: SemanticView, gt: SemanticView, classes: list[str] | None = None) -> dict:
    """Per-class intersection-over-union plus unweighted mean.

    Classes with an empty union in both views are excluded from the mean
    (logged once); the report records which were excluded.
    """
    if pred.grid.shape != gt.grid.shape:
        raise ValueError(f"shape mismatch: pred {pred.grid.shape} vs gt {gt.grid.shape}")
    classes = classes or gt.classes
    per_class: dict[str, float] = {}
    excluded: list[str] = []
    for i, name in enumerate(classes):
        p = pred.grid[:, :, i] > 0
        g = gt.grid[:, :, i] > 0
        union = (p | g).sum()
        if union == 0:
            excluded.append(name)
            continue
        per_class[name] = float((p & g).sum() / union)
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return {"per_class": per_class, "mean": mean, "excluded": excluded}


def miou_aggregate(pairs: list[tuple[SemanticView, SemanticView]], classes: list[str]) -> dict:
    """Dataset-level IOU: intersections and unions summed before dividing."""
    inter = np.zeros(len(classes))
    union = np.zeros(len(classes))
    for pred, gt in pairs:
        for i in range(len(classes)):
            p = pred.grid[:, :, i] > 0
            g = gt.grid[:, :, i] > 0
            inter[i] += (p & g).sum()
            union[i] += (p | g).sum()
    per_class = {}
    excluded = []
    for i, name in enumerate(classes):
        if union[i] == 0:
            excluded.append(name)
        else:
            per_class[name] = float(inter[i] / union[i])
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return {"per_class": per_class, "mean": mean, "excluded": excluded}


def segment_generated(image: np.ndarray, camera_name: str = "") -> SemanticView:
    """Rule-based palette segmentation of a rendered or generated image."""
    h, s, v = palette.rgb_to_hsv(np.clip(image, 0.0, 1.0))
    class_map = palette.classify_hsv(h, s, v)
    return view_from_class_map(class_map, camera_name, "segmented")


def boundary_mask(class_map: np.ndarray, radius: int = 1) -> np.ndarray:
    """True where a pixel is within `radius` of a class change."""
    mask = np.zeros_like(class_map, dtype=bool)
    mask[:, :-1] |= class_map[:, :-1] != class_map[:, 1:]
    mask[:, 1:] |= class_map[:, :-1] != class_map[:, 1:]
    mask[:-1, :] |= class_map[:-1, :] != class_map[1:, :]
    mask[1:, :] |= class_map[:-1, :] != class_map[1:, :]
    for _ in range(radius - 1):
        grown = mask.copy()
        grown[1:, :] |= mask[:-1, :]
        grown[:-1, :] |= mask[1:, :]
        grown[:, 1:] |= mask[:, :-1]
        grown[:, :-1] |= mask[:, 1:]
        mask = grown
    return mask


# ---------------------------------------------------------------------------
# BEV round trip


def bev_roundtrip_miou(
    views: dict[str, SemanticView],
    scene: SceneGraph,
    meters_per_cell: float = 0.5,
    max_range: float | None = None,
) -> dict:
    """Splat per-view semantics back to the BEV frame and score against the
    scene's rasterized layout.

    Road pixels map through the ground-plane inverse projection using their
    full pixel footprint; vehicle pixels use the lowest pixel per column as
    the ground contact.
    """
    missing = [c.name for c in scene.cameras.cameras if c.name not in views]
    if missing:
        raise ValueError(f"missing views for cameras: {missing}")
    layout = rasterize_bev(scene, meters_per_cell)
    n = layout.grid.shape[0]
    half = scene.extent_m / 2.0
    max_range = max_range if max_range is not None else scene.extent_m
    recon = np.zeros((n, n, 2), dtype=np.uint8)

    def cell_of(x: float, y: float) -> tuple[int, int] | None:
        col = int(np.floor((x + half) / meters_per_cell))
        row = int(np.floor((half - y) / meters_per_cell))
        if 0 <= row < n and 0 <= col < n:
            return row, col
        return None

    xs = -half + (np.arange(n) + 0.5) * meters_per_cell
    ys = half - (np.arange(n) + 0.5) * meters_per_cell

    for cam in scene.cameras.cameras:
        view = views[cam.name]
        cm = view.class_map()
        h_px, w_px = cm.shape
        for r, c in zip(*np.nonzero(cm == palette.ROAD)):
            corners = []
            ok = True
            for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                g = ipm_ground((c + du, r + dv), cam)
                if g is None or g[0] ** 2 + g[1] ** 2 > max_range**2:
                    ok = False
                    break
                corners.append(g)
            if not ok:
                continue
            quad = np.asarray(corners)
            lo = np.clip(np.floor((quad[:, 0].min() + half) / meters_per_cell), 0, n - 1)
            hi = np.clip(np.ceil((quad[:, 0].max() + half) / meters_per_cell), 0, n - 1)
            rlo = np.clip(np.floor((half - quad[:, 1].max()) / meters_per_cell), 0, n - 1)
            rhi = np.clip(np.ceil((half - quad[:, 1].min()) / meters_per_cell), 0, n - 1)
            cols = np.arange(int(lo), int(hi) + 1)
            rows = np.arange(int(rlo), int(rhi) + 1)
            if len(cols) == 0 or len(rows) == 0:
                continue
            gx, gy = np.meshgrid(xs[cols], ys[rows])
            pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
            inside = points_in_polygon(pts, quad).reshape(len(rows), len(cols))
            recon[np.ix_(rows, cols, [0])] |= inside[:, :, None].astype(np.uint8)

        veh_cols = np.nonzero((cm == palette.VEHICLE).any(axis=0))[0]
        for c in veh_cols:
            r = np.nonzero(cm[:, c] == palette.VEHICLE)[0].max()
            g = ipm_ground((c + 0.5, r + 1.0), cam)
            if g is None or g[0] ** 2 + g[1] ** 2 > max_range**2:
                continue
            cell = cell_of(*g)
            if cell is None:
                continue
            rad = max(1, int(round(1.0 / meters_per_cell)))
            r0, c0 = cell
            recon[max(0, r0 - rad) : r0 + rad + 1, max(0, c0 - rad) : c0 + rad + 1, 1] = 1

    result = {}
    for i, name in enumerate(layout.classes):
        p = recon[:, :, i] > 0
        g = layout.grid[:, :, i] > 0
        union = (p | g).sum()
        result[name] = float((p & g).sum() / union) if union else float("nan")
    return result


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    fid: float
    per_class_iou: dict[str, float]
    miou: float
    config_hash: str
    sample_counts: dict[str, int]
    protocol: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fid": self.fid,
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "config_hash": self.config_hash,
            "sample_counts": self.sample_counts,
            "protocol": self.protocol,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def csv_row(self) -> tuple[list[str], list]:
        header = ["config_hash", "fid", "miou"] + [f"iou_{k}" for k in sorted(self.per_class_iou)]
        row = [self.config_hash, self.fid, self.miou] + [
            self.per_class_iou[k] for k in sorted(self.per_class_iou)
        ]
        return header, row
