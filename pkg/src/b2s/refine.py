"""Shape refinement network.

A residual encoder-decoder upsamples the quarter-resolution cuboid projection
4x and corrects silhouettes toward ground truth. One fixed 2x up-sampling
stem precedes three down-sampling blocks and four up-sampling blocks with
additive (LinkNet-style) skips; the combination nets the 4x scale change.

Logits cover the explicit classes; the background logit is implicitly zero,
so a pixel is background exactly when every class logit is negative.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import tensorio
from .diffusion import TrainingDiverged, init_params
from .geometry import CLASSES, SemanticView


class ShapeError(ValueError):
    pass


# SiLU keeps the loss smooth, so analytic gradients match central finite
# differences at tight tolerances (ReLU kinks break epsilon-sized probes).
def _block(ch_in: int, ch_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(ch_in, ch_out, 3, stride=stride, padding=1),
        nn.SiLU(),
        nn.Conv2d(ch_out, ch_out, 3, padding=1),
        nn.SiLU(),
    )


def _up_block(ch_in: int, ch_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(ch_in, ch_out, 4, stride=2, padding=1),
        nn.SiLU(),
        nn.Conv2d(ch_out, ch_out, 3, padding=1),
        nn.SiLU(),
    )


class RefinerNet(nn.Module):
    def __init__(self, channels: int = 2, widths: tuple[int, ...] = (24, 32, 48, 64)):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.widths = widths
        self.channels = channels
        self.stem = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(channels, w0, 3, padding=1),
            nn.SiLU(),
        )
        self.down1 = _block(w0, w1, stride=2)
        self.down2 = _block(w1, w2, stride=2)
        self.down3 = _block(w2, w3, stride=2)
        self.up1 = _up_block(w3, w2)
        self.up2 = _up_block(w2, w1)
        self.up3 = _up_block(w1, w0)
        self.up4 = _up_block(w0, w0)
        self.head = nn.Conv2d(w0, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.stem(x)
        d1 = self.down1(s)
        d2 = self.down2(d1)
        d3 = self.down3(d2)
        u = self.up1(d3) + d2
        u = self.up2(u) + d1
        u = self.up3(u) + s
        u = self.up4(u)
        return self.head(u)


@dataclass
class Refiner:
    net: RefinerNet
    classes: list[str]
    seed: int
    steps_trained: int = 0

    @classmethod
    def create(cls, seed: int = 0, widths: tuple[int, ...] = (24, 32, 48, 64)) -> "Refiner":
        net = RefinerNet(channels=len(CLASSES), widths=widths)
        init_params(net, torch.Generator().manual_seed(seed))
        return cls(net=net, classes=list(CLASSES), seed=seed)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def save(self, directory: str | Path) -> Path:
        tensors = {name: p.detach().cpu().numpy() for name, p in self.net.state_dict().items()}
        manifest = {
            "kind": "refiner",
            "widths": list(self.net.widths),
            "classes": self.classes,
            "seed": self.seed,
            "steps_trained": self.steps_trained,
        }
        return tensorio.save_checkpoint(directory, tensors, manifest)

    @classmethod
    def load(cls, directory: str | Path) -> "Refiner":
        tensors, manifest = tensorio.load_checkpoint(directory)
        net = RefinerNet(channels=len(manifest["classes"]), widths=tuple(manifest["widths"]))
        net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        return cls(
            net=net,
            classes=list(manifest["classes"]),
            seed=manifest["seed"],
            steps_trained=manifest["steps_trained"],
        )


def logits_to_class_map(logits: torch.Tensor) -> np.ndarray:
    """(c, H, W) logits -> label map with implicit background logit 0."""
    full = torch.cat([torch.zeros_like(logits[:1]), logits], dim=0)
    return full.argmax(dim=0).to(torch.uint8).numpy()


def refine(view: SemanticView, refiner: Refiner, image_wh: tuple[int, int] | None = None) -> SemanticView:
    """Upsample and correct an initial low-resolution view (4x)."""
    h, w = view.grid.shape[:2]
    x = torch.from_numpy(np.ascontiguousarray(view.grid.transpose(2, 0, 1), dtype=np.float32))[None]
    if image_wh is not None:
        exp_w, exp_h = int(np.ceil(image_wh[0] / 4)), int(np.ceil(image_wh[1] / 4))
        if (h, w) != (exp_h, exp_w):
            raise ShapeError(
                f"initial view is {(h, w)} (HxW) but ceil(image_wh/4) expects {(exp_h, exp_w)}"
            )
    with torch.no_grad():
        logits = refiner.net(x)[0]
    class_map = logits_to_class_map(logits)
    out = np.zeros((*class_map.shape, len(refiner.classes)), dtype=np.uint8)
    for i in range(len(refiner.classes)):
        out[:, :, i] = class_map == i + 1
    return SemanticView(grid=out, camera_name=view.camera_name, resolution_tag="refined", classes=list(refiner.classes))


def upsample_nn(view: SemanticView, factor: int = 4) -> SemanticView:
    """Nearest-neighbor upsampling baseline (refinement bypass)."""
    grid = np.repeat(np.repeat(view.grid, factor, axis=0), factor, axis=1)
    return SemanticView(grid=grid, camera_name=view.camera_name, resolution_tag="refined", classes=list(view.classes))


def refiner_loss(net: RefinerNet, inputs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy over {background + classes}; background targets
    are label 0 and its logit is fixed at zero."""
    logits = net(inputs)
    full = torch.cat([torch.zeros_like(logits[:, :1]), logits], dim=1)
    return F.cross_entropy(full, targets.long())


def train_refiner(
    dataset: list[tuple[np.ndarray, np.ndarray]],
    config: dict | None = None,
) -> tuple[Refiner, list[float]]:
    """Trains on (initial one-hot grid, ground-truth label map) pairs.

    Desk defaults: 30 epochs at lr 1e-3 (the full-scale regime documented in
    the README uses 10 epochs at lr 1e-7 atop a pretrained init, which does
    not transfer to a fresh small network).
    """
    if not dataset:
        raise ValueError("empty training dataset")
    cfg = {"epochs": 30, "batch": 32, "lr": 1e-3, "seed": 0, "widths": (24, 32, 48, 64), "flip_augment": True}
    cfg.update(config or {})
    h, w = dataset[0][0].shape[:2]
    ht, wt = dataset[0][1].shape
    for inp, tgt in dataset:
        if inp.shape[:2] != (h, w) or tgt.shape != (ht, wt):
            raise ShapeError("inconsistent sample dimensions in dataset")
    if (ht, wt) != (h * 4, w * 4):
        raise ShapeError(f"target dims {(ht, wt)} are not 4x input dims {(h, w)}")

    refiner = Refiner.create(seed=cfg["seed"], widths=tuple(cfg["widths"]))
    torch.manual_seed(cfg["seed"])
    inputs = torch.from_numpy(np.stack([s[0].transpose(2, 0, 1) for s in dataset]).astype(np.float32))
    targets = torch.from_numpy(np.stack([s[1] for s in dataset]).astype(np.int64))
    opt = torch.optim.Adam(refiner.net.parameters(), lr=cfg["lr"])
    order_rng = np.random.default_rng(cfg["seed"])
    epoch_losses = []
    step = 0
    for _epoch in range(cfg["epochs"]):
        perm = order_rng.permutation(len(dataset))
        batch_losses = []
        for i in range(0, len(perm), cfg["batch"]):
            idx = perm[i : i + cfg["batch"]]
            x, y = inputs[idx], targets[idx]
            if cfg["flip_augment"]:
                flip = torch.from_numpy(order_rng.random(len(idx)) < 0.5)
                x = torch.where(flip[:, None, None, None], x.flip(-1), x)
                y = torch.where(flip[:, None, None], y.flip(-1), y)
            loss = refiner_loss(refiner.net, x, y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"refiner loss non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(loss.item())
            step += 1
        epoch_losses.append(float(np.mean(batch_losses)))
    refiner.steps_trained = step
    return refiner, epoch_losses
