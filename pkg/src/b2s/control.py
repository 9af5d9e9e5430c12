"""Semantic-map conditioning branch.

A trainable duplicate of the base UNet encoder receives the noisy latent plus
a conv-stem projection of the semantic view, and its features enter the
frozen base decoder through zero-initialized 1x1 projections, so a fresh
branch leaves the base prediction untouched.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import tensorio
from .diffusion import (
    LATENT_CHANNELS,
    DenoiserBundle,
    TrainingDiverged,
    add_noise,
    build_encoder_stack,
    init_params,
    run_encoder_stack,
)
from .geometry import SemanticView


class ControlBranch(nn.Module):
    """Condition stem + duplicate encoder + zero projections."""

    def __init__(self, base: int = 32, mid: int = 64, temb_dim: int = 64, stem_width: int = 16):
        super().__init__()
        self.base = base
        self.mid = mid
        # Four convs from (H, W, c) to latent resolution; widths double and
        # the image-to-latent factor is 4, so two of the four are stride 2.
        self.stem = nn.Sequential(
            nn.Conv2d(2, stem_width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(stem_width, stem_width * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(stem_width * 2, stem_width * 4, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(stem_width * 4, LATENT_CHANNELS, 3, stride=2, padding=1),
        )
        self.encoder = build_encoder_stack(base, mid, temb_dim, "ctrl.")
        self.zero_h1 = nn.Conv2d(base, base, 1)
        self.zero_h2 = nn.Conv2d(mid, mid, 1)
        self.zero_mid = nn.Conv2d(mid, mid, 1)
        for zc in (self.zero_h1, self.zero_h2, self.zero_mid):
            nn.init.zeros_(zc.weight)
            nn.init.zeros_(zc.bias)

    @classmethod
    def from_bundle(cls, bundle: DenoiserBundle, seed: int = 0, stem_width: int = 16) -> "ControlBranch":
        """Duplicate the trained base encoder; stem fresh, projections zero."""
        branch = cls(base=bundle.unet.base, mid=bundle.unet.mid, temb_dim=bundle.unet.temb_dim, stem_width=stem_width)
        gen = torch.Generator().manual_seed(seed)
        init_params(branch.stem, gen)
        branch.encoder.load_state_dict(bundle.unet.encoder.state_dict())
        for zc in (branch.zero_h1, branch.zero_h2, branch.zero_mid):
            nn.init.zeros_(zc.weight)
            nn.init.zeros_(zc.bias)
        return branch

    # condition handling -----------------------------------------------------
    @staticmethod
    def condition_array(view: SemanticView | np.ndarray) -> np.ndarray:
        grid = view.grid if isinstance(view, SemanticView) else view
        return np.ascontiguousarray(grid.transpose(2, 0, 1), dtype=np.float32)

    def condition_tensor(self, view: SemanticView | np.ndarray | torch.Tensor) -> torch.Tensor:
        if isinstance(view, torch.Tensor):
            cond = view
        else:
            cond = torch.from_numpy(self.condition_array(view))
        if cond.dim() == 3:
            cond = cond[None]
        return cond

    # prediction --------------------------------------------------------------
    def injections(
        self, x_t: torch.Tensor, temb: torch.Tensor, ctx: torch.Tensor, cond: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        stem_out = self.stem(cond)
        if stem_out.shape[-2:] != x_t.shape[-2:]:
            raise ValueError(
                f"condition stem output {tuple(stem_out.shape[-2:])} does not match latent {tuple(x_t.shape[-2:])}"
            )
        if stem_out.shape[0] == 1 and x_t.shape[0] > 1:
            stem_out = stem_out.expand(x_t.shape[0], -1, -1, -1)
        h1, h2, m = run_encoder_stack(self.encoder, x_t, temb, ctx, stem=stem_out)
        return self.zero_h1(h1), self.zero_h2(h2), self.zero_mid(m)

    def predict(
        self,
        bundle: DenoiserBundle,
        x_t: torch.Tensor,
        t: torch.Tensor,
        ctx: torch.Tensor,
        cond: torch.Tensor,
        adapter=None,
    ) -> torch.Tensor:
        temb = bundle.unet.time_embedding(t)
        inj = self.injections(x_t, temb, ctx, cond)
        return bundle.unet(x_t, t, ctx, injections=inj, adapter=adapter)

    # persistence --------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.detach().cpu().numpy() for name, p in self.state_dict().items()}

    def save(self, directory: str | Path, base_hash: str, extra: dict | None = None) -> Path:
        manifest = {
            "kind": "control_branch",
            "base": self.base,
            "mid": self.mid,
            "base_hash": base_hash,
        }
        manifest.update(extra or {})
        return tensorio.save_checkpoint(directory, self.state_arrays(), manifest)

    @classmethod
    def load(cls, directory: str | Path, bundle: DenoiserBundle) -> "ControlBranch":
        tensors, manifest = tensorio.load_checkpoint(directory)
        if manifest["base_hash"] != bundle.content_hash():
            raise ValueError(
                "control branch was trained against a different base checkpoint "
                f"(expected {manifest['base_hash'][:12]}, got {bundle.content_hash()[:12]})"
            )
        branch = cls(base=manifest["base"], mid=manifest["mid"])
        branch.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        return branch


def controlled_predict(
    bundle: DenoiserBundle,
    branch: ControlBranch,
    x_t: torch.Tensor,
    t: torch.Tensor,
    ctx: torch.Tensor,
    condition: SemanticView | np.ndarray | torch.Tensor,
    adapter=None,
) -> torch.Tensor:
    """Base epsilon prediction with decoder skips augmented by the branch."""
    cond = branch.condition_tensor(condition)
    return branch.predict(bundle, x_t, t, ctx, cond, adapter=adapter)


def freeze_base(bundle: DenoiserBundle) -> None:
    for mod in (bundle.ae, bundle.unet, bundle.prompt_encoder):
        for p in mod.parameters():
            p.requires_grad_(False)


def train_control(
    bundle: DenoiserBundle,
    branch: ControlBranch,
    latents: torch.Tensor,
    conditions: torch.Tensor,
    prompts: list[str],
    config: dict | None = None,
) -> list[float]:
    """Eq-2-style objective through controlled_predict; only branch params
    update (the base stays frozen, checksum-verified by callers/tests)."""
    if not (bundle.ae_trained and bundle.denoiser_trained):
        raise RuntimeError("control training requires a trained base bundle")
    cfg = {"steps": 3000, "batch": 32, "lr": 1e-3, "seed": 0, "prompt_dropout": 0.1, "cond_dropout": 0.1}
    cfg.update(config or {})
    freeze_base(bundle)
    gen = torch.Generator().manual_seed(cfg["seed"])
    order_rng = np.random.default_rng(cfg["seed"])
    ids_all = torch.tensor([bundle.prompt_encoder.tokenize(p) for p in prompts], dtype=torch.long)
    null_ids = torch.zeros(bundle.prompt_encoder.length, dtype=torch.long)
    opt = torch.optim.Adam(branch.parameters(), lr=cfg["lr"])
    losses = []
    for step in range(cfg["steps"]):
        idx = order_rng.integers(0, len(latents), size=cfg["batch"])
        x0 = latents[idx]
        cond = conditions[idx].clone()
        ids = ids_all[idx].clone()
        drop_p = torch.rand(len(idx), generator=gen) < cfg["prompt_dropout"]
        ids[drop_p] = null_ids
        drop_c = torch.rand(len(idx), generator=gen) < cfg["cond_dropout"]
        cond[drop_c] = 0.0
        ctx = bundle.prompt_encoder(ids)

        t = torch.randint(1, bundle.schedule.T + 1, (len(idx),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = add_noise(bundle.schedule, x0, t, eps)
        pred = branch.predict(bundle, x_t, t, ctx, cond)
        loss = torch.mean((eps - pred) ** 2)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"control loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses
