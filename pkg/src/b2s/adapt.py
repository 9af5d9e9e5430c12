"""Street-view adaptation: view tokens, low-rank adapters and the dual-term
prior-preservation objective.

Each camera gets an alphanumeric prompt token (a fresh vocabulary concept)
and a LoRA adapter over the denoiser's attention projections; the base model
is shared across views and never modified.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import tensorio
from .diffusion import CONCEPT_WORDS, DenoiserBundle, TrainingDiverged, add_noise

# Paper-scale defaults, kept for provenance: rank 16, 5000 steps, batch 4,
# lr 1e-4, ~100 images per view. Desk defaults below are sized for CPU runs.
PAPER_DEFAULTS = {"rank": 16, "steps": 5000, "batch": 4, "lr": 1e-4, "images_per_view": 100}
DESK_DEFAULTS = {"rank": 4, "steps": 800, "batch": 8, "lr": 1e-3}


@dataclass
class ViewToken:
    camera_name: str
    token: str
    vocab_id: int
    embedding: torch.nn.Parameter


class LoraAdapter(nn.Module):
    """Per-layer (A, B) pairs over the UNet attention projections.

    B starts at zero so a fresh adapter is the identity; the effective update
    is gamma * B @ A with gamma = alpha / rank.
    """

    def __init__(self, camera_name: str, rank: int = 4, alpha: float | None = None):
        super().__init__()
        self.camera_name = camera_name
        self.rank = rank
        self.alpha = float(alpha if alpha is not None else rank)
        self.gamma = self.alpha / rank
        self.layers: dict[str, tuple[nn.Parameter, nn.Parameter]] = {}
        self._params = nn.ParameterDict()

    def add_layer(self, name: str, d_out: int, d_in: int, gen: torch.Generator) -> None:
        a = nn.Parameter(torch.randn((self.rank, d_in), generator=gen) / np.sqrt(d_in))
        b = nn.Parameter(torch.zeros((d_out, self.rank)))
        key = name.replace(".", "__")
        self._params[key + "__A"] = a
        self._params[key + "__B"] = b
        self.layers[name] = (a, b)

    @classmethod
    def for_bundle(
        cls, bundle: DenoiserBundle, camera_name: str, rank: int = 4, alpha: float | None = None, seed: int = 0
    ) -> "LoraAdapter":
        """Adapter targeting every attention projection (W_Q, W_K, W_V and
        the output projection) in the denoiser UNet."""
        adapter = cls(camera_name, rank=rank, alpha=alpha)
        gen = torch.Generator().manual_seed(seed)
        for attn_name in ("enc_attn", "mid_attn"):
            block = bundle.unet.encoder[attn_name]
            for proj in ("wq", "wk", "wv", "wo"):
                w = getattr(block, proj).weight
                adapter.add_layer(f"{attn_name}.{proj}", w.shape[0], w.shape[1], gen)
        return adapter

    # persistence ------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, (a, b) in self.layers.items():
            out[f"{name}.A"] = a.detach().cpu().numpy()
            out[f"{name}.B"] = b.detach().cpu().numpy()
        return out

    def save(self, directory: str | Path, base_hash: str, token: str, token_embedding: torch.Tensor) -> Path:
        manifest = {
            "kind": "lora_adapter",
            "camera_name": self.camera_name,
            "rank": self.rank,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "base_hash": base_hash,
            "token": token,
            "token_embedding": [float(x) for x in token_embedding.detach().cpu().numpy()],
        }
        return tensorio.save_checkpoint(directory, self.state_arrays(), manifest)

    @classmethod
    def load(cls, directory: str | Path, bundle: DenoiserBundle) -> tuple["LoraAdapter", dict]:
        tensors, manifest = tensorio.load_checkpoint(directory)
        if manifest["base_hash"] != bundle.content_hash():
            raise ValueError(
                "adapter was trained against a different base checkpoint "
                f"(expected {manifest['base_hash'][:12]}, got {bundle.content_hash()[:12]})"
            )
        adapter = cls(manifest["camera_name"], rank=manifest["rank"], alpha=manifest["alpha"])
        names = sorted({k.rsplit(".", 1)[0] for k in tensors})
        for name in names:
            a = torch.from_numpy(tensors[f"{name}.A"])
            b = torch.from_numpy(tensors[f"{name}.B"])
            key = name.replace(".", "__")
            adapter._params[key + "__A"] = nn.Parameter(a)
            adapter._params[key + "__B"] = nn.Parameter(b)
            adapter.layers[name] = (adapter._params[key + "__A"], adapter._params[key + "__B"])
        return adapter, manifest


# ---------------------------------------------------------------------------
# LoRA algebra


def lora_forward(W: torch.Tensor, pair: tuple[torch.Tensor, torch.Tensor], x: torch.Tensor, gamma: float) -> torch.Tensor:
    """y = W x + gamma * B (A x); x is (..., d_in)."""
    a, b = pair
    if a.shape[1] != W.shape[1] or b.shape[0] != W.shape[0] or a.shape[0] != b.shape[1]:
        raise ValueError(
            f"rank/dim mismatch: W {tuple(W.shape)}, A {tuple(a.shape)}, B {tuple(b.shape)}"
        )
    return x @ W.T + gamma * ((x @ a.T) @ b.T)


def merge_lora(W: torch.Tensor, pair: tuple[torch.Tensor, torch.Tensor], gamma: float) -> torch.Tensor:
    """W' = W + gamma * B A."""
    a, b = pair
    if a.shape[1] != W.shape[1] or b.shape[0] != W.shape[0] or a.shape[0] != b.shape[1]:
        raise ValueError(
            f"rank/dim mismatch: W {tuple(W.shape)}, A {tuple(a.shape)}, B {tuple(b.shape)}"
        )
    return W + gamma * (b @ a)


# ---------------------------------------------------------------------------
# view tokens


def register_view_token(bundle: DenoiserBundle, camera_name: str, seed: int | None = None) -> ViewToken:
    """Extend the vocabulary with the camera's alphanumeric token; embedding
    starts at the mean of existing embeddings plus small noise."""
    token = camera_name
    if token in CONCEPT_WORDS:
        raise ValueError(f"view token {token!r} collides with a concept word")
    if camera_name in bundle.view_tokens:
        raise ValueError(f"camera {camera_name!r} already has a registered view token")
    pe = bundle.prompt_encoder
    gen = torch.Generator().manual_seed(seed if seed is not None else abs(hash(token)) % (2**31))
    init = pe.mean_embedding() + 0.01 * torch.randn(pe.dim, generator=gen)
    vocab_id = pe.add_token(token, init)
    bundle.view_tokens[camera_name] = token
    return ViewToken(
        camera_name=camera_name,
        token=token,
        vocab_id=vocab_id,
        embedding=pe.extra_embeddings[token],
    )


def activate_view(bundle: DenoiserBundle, camera_name: str) -> None:
    """Make subsequent sampling apply this camera's adapter (exclusive)."""
    if camera_name not in bundle.adapters:
        raise KeyError(f"no adapter trained for camera {camera_name!r}")
    bundle.active_view = camera_name


def deactivate_view(bundle: DenoiserBundle) -> None:
    bundle.active_view = None


# ---------------------------------------------------------------------------
# adaptation objective


def view_adapt_loss(
    bundle: DenoiserBundle,
    adapter: LoraAdapter,
    x_reg: torch.Tensor,
    ctx_reg: torch.Tensor,
    x_view: torch.Tensor,
    ctx_view: torch.Tensor,
    lam: float,
    gen: torch.Generator,
    t_override: tuple[int, int] | None = None,
    eps_override: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Dual-term objective: reconstruction of the regularization batch under
    prompts without the view token, plus lambda times the same term on the
    view batch under token prompts. Timesteps and noises are drawn
    independently per term; x_hat uses the epsilon identity
    x_hat = (x_t - sigma_t * eps_theta) / alpha_t.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if len(x_reg) == 0 or len(x_view) == 0:
        raise ValueError("both batches must be non-empty")
    sched = bundle.schedule

    def term(x0: torch.Tensor, ctx: torch.Tensor, t_fixed: int | None, eps_fixed: torch.Tensor | None) -> torch.Tensor:
        if t_fixed is None:
            t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=gen)
        else:
            t = torch.full((x0.shape[0],), t_fixed, dtype=torch.long)
        eps = eps_fixed if eps_fixed is not None else torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        x_t = add_noise(sched, x0, t, eps)
        pred = bundle.unet(x_t, t, ctx, adapter=adapter)
        a = torch.as_tensor(sched.alpha, dtype=x0.dtype)[t - 1].view(-1, 1, 1, 1)
        s = torch.as_tensor(sched.sigma, dtype=x0.dtype)[t - 1].view(-1, 1, 1, 1)
        x_hat = (x_t - s * pred) / a
        return torch.mean((x_hat - x0) ** 2)

    t1 = t_override[0] if t_override else None
    t2 = t_override[1] if t_override else None
    e1 = eps_override[0] if eps_override else None
    e2 = eps_override[1] if eps_override else None
    loss = term(x_reg, ctx_reg, t1, e1)
    if lam > 0:
        loss = loss + lam * term(x_view, ctx_view, t2, e2)
    return loss


def train_view_adapter(
    bundle: DenoiserBundle,
    camera_name: str,
    view_latents: torch.Tensor,
    view_weathers: list[str],
    reg_latents: torch.Tensor,
    reg_prompts: list[str],
    config: dict | None = None,
) -> LoraAdapter:
    """Per-view LoRA + token-embedding training against the frozen base.

    view prompts carry the camera token ("a photo from cam0 of a street,
    {weather}"), regularization prompts do not.
    """
    from .control import freeze_base
    from .diffusion import view_prompt

    if camera_name not in bundle.view_tokens:
        raise KeyError(f"camera {camera_name!r} has no registered view token")
    if not (bundle.ae_trained and bundle.denoiser_trained):
        raise RuntimeError("view adaptation requires a trained base bundle")
    cfg = dict(DESK_DEFAULTS)
    cfg.update({"seed": 0, "lambda": 1.0})
    cfg.update(config or {})

    token = bundle.view_tokens[camera_name]
    freeze_base(bundle)
    adapter = LoraAdapter.for_bundle(bundle, camera_name, rank=cfg["rank"], seed=cfg["seed"])
    token_param = bundle.prompt_encoder.extra_embeddings[token]
    token_param.requires_grad_(True)

    gen = torch.Generator().manual_seed(cfg["seed"])
    order_rng = np.random.default_rng(cfg["seed"])
    view_ids = torch.tensor(
        [bundle.prompt_encoder.tokenize(view_prompt(token, w)) for w in view_weathers], dtype=torch.long
    )
    reg_ids = torch.tensor([bundle.prompt_encoder.tokenize(p) for p in reg_prompts], dtype=torch.long)

    opt = torch.optim.Adam(list(adapter.parameters()) + [token_param], lr=cfg["lr"])
    for step in range(cfg["steps"]):
        vi = order_rng.integers(0, len(view_latents), size=cfg["batch"])
        ri = order_rng.integers(0, len(reg_latents), size=cfg["batch"])
        ctx_view = bundle.prompt_encoder(view_ids[vi])
        ctx_reg = bundle.prompt_encoder(reg_ids[ri])
        loss = view_adapt_loss(
            bundle, adapter, reg_latents[ri], ctx_reg, view_latents[vi], ctx_view, cfg["lambda"], gen
        )
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"view adaptation loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()

    bundle.adapters[camera_name] = adapter
    return adapter
