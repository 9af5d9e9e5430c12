"""Micro latent-diffusion backbone.

A small conv autoencoder defines the latent space (4 channels at 1/4 spatial
resolution), a time-conditioned UNet predicts the added noise (epsilon
parameterization), and a toy prompt encoder (embedding table, learned
positions, one self-attention layer) provides the cross-attention context.

Attention reductions over the key axis are summed in sorted order, which
makes outputs bitwise invariant to key permutations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import tensorio

LATENT_CHANNELS = 4
PROMPT_LEN = 8
PROMPT_DIM = 64

BASE_VOCAB = [
    "<pad>",
    "a",
    "photo",
    "from",
    "of",
    "street",
    "road",
    "car",
    "background",
    "clear",
    "rain",
    "fog",
    "sunset",
]
CONCEPT_WORDS = {"road", "car", "street", "background", "clear", "rain", "fog", "sunset"}
FOUNDATIONAL_PROMPTS = ["road", "car", "street background"]


def base_prompt(weather: str) -> str:
    return f"a photo of a street, {weather}"


def view_prompt(token: str, weather: str) -> str:
    return f"a photo from {token} of a street, {weather}"


# ---------------------------------------------------------------------------
# noise schedule


@dataclass
class NoiseSchedule:
    """Timestep coefficients: alpha_t = sqrt(abar_t), sigma_t = sqrt(1-abar_t)."""

    T: int
    alpha_bar: np.ndarray  # (T,) float64, strictly decreasing, index t-1

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if len(ab) != self.T:
            raise ValueError("alpha_bar length != T")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if not (ab[0] > 0.99 and ab[-1] < 0.01 and ab[-1] > 0):
            raise ValueError("alpha_bar endpoints out of contract (abar_1>0.99, 0<abar_T<0.01)")
        self.alpha_bar = ab
        self.alpha = np.sqrt(ab)
        self.sigma = np.sqrt(1.0 - ab)

    def coeffs(self, t: int) -> tuple[float, float]:
        if not (1 <= t <= self.T):
            raise ValueError(f"t={t} outside [1, {self.T}]")
        return float(self.alpha[t - 1]), float(self.sigma[t - 1])


def cosine_schedule(T: int = 200, s: float = 0.008) -> NoiseSchedule:
    steps = np.arange(1, T + 1, dtype=np.float64) / T
    f = np.cos((steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
    f0 = math.cos(s / (1.0 + s) * math.pi / 2.0) ** 2
    alpha_bar = np.clip(f / f0, 1e-5, 1.0 - 1e-7)
    return NoiseSchedule(T=T, alpha_bar=alpha_bar)


def add_noise(schedule: NoiseSchedule, x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """x_t = alpha_t * x0 + sigma_t * eps, exactly."""
    if eps.shape != x0.shape:
        raise ValueError("eps shape must match x0")
    if isinstance(t, int):
        a, s = schedule.coeffs(t)
        return a * x0 + s * eps
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any((t < 1) | (t > schedule.T)):
        raise ValueError("t outside [1, T]")
    a = torch.as_tensor(schedule.alpha, dtype=x0.dtype)[t - 1].view(-1, *([1] * (x0.dim() - 1)))
    s = torch.as_tensor(schedule.sigma, dtype=x0.dtype)[t - 1].view(-1, *([1] * (x0.dim() - 1)))
    return a * x0 + s * eps


# ---------------------------------------------------------------------------
# canonical attention


def _sorted_sum(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Order-canonical reduction: identical multisets give bitwise-identical
    sums regardless of input order."""
    return torch.sort(x, dim=dim).values.sum(dim=dim)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """softmax(Q K^T / sqrt(d)) V with key-permutation-invariant reductions.

    q: (..., n, d), k/v: (..., L, d). Returns (output (..., n, d_v),
    weights (..., n, L)).
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ValueError(f"query dim {d} != key dim {k.shape[-1]}")
    scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(d)
    m = scores.amax(dim=-1, keepdim=True)
    e = torch.exp(scores - m)
    denom = _sorted_sum(e, dim=-1).unsqueeze(-1)
    w = e / denom
    terms = w.unsqueeze(-1) * v.unsqueeze(-3)  # (..., n, L, d_v)
    out = _sorted_sum(terms, dim=-2)
    return out, w


def cross_attention(
    features: torch.Tensor,
    prompt_emb: torch.Tensor,
    wq: torch.Tensor,
    wk: torch.Tensor,
    wv: torch.Tensor,
) -> torch.Tensor:
    """Functional conditioning map: features (n, c) attend over the prompt
    sequence (L, d_p) through projections W_Q (d, c), W_K (d, d_p), W_V (d_v, d_p)."""
    q = features @ wq.T
    k = prompt_emb @ wk.T
    v = prompt_emb @ wv.T
    out, _ = attention(q, k, v)
    return out


class AttentionBlock(nn.Module):
    """Spatial cross-attention over the prompt sequence, with a residual
    output projection. LoRA adapters hook the four projections by name."""

    def __init__(self, channels: int, ctx_dim: int = PROMPT_DIM, attn_dim: int = PROMPT_DIM, name: str = ""):
        super().__init__()
        self.name = name
        self.wq = nn.Linear(channels, attn_dim, bias=False)
        self.wk = nn.Linear(ctx_dim, attn_dim, bias=False)
        self.wv = nn.Linear(ctx_dim, attn_dim, bias=False)
        self.wo = nn.Linear(attn_dim, channels, bias=False)
        self.norm = nn.GroupNorm(min(8, channels), channels)

    def _proj(self, layer: nn.Linear, x: torch.Tensor, proj_name: str, adapter) -> torch.Tensor:
        y = layer(x)
        if adapter is not None:
            key = f"{self.name}.{proj_name}"
            pair = adapter.layers.get(key)
            if pair is not None:
                a, b = pair
                y = y + adapter.gamma * ((x @ a.T) @ b.T)
        return y

    def forward(self, x: torch.Tensor, ctx: torch.Tensor, adapter=None) -> torch.Tensor:
        bsz, ch, h, w = x.shape
        seq = self.norm(x).permute(0, 2, 3, 1).reshape(bsz, h * w, ch)
        q = self._proj(self.wq, seq, "wq", adapter)
        k = self._proj(self.wk, ctx, "wk", adapter)
        v = self._proj(self.wv, ctx, "wv", adapter)
        out, _ = attention(q, k, v)
        out = self._proj(self.wo, out, "wo", adapter)
        return x + out.reshape(bsz, h, w, ch).permute(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# prompt encoder


class PromptEncoder(nn.Module):
    """Toy text encoder: token embeddings + learned positions + one
    self-attention layer. View tokens extend the vocabulary at runtime."""

    def __init__(self, dim: int = PROMPT_DIM, length: int = PROMPT_LEN):
        super().__init__()
        self.dim = dim
        self.length = length
        self.base_vocab = list(BASE_VOCAB)
        self.embed = nn.Embedding(len(self.base_vocab), dim)
        self.pos = nn.Parameter(torch.zeros(length, dim))
        self.norm = nn.LayerNorm(dim)
        self.attn_wq = nn.Linear(dim, dim, bias=False)
        self.attn_wk = nn.Linear(dim, dim, bias=False)
        self.attn_wv = nn.Linear(dim, dim, bias=False)
        self.attn_wo = nn.Linear(dim, dim, bias=False)
        self.extra_tokens: list[str] = []
        self.extra_embeddings = nn.ParameterDict()

    # vocabulary ------------------------------------------------------------
    def vocab_id(self, word: str) -> int:
        if word in self.base_vocab:
            return self.base_vocab.index(word)
        if word in self.extra_tokens:
            return len(self.base_vocab) + self.extra_tokens.index(word)
        raise KeyError(f"unknown token {word!r}")

    def add_token(self, token: str, init: torch.Tensor) -> int:
        if token in self.base_vocab or token in self.extra_tokens:
            raise ValueError(f"token {token!r} already registered")
        self.extra_tokens.append(token)
        self.extra_embeddings[token] = nn.Parameter(init.detach().clone())
        return len(self.base_vocab) + len(self.extra_tokens) - 1

    def mean_embedding(self) -> torch.Tensor:
        rows = [self.embed.weight]
        rows += [self.extra_embeddings[t].unsqueeze(0) for t in self.extra_tokens]
        return torch.cat(rows, dim=0).mean(dim=0)

    def tokenize(self, text: str) -> list[int]:
        words = text.lower().replace(",", " ").replace(".", " ").split()
        ids = [self.vocab_id(w) for w in words][: self.length]
        ids += [0] * (self.length - len(ids))
        return ids

    # encoding --------------------------------------------------------------
    def _table(self) -> torch.Tensor:
        rows = [self.embed.weight]
        rows += [self.extra_embeddings[t].unsqueeze(0) for t in self.extra_tokens]
        return torch.cat(rows, dim=0)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        """Positional table lookup before contextualization (B, L, dim)."""
        return self._table()[ids] + self.pos

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """ids (B, L) -> embeddings (B, L, dim)."""
        x = self.embed_tokens(ids)
        h = self.norm(x)
        q = self.attn_wq(h)
        k = self.attn_wk(h)
        v = self.attn_wv(h)
        out, _ = attention(q, k, v)
        return x + self.attn_wo(out)

    def encode(self, text: str) -> "PromptEmbedding":
        ids = torch.tensor([self.tokenize(text)], dtype=torch.long)
        vectors = self.forward(ids)[0]
        return PromptEmbedding(text=text, token_ids=ids[0].tolist(), vectors=vectors)


@dataclass
class PromptEmbedding:
    text: str
    token_ids: list[int]
    vectors: torch.Tensor  # (L, dim)


# ---------------------------------------------------------------------------
# autoencoder


class AutoEncoder(nn.Module):
    """Plain conv autoencoder: (H, W, 3) <-> (H/4, W/4, 4)."""

    def __init__(self, width: int = 48):
        super().__init__()
        self.width = width
        self.enc = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width * 2, LATENT_CHANNELS, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(LATENT_CHANNELS, width * 2, 3, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(width * 2, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.enc(images)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return self.dec(latents)


# ---------------------------------------------------------------------------
# UNet denoiser


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype) / (half - 1))
    angles = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, ch_in), ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, ch_out)
        self.norm2 = nn.GroupNorm(min(8, ch_out), ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return self.skip(x) + h


ENCODER_KEYS = ["in_conv", "enc_res1", "down", "enc_res2", "enc_attn", "mid_res1", "mid_attn", "mid_res2"]


def build_encoder_stack(base: int, mid: int, temb_dim: int, name_prefix: str) -> nn.ModuleDict:
    return nn.ModuleDict(
        {
            "in_conv": nn.Conv2d(LATENT_CHANNELS, base, 3, padding=1),
            "enc_res1": ResBlock(base, base, temb_dim),
            "down": nn.Conv2d(base, base, 3, stride=2, padding=1),
            "enc_res2": ResBlock(base, mid, temb_dim),
            "enc_attn": AttentionBlock(mid, name=f"{name_prefix}enc_attn"),
            "mid_res1": ResBlock(mid, mid, temb_dim),
            "mid_attn": AttentionBlock(mid, name=f"{name_prefix}mid_attn"),
            "mid_res2": ResBlock(mid, mid, temb_dim),
        }
    )


def run_encoder_stack(
    mods: nn.ModuleDict,
    x: torch.Tensor,
    temb: torch.Tensor,
    ctx: torch.Tensor,
    adapter=None,
    stem: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Shared encoder forward; returns the skip features (h1, h2, mid)."""
    h = mods["in_conv"](x if stem is None else x + stem)
    h1 = mods["enc_res1"](h, temb)
    h = mods["down"](h1)
    h = mods["enc_res2"](h, temb)
    h2 = mods["enc_attn"](h, ctx, adapter)
    m = mods["mid_res1"](h2, temb)
    m = mods["mid_attn"](m, ctx, adapter)
    m = mods["mid_res2"](m, temb)
    return h1, h2, m


class UNet(nn.Module):
    """Noise predictor with residual blocks at two resolutions, sinusoidal
    time embedding and prompt cross-attention."""

    def __init__(self, base: int = 32, mid: int = 64, temb_dim: int = 64):
        super().__init__()
        self.base = base
        self.mid = mid
        self.temb_dim = temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(temb_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.encoder = build_encoder_stack(base, mid, temb_dim, "")
        self.dec_res1 = ResBlock(mid, mid, temb_dim)
        self.dec_res2 = ResBlock(mid, mid, temb_dim)
        self.up = nn.ConvTranspose2d(mid, base, 4, stride=2, padding=1)
        self.dec_res3 = ResBlock(base, base, temb_dim)
        self.out_norm = nn.GroupNorm(min(8, base), base)
        self.out_conv = nn.Conv2d(base, LATENT_CHANNELS, 3, padding=1)
        self.act = nn.SiLU()

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(sinusoidal_embedding(t.to(self.out_conv.weight.dtype), self.temb_dim))

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        ctx: torch.Tensor,
        injections: tuple | None = None,
        adapter=None,
    ) -> torch.Tensor:
        temb = self.time_embedding(t)
        h1, h2, m = run_encoder_stack(self.encoder, x, temb, ctx, adapter)
        if injections is not None:
            z1, z2, zm = injections
            h1 = h1 + z1
            h2 = h2 + z2
            m = m + zm
        d = self.dec_res1(m, temb)
        d = d + h2
        d = self.dec_res2(d, temb)
        d = self.up(d)
        d = d + h1
        d = self.dec_res3(d, temb)
        return self.out_conv(self.act(self.out_norm(d)))


# ---------------------------------------------------------------------------
# parameter init


def init_params(module: nn.Module, gen: torch.Generator) -> None:
    """He fan-in normal for conv/linear weights, zero biases, N(0, 0.02) for
    embeddings and positions."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight[0, 0].numel() if m.weight.dim() > 2 else 1)
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.Embedding):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=gen)
    for name, p in module.named_parameters(recurse=True):
        if name.endswith("pos"):
            with torch.no_grad():
                p.normal_(0.0, 0.02, generator=gen)


# ---------------------------------------------------------------------------
# bundle


@dataclass
class DenoiserBundle:
    ae: AutoEncoder
    unet: UNet
    prompt_encoder: PromptEncoder
    schedule: NoiseSchedule
    latent_scale: float = 1.0
    ae_trained: bool = False
    denoiser_trained: bool = False
    adapters: dict = field(default_factory=dict)  # camera_name -> LoraAdapter
    view_tokens: dict = field(default_factory=dict)  # camera_name -> token str
    active_view: str | None = None

    @classmethod
    def create(cls, seed: int = 0, T: int = 200, base: int = 32, mid: int = 64, ae_width: int = 48) -> "DenoiserBundle":
        gen = torch.Generator().manual_seed(seed)
        ae = AutoEncoder(width=ae_width)
        unet = UNet(base=base, mid=mid)
        pe = PromptEncoder()
        for m in (ae, unet, pe):
            init_params(m, gen)
        return cls(ae=ae, unet=unet, prompt_encoder=pe, schedule=cosine_schedule(T))

    # prompt helpers --------------------------------------------------------
    def encode_prompts(self, texts: list[str]) -> torch.Tensor:
        ids = torch.tensor([self.prompt_encoder.tokenize(t) for t in texts], dtype=torch.long)
        return self.prompt_encoder(ids)

    def null_ctx(self, batch: int) -> torch.Tensor:
        ids = torch.zeros((batch, self.prompt_encoder.length), dtype=torch.long)
        return self.prompt_encoder(ids)

    # tensor dicts ----------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        """Base parameters only: view-token embeddings belong to adapters, so
        registering or training a token never changes the base checkpoint."""
        out: dict[str, np.ndarray] = {}
        for prefix, mod in (("ae", self.ae), ("unet", self.unet), ("prompt", self.prompt_encoder)):
            for name, p in mod.state_dict().items():
                if name.startswith("extra_embeddings."):
                    continue
                out[f"{prefix}.{name}"] = p.detach().cpu().numpy()
        return out

    def content_hash(self) -> str:
        return tensorio.hash_arrays(self.state_arrays())

    def save(self, directory: str | Path, extra: dict | None = None) -> Path:
        manifest = {
            "kind": "denoiser_bundle",
            "T": self.schedule.T,
            "alpha_bar": [float(x) for x in self.schedule.alpha_bar],
            "latent_scale": self.latent_scale,
            "ae_width": self.ae.width,
            "unet_base": self.unet.base,
            "unet_mid": self.unet.mid,
            "ae_trained": self.ae_trained,
            "denoiser_trained": self.denoiser_trained,
        }
        manifest.update(extra or {})
        return tensorio.save_checkpoint(directory, self.state_arrays(), manifest)

    @classmethod
    def load(cls, directory: str | Path) -> "DenoiserBundle":
        tensors, manifest = tensorio.load_checkpoint(directory)
        bundle = cls(
            ae=AutoEncoder(width=manifest["ae_width"]),
            unet=UNet(base=manifest["unet_base"], mid=manifest["unet_mid"]),
            prompt_encoder=PromptEncoder(),
            schedule=NoiseSchedule(T=manifest["T"], alpha_bar=np.asarray(manifest["alpha_bar"])),
            latent_scale=manifest["latent_scale"],
            ae_trained=manifest["ae_trained"],
            denoiser_trained=manifest["denoiser_trained"],
        )
        for prefix, mod in (("ae", bundle.ae), ("unet", bundle.unet), ("prompt", bundle.prompt_encoder)):
            state = {
                name[len(prefix) + 1 :]: torch.from_numpy(arr)
                for name, arr in tensors.items()
                if name.startswith(prefix + ".")
            }
            mod.load_state_dict(state)
        return bundle


# ---------------------------------------------------------------------------
# image <-> latent


def encode_image(bundle: DenoiserBundle, image: np.ndarray) -> np.ndarray:
    """Image (H, W, 3) in [0, 1] -> raw latent (H/4, W/4, 4)."""
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))[None]
    with torch.no_grad():
        z = bundle.ae.encode(x)
    return z[0].permute(1, 2, 0).numpy()


def decode_latent(bundle: DenoiserBundle, latent: np.ndarray) -> np.ndarray:
    z = torch.from_numpy(np.ascontiguousarray(latent.transpose(2, 0, 1), dtype=np.float32))[None]
    with torch.no_grad():
        x = bundle.ae.decode(z)
    return np.clip(x[0].permute(1, 2, 0).numpy(), 0.0, 1.0)


def encode_batch(bundle: DenoiserBundle, images: np.ndarray, batch: int = 64) -> torch.Tensor:
    """(N, H, W, 3) -> raw latents (N, 4, h, w), no grad."""
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.from_numpy(np.ascontiguousarray(images[i : i + batch].transpose(0, 3, 1, 2), dtype=np.float32))
            outs.append(bundle.ae.encode(x))
    return torch.cat(outs, dim=0)


# ---------------------------------------------------------------------------
# losses


class TrainingDiverged(RuntimeError):
    pass


def denoiser_loss(
    bundle: DenoiserBundle,
    x0: torch.Tensor,
    ctx: torch.Tensor,
    gen: torch.Generator,
    predictor=None,
) -> torch.Tensor:
    """Eq-style denoising objective: mean squared error between the drawn
    noise and the model prediction at a uniformly drawn timestep."""
    bsz = x0.shape[0]
    t = torch.randint(1, bundle.schedule.T + 1, (bsz,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    x_t = add_noise(bundle.schedule, x0, t, eps)
    pred = (predictor or bundle.unet)(x_t, t, ctx)
    return torch.mean((eps - pred) ** 2)


def train_autoencoder(images: np.ndarray, config: dict | None = None) -> tuple[AutoEncoder, float, list[float]]:
    """L2 reconstruction training; returns (model, latent scale, epoch losses)."""
    cfg = {"epochs": 6, "batch": 32, "lr": 2e-3, "seed": 0, "width": 48}
    cfg.update(config or {})
    gen = torch.Generator().manual_seed(cfg["seed"])
    ae = AutoEncoder(width=cfg["width"])
    init_params(ae, gen)
    opt = torch.optim.Adam(ae.parameters(), lr=cfg["lr"])
    data = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32))
    order_rng = np.random.default_rng(cfg["seed"])
    losses = []
    step = 0
    for _epoch in range(cfg["epochs"]):
        perm = order_rng.permutation(len(data))
        epoch_losses = []
        for i in range(0, len(perm), cfg["batch"]):
            batch = data[perm[i : i + cfg["batch"]]]
            recon = ae.decode(ae.encode(batch))
            loss = torch.mean((recon - batch) ** 2)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"autoencoder loss non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
            step += 1
        losses.append(float(np.mean(epoch_losses)))
    with torch.no_grad():
        zs = torch.cat([ae.encode(data[i : i + 64]) for i in range(0, len(data), 64)])
        scale = float(1.0 / zs.std().item())
    return ae, scale, losses


def train_denoiser(
    bundle: DenoiserBundle,
    latents: torch.Tensor,
    prompts: list[str],
    config: dict | None = None,
    resume_state: dict | None = None,
) -> tuple[list[float], dict]:
    """Trains UNet + prompt encoder on normalized latents with 10% prompt
    dropout (classifier-free guidance support). Mutates the bundle.

    Returns (per-step losses, train state). Passing a previously returned
    state resumes mid-run and reproduces the uninterrupted trajectory
    exactly (optimizer and RNG states round-trip).
    """
    if not bundle.ae_trained:
        raise RuntimeError("autoencoder must be trained before the denoiser")
    cfg = {"steps": 3000, "batch": 32, "lr": 1e-3, "seed": 0, "dropout": 0.1}
    cfg.update(config or {})
    gen = torch.Generator()
    order_rng = np.random.default_rng(cfg["seed"])
    ids_all = torch.tensor([bundle.prompt_encoder.tokenize(p) for p in prompts], dtype=torch.long)
    null_ids = torch.zeros(bundle.prompt_encoder.length, dtype=torch.long)
    params = list(bundle.unet.parameters()) + list(bundle.prompt_encoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg["lr"])
    if resume_state is None:
        gen.manual_seed(cfg["seed"])
        start = 0
    else:
        gen.set_state(resume_state["torch_gen"])
        order_rng.bit_generator.state = resume_state["np_rng"]
        opt.load_state_dict(resume_state["optimizer"])
        start = resume_state["step"]
    losses = []
    for step in range(start, cfg["steps"]):
        idx = order_rng.integers(0, len(latents), size=cfg["batch"])
        x0 = latents[idx]
        ids = ids_all[idx].clone()
        drop = torch.rand(len(idx), generator=gen) < cfg["dropout"]
        ids[drop] = null_ids
        ctx = bundle.prompt_encoder(ids)
        loss = denoiser_loss(bundle, x0, ctx, gen)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"denoiser loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    bundle.denoiser_trained = True
    state = {
        "step": cfg["steps"],
        "torch_gen": gen.get_state(),
        "np_rng": order_rng.bit_generator.state,
        "optimizer": opt.state_dict(),
    }
    return losses, state


# ---------------------------------------------------------------------------
# sampling


def sample_timesteps(T: int, steps: int) -> list[int]:
    ts = np.unique(np.linspace(T, 1, num=min(steps, T)).round().astype(int))[::-1]
    return [int(t) for t in ts]


def sample(
    bundle: DenoiserBundle,
    prompt: str,
    guidance: float = 3.0,
    steps: int = 30,
    seed: int = 0,
    mode: str = "deterministic",
    condition=None,
    control=None,
    adapter=None,
    latent_hw: tuple[int, int] = (8, 16),
    x0_clip: float = 4.0,
    return_latent: bool = False,
):
    """Iterative denoising from pure noise; deterministic mode is DDIM-style
    (no per-step noise), ancestral draws posterior noise each step.

    Classifier-free guidance: eps_hat = eps_uncond + g*(eps_cond - eps_uncond);
    g = 0 never evaluates the prompt branch. A control branch (with its
    conditioning view) and a per-view adapter apply to both branches.
    """
    if not (bundle.ae_trained and bundle.denoiser_trained):
        raise RuntimeError("bundle is untrained; train autoencoder and denoiser first")
    if mode not in ("deterministic", "ancestral"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if adapter is None and bundle.active_view is not None:
        adapter = bundle.adapters[bundle.active_view]
    sched = bundle.schedule
    gen = torch.Generator().manual_seed(seed)
    h, w = latent_hw
    x = torch.randn((1, LATENT_CHANNELS, h, w), generator=gen)
    ctx = bundle.encode_prompts([prompt]) if guidance != 0.0 else None
    nctx = bundle.null_ctx(1)

    cond_feats = None
    if control is not None:
        if condition is None:
            raise ValueError("control branch requires a conditioning view")
        cond_feats = control.condition_tensor(condition)

    def predict(x_t: torch.Tensor, t: int, context: torch.Tensor) -> torch.Tensor:
        tt = torch.full((x_t.shape[0],), float(t))
        if control is not None:
            return control.predict(bundle, x_t, tt, context, cond_feats, adapter=adapter)
        return bundle.unet(x_t, tt, context, adapter=adapter)

    timesteps = sample_timesteps(sched.T, steps)
    with torch.no_grad():
        for i, t in enumerate(timesteps):
            a_t, s_t = sched.coeffs(t)
            eps_u = predict(x, t, nctx)
            if guidance != 0.0:
                eps_c = predict(x, t, ctx)
                eps_hat = eps_u + guidance * (eps_c - eps_u)
            else:
                eps_hat = eps_u
            x0_hat = (x - s_t * eps_hat) / a_t
            x0_hat = torch.clamp(x0_hat, -x0_clip, x0_clip)
            if i + 1 == len(timesteps):
                x = x0_hat
                break
            t_prev = timesteps[i + 1]
            a_p, s_p = sched.coeffs(t_prev)
            if mode == "deterministic":
                x = a_p * x0_hat + s_p * eps_hat
            else:
                ab_t = a_t * a_t
                ab_p = a_p * a_p
                var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)
                var = max(var, 0.0)
                noise_coeff = math.sqrt(max(s_p * s_p - var, 0.0))
                x = a_p * x0_hat + noise_coeff * eps_hat + math.sqrt(var) * torch.randn(
                    x.shape, generator=gen
                )
        z = x / bundle.latent_scale
        image = bundle.ae.decode(z)
    img = np.clip(image[0].permute(1, 2, 0).numpy(), 0.0, 1.0)
    if return_latent:
        return img, x[0].permute(1, 2, 0).numpy()
    return img


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)
