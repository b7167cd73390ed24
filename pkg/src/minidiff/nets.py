"""Miniature trainable networks standing in for the big text-to-image stack.

A GeneratorModel bundles a tiny auto-encoder (or an identity pixel-space
fallback), a toy-vocabulary tokenizer, a 1-2 block self-attention text
encoder, a conv denoiser with one spatial attention block, and a learned null
conditioning vector for the unconditional branch. Every attention dense
sub-weight is reachable by a stable name so adapters can target it.

Images are single-channel arrays in [0, 1]; latents are (B, c, h, w) torch
tensors. All randomness comes from explicit seeds or numpy Generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import UnknownTokenError
from .schedule import NoiseSchedule

VOCABULARY = (
    "a", "photo", "of", "the", "defect", "patches", "scratch", "pit",
    "patch", "scale", "surface", "steel", "metal", "image", "sample",
    "texture", "bright", "dark", "line", "blob", "band", "spot", "mark",
    "crack", "noise", "grain", "rough", "smooth", "edge", "region", "plate",
)
PLACEHOLDER = "<unknown>"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    latent_mode: str = "autoencoder"   # or "identity"
    spatial_factor: int = 2            # 1, 2, or 4
    latent_channels: int = 2
    ae_width: int = 16
    denoiser_width: int = 32
    denoiser_blocks: int = 3           # res blocks total (attention sits mid-chain)
    embed_dim: int = 16                # token / text embedding dimension C
    text_blocks: int = 1
    text_mlp_hidden: int = 32
    max_prompt_len: int = 8
    time_embed_dim: int = 32
    use_positional: bool = True
    placeholder_width: int = 1
    timesteps: int = 1000              # T the denoiser is conditioned over
    vocab_seed: int = 0

    def __post_init__(self):
        if self.latent_mode not in ("autoencoder", "identity"):
            raise ValueError(f"unknown latent_mode {self.latent_mode!r}")
        if self.spatial_factor not in (1, 2, 4):
            raise ValueError("spatial_factor must be 1, 2, or 4")
        if self.latent_mode == "identity" and self.spatial_factor != 1:
            raise ValueError("identity mode requires spatial_factor=1")
        if self.placeholder_width < 1:
            raise ValueError("placeholder_width must be >= 1")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        if self.denoiser_width % 4 != 0:
            raise ValueError("denoiser_width must be divisible by 4 (group norm)")


@dataclass
class PromptEmbedding:
    """Token-embedding sequence with a marked trainable slice."""

    tokens: torch.Tensor               # (L, C)
    trainable_slice: slice
    words: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        L = self.tokens.shape[0]
        a, b = self.trainable_slice.start or 0, self.trainable_slice.stop
        b = L if b is None else b
        if not (0 <= a <= b <= L):
            raise ValueError(f"trainable slice [{a}, {b}) outside sequence of length {L}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("token embeddings must be finite")

    @property
    def trainable_width(self) -> int:
        a = self.trainable_slice.start or 0
        b = self.trainable_slice.stop
        return (self.tokens.shape[0] if b is None else b) - a


class Vocabulary:
    """Fixed toy vocabulary with a deterministic random embedding table."""

    def __init__(self, embed_dim: int, placeholder_width: int = 1, seed: int = 0):
        self.placeholder_width = placeholder_width
        extra = [PLACEHOLDER] + [f"{PLACEHOLDER}#{i}" for i in range(1, placeholder_width)]
        self.words = list(VOCABULARY) + extra
        self.index = {w: i for i, w in enumerate(self.words)}
        gen = torch.Generator().manual_seed(seed)
        self.table = torch.randn(len(self.words), embed_dim, generator=gen) * 0.1

    def placeholder_ids(self) -> list[int]:
        return [self.index[PLACEHOLDER]] + [
            self.index[f"{PLACEHOLDER}#{i}"] for i in range(1, self.placeholder_width)]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class SelfAttention(nn.Module):
    """Single-head self-attention with individually named dense layers."""

    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.scale = dim ** -0.5

    def forward(self, x):                          # (B, L, dim)
        attn = torch.softmax(self.q(x) @ self.k(x).transpose(-1, -2) * self.scale, dim=-1)
        return self.out(attn @ self.v(x))


class TextBlock(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.ln2 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.SiLU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TextEncoder(nn.Module):
    """Maps a token-embedding sequence to one pooled text embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.use_positional = cfg.use_positional
        self.pos = nn.Parameter(torch.zeros(cfg.max_prompt_len, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            TextBlock(cfg.embed_dim, cfg.text_mlp_hidden) for _ in range(cfg.text_blocks))
        self.ln_f = nn.LayerNorm(cfg.embed_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:   # (L, C) or (B, L, C)
        squeeze = tokens.dim() == 2
        x = tokens[None] if squeeze else tokens
        if self.use_positional:
            x = x + self.pos[: x.shape[-2]]
        for block in self.blocks:
            x = block(x)
        pooled = self.ln_f(x).mean(dim=-2)
        return pooled[0] if squeeze else pooled


class IdentityAutoEncoder(nn.Module):
    """Pixel-space fallback: encode/decode are the identity map."""

    factor = 1
    channels = 1

    def forward(self, x):
        return x

    def encode(self, x):                            # (B, H, W) -> (B, 1, H, W)
        return x[:, None]

    def decode(self, z):
        return torch.clamp(z[:, 0], 0.0, 1.0)


class ConvAutoEncoder(nn.Module):
    """Tiny strided conv auto-encoder with a calibrated latent scale."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.factor = cfg.spatial_factor
        self.channels = cfg.latent_channels
        w = cfg.ae_width
        n_down = int(math.log2(cfg.spatial_factor))
        enc: list[nn.Module] = [nn.Conv2d(1, w, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            enc += [nn.Conv2d(w, w, 4, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(w, cfg.latent_channels, 3, padding=1)]
        self.enc = nn.Sequential(*enc)
        dec: list[nn.Module] = [nn.Conv2d(cfg.latent_channels, w, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            dec += [nn.ConvTranspose2d(w, w, 4, stride=2, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(w, 1, 3, padding=1)]
        self.dec = nn.Sequential(*dec)
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, x):                            # (B, H, W) -> (B, c, h, w)
        return self.enc(x[:, None]) / self.latent_scale

    def decode(self, z):
        return torch.clamp(torch.sigmoid(self.dec(z * self.latent_scale))[:, 0], 0.0, 1.0)


class SpatialAttention(nn.Module):
    """Single-head attention over flattened spatial positions."""

    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.GroupNorm(4, width)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        self.scale = width ** -0.5

    def forward(self, h):                           # (B, w, H, W)
        B, C, H, W = h.shape
        x = self.norm(h).reshape(B, C, H * W).transpose(1, 2)
        attn = torch.softmax(self.q(x) @ self.k(x).transpose(-1, -2) * self.scale, dim=-1)
        y = self.out(attn @ self.v(x)).transpose(1, 2).reshape(B, C, H, W)
        return h + y


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.n1 = nn.GroupNorm(4, width)
        self.n2 = nn.GroupNorm(4, width)
        self.c1 = nn.Conv2d(width, width, 3, padding=1)
        self.c2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, h, emb):                      # emb: (B, width)
        r = h
        h = self.c1(F.silu(self.n1(h))) + emb[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return h + r


class Denoiser(nn.Module):
    """Conv noise-prediction network conditioned on timestep and text embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.denoiser_width
        c = cfg.latent_channels if cfg.latent_mode == "autoencoder" else 1
        self.time_dim = cfg.time_embed_dim
        self.conv_in = nn.Conv2d(c, w, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_embed_dim, w), nn.SiLU(),
                                      nn.Linear(w, w))
        self.cond_proj = nn.Linear(cfg.embed_dim, w)
        n_pre = max(1, cfg.denoiser_blocks - 1)
        self.pre_blocks = nn.ModuleList(ResBlock(w) for _ in range(n_pre))
        self.attns = nn.ModuleList([SpatialAttention(w)])
        self.post_blocks = nn.ModuleList([ResBlock(w)])
        self.conv_out = nn.Conv2d(w, c, 3, padding=1)

    def forward(self, z, t: torch.Tensor, cond: torch.Tensor):
        temb = timestep_embedding(t, self.time_dim).to(z.dtype)
        emb = self.time_mlp(temb) + self.cond_proj(cond)
        h = self.conv_in(z)
        for block in self.pre_blocks:
            h = block(h, emb)
        for attn in self.attns:
            h = attn(h)
        for block in self.post_blocks:
            h = block(h, emb)
        return self.conv_out(h)


class GeneratorModel(nn.Module):
    """The full desk-scale generator: auto-encoder + tokenizer + text encoder
    + denoiser + learned null conditioning."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or ModelConfig()
        self.vocab = Vocabulary(self.config.embed_dim,
                                self.config.placeholder_width,
                                seed=self.config.vocab_seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            if self.config.latent_mode == "identity":
                self.autoencoder = IdentityAutoEncoder()
            else:
                self.autoencoder = ConvAutoEncoder(self.config)
            self.text_encoder = TextEncoder(self.config)
            self.denoiser = Denoiser(self.config)
            self.null_cond = nn.Parameter(torch.randn(self.config.embed_dim) * 0.1)
        self.register_buffer("embedding_table", self.vocab.table.clone())
        self.lora_adapter = None

    # -- conversions ------------------------------------------------------

    def _to_tensor(self, x) -> torch.Tensor:
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(x))
        dtype = next(self.denoiser.parameters()).dtype
        return x.to(dtype)

    def _as_image_batch(self, x) -> tuple[torch.Tensor, bool]:
        x = self._to_tensor(x)
        if x.dim() == 2:
            return x[None], True
        if x.dim() == 3:
            return x, False
        raise ValueError(f"expected (H, W) or (B, H, W) images, got shape {tuple(x.shape)}")

    # -- auto-encoder -----------------------------------------------------

    def encode(self, x) -> torch.Tensor:
        batch, squeeze = self._as_image_batch(x)
        size = self.config.image_size
        if batch.shape[-2:] != (size, size):
            raise ValueError(
                f"expected {size}x{size} images, got {tuple(batch.shape[-2:])}")
        z = self.autoencoder.encode(batch)
        return z[0] if squeeze else z

    def decode(self, z) -> torch.Tensor:
        z = self._to_tensor(z)
        squeeze = z.dim() == 3
        x = self.autoencoder.decode(z[None] if squeeze else z)
        return x[0] if squeeze else x

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        f = self.config.spatial_factor
        c = self.autoencoder.channels
        return (c, self.config.image_size // f, self.config.image_size // f)

    # -- text pathway -----------------------------------------------------

    def tokenize(self, prompt: str, trainable_word: str | None = None) -> PromptEmbedding:
        """Look up token embeddings for a prompt.

        Occurrences of the placeholder populate the trainable slice; pass
        trainable_word to mark an ordinary vocabulary word instead.
        """
        raw = prompt.split()
        words: list[str] = []
        ids: list[int] = []
        for w in raw:
            w = w if w == PLACEHOLDER else w.lower()
            if w == PLACEHOLDER:
                for pid in self.vocab.placeholder_ids():
                    words.append(self.vocab.words[pid])
                    ids.append(pid)
                continue
            if w not in self.vocab.index:
                raise UnknownTokenError(f"word {w!r} not in vocabulary")
            words.append(w)
            ids.append(self.vocab.index[w])
        if not ids:
            raise ValueError("empty prompt")
        if len(ids) > self.config.max_prompt_len:
            raise ValueError(
                f"prompt has {len(ids)} tokens, limit {self.config.max_prompt_len}")
        target = PLACEHOLDER if trainable_word is None else trainable_word.lower()
        if target == PLACEHOLDER:
            marked = [i for i, w in enumerate(words) if w.startswith(PLACEHOLDER)]
        else:
            marked = [i for i, w in enumerate(words) if w == target]
        if marked:
            if marked != list(range(marked[0], marked[-1] + 1)):
                raise ValueError("trainable word occurrences must be contiguous")
            sl = slice(marked[0], marked[-1] + 1)
        else:
            if trainable_word is not None:
                raise ValueError(f"trainable word {trainable_word!r} not in prompt")
            sl = slice(0, 0)
        tokens = self.embedding_table[torch.tensor(ids)].clone()
        return PromptEmbedding(tokens=tokens, trainable_slice=sl, words=tuple(words))

    def token_ids(self, v: PromptEmbedding) -> list[int]:
        return [self.vocab.index[w] for w in v.words]

    def write_back_embedding(self, v: PromptEmbedding) -> None:
        """Persist a trained trainable slice into the embedding table rows."""
        ids = self.token_ids(v)
        sl = v.trainable_slice
        with torch.no_grad():
            for pos in range(sl.start, sl.stop):
                self.embedding_table[ids[pos]] = v.tokens[pos].detach()

    def encode_text(self, v: PromptEmbedding | torch.Tensor) -> torch.Tensor:
        tokens = v.tokens if isinstance(v, PromptEmbedding) else v
        return self.text_encoder(tokens)

    # -- denoiser ---------------------------------------------------------

    def predict_noise(self, z_t, t, cond: torch.Tensor | None = None) -> torch.Tensor:
        z_t = self._to_tensor(z_t)
        squeeze = z_t.dim() == 3
        z = z_t[None] if squeeze else z_t
        B = z.shape[0]
        t_arr = torch.as_tensor(t).reshape(-1)
        if t_arr.numel() == 1:
            t_arr = t_arr.expand(B)
        if t_arr.min() < 1 or t_arr.max() > self.config.timesteps:
            raise ValueError(
                f"timestep outside [1, {self.config.timesteps}]: {t}")
        if cond is None:
            cond_b = self.null_cond[None].expand(B, -1)
        else:
            cond_b = cond[None].expand(B, -1) if cond.dim() == 1 else cond
        out = self.denoiser(z, t_arr, cond_b)
        return out[0] if squeeze else out

    # -- bookkeeping ------------------------------------------------------

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def attention_dense_layers(self) -> dict[str, nn.Module]:
        """Stable name -> dense layer map for every attention sub-weight."""
        return {name: getattr(parent, attr)
                for name, (parent, attr) in self._attention_slots().items()}

    def _attention_slots(self) -> dict[str, tuple[nn.Module, str]]:
        slots: dict[str, tuple[nn.Module, str]] = {}
        for bi, block in enumerate(self.text_encoder.blocks):
            for nm in ("q", "k", "v", "out"):
                slots[f"text.block{bi}.attn.{nm}"] = (block.attn, nm)
        for ai, attn in enumerate(self.denoiser.attns):
            for nm in ("q", "k", "v", "out"):
                slots[f"denoiser.attn{ai}.{nm}"] = (attn, nm)
        return slots

    def parameter_fingerprint(self, include_buffers: bool = True) -> str:
        """Hash of all parameters (and, by default, buffers such as the token
        embedding table) for isolation checks."""
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        if include_buffers:
            for name, b in sorted(self.named_buffers()):
                h.update(name.encode())
                h.update(b.detach().cpu().numpy().tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Training objective

def _gather_coeffs(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coeff = torch.from_numpy(values[t.numpy()]).to(like.dtype)
    return coeff.reshape(-1, *([1] * (like.dim() - 1)))


def diffusion_loss(model: GeneratorModel, batch, v: PromptEmbedding | None,
                   sched: NoiseSchedule, rng: np.random.Generator | None = None,
                   null_cond_prob: float = 0.0,
                   frozen_t: np.ndarray | None = None,
                   frozen_eps: np.ndarray | None = None) -> torch.Tensor:
    """Noise-prediction objective: mean over the batch of the summed squared
    error between predicted and drawn noise, with t uniform in {1..T}.

    Gradients flow to whatever is trainable among the prompt slice, the
    network parameters, and any attached adapter. Pass frozen_t/frozen_eps to
    pin the randomness (gradient checks); otherwise both come from rng.
    """
    images, _ = model._as_image_batch(batch)
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    B = images.shape[0]
    with torch.no_grad():
        z0 = model.encode(images)
    if frozen_t is not None:
        t = torch.as_tensor(np.asarray(frozen_t), dtype=torch.long)
    else:
        if rng is None:
            raise ValueError("need rng when randomness is not frozen")
        t = torch.from_numpy(rng.integers(1, sched.T + 1, size=B))
    if frozen_eps is not None:
        eps = torch.as_tensor(np.asarray(frozen_eps)).to(z0.dtype)
    else:
        eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape))).to(z0.dtype)
    z_t = _gather_coeffs(sched.alphas, t, z0) * z0 + _gather_coeffs(sched.sigmas, t, z0) * eps
    use_null = v is None or (
        null_cond_prob > 0.0 and rng is not None and rng.random() < null_cond_prob)
    cond = None if use_null else model.encode_text(v)
    eps_hat = model.predict_noise(z_t, t, cond)
    return ((eps_hat - eps) ** 2).flatten(1).sum(dim=1).mean()


def probe_loss(model: GeneratorModel, images, v: PromptEmbedding | None,
               sched: NoiseSchedule, seed: int = 0, batch_size: int = 16) -> float:
    """Deterministic diffusion loss on a fixed probe batch with pinned (t, eps)."""
    images = np.asarray(images)[:batch_size]
    rng = np.random.default_rng(seed)
    t = rng.integers(1, sched.T + 1, size=images.shape[0])
    c, h, w = model.latent_shape
    eps = rng.standard_normal((images.shape[0], c, h, w))
    with torch.no_grad():
        loss = diffusion_loss(model, images, v, sched, frozen_t=t, frozen_eps=eps)
    return float(loss)


# ---------------------------------------------------------------------------
# Base-model pretraining

def pretrain_autoencoder(model: GeneratorModel, images: np.ndarray,
                         iterations: int = 600, batch_size: int = 16,
                         lr: float = 2e-3, seed: int = 0) -> list[float]:
    """Train the tiny auto-encoder on reconstruction MSE, then calibrate the
    latent scale so encoded latents have roughly unit standard deviation."""
    if isinstance(model.autoencoder, IdentityAutoEncoder):
        return []
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.autoencoder.parameters(), lr=lr)
    history = []
    for _ in range(iterations):
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        x = model._to_tensor(images[idx])
        recon = model.autoencoder.decode(model.autoencoder.encode(x))
        loss = F.mse_loss(recon, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    with torch.no_grad():
        raw = model.autoencoder.enc(model._to_tensor(images)[:, None])
        model.autoencoder.latent_scale.fill_(float(raw.std()))
    return history


def reconstruction_mse(model: GeneratorModel, images: np.ndarray) -> float:
    with torch.no_grad():
        x = model._to_tensor(images)
        recon = model.decode(model.encode(x))
        return float(F.mse_loss(recon, x))


def pretrain_generator(model: GeneratorModel, images: np.ndarray, labels: np.ndarray,
                       class_prompts: list[str], sched: NoiseSchedule,
                       iterations: int = 3000, batch_size: int = 8,
                       lr: float = 2e-3, null_cond_prob: float = 0.1,
                       seed: int = 0) -> list[float]:
    """Train denoiser + text encoder + null conditioning on the corpus with
    per-class prompts, dropping to the null embedding on 10% of batches."""
    rng = np.random.default_rng(seed)
    embeddings = [model.tokenize(p) for p in class_prompts]
    params = (list(model.denoiser.parameters())
              + list(model.text_encoder.parameters()) + [model.null_cond])
    opt = torch.optim.Adam(params, lr=lr)
    history = []
    for _ in range(iterations):
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        x = model._to_tensor(images[idx])
        with torch.no_grad():
            z0 = model.encode(x)
        t = torch.from_numpy(rng.integers(1, sched.T + 1, size=len(idx)))
        eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape))).to(z0.dtype)
        z_t = (_gather_coeffs(sched.alphas, t, z0) * z0
               + _gather_coeffs(sched.sigmas, t, z0) * eps)
        if rng.random() < null_cond_prob:
            cond = None
        else:
            pooled = torch.stack([model.encode_text(e) for e in embeddings])
            cond = pooled[torch.from_numpy(labels[idx])]
        eps_hat = model.predict_noise(z_t, t, cond)
        loss = ((eps_hat - eps) ** 2).flatten(1).sum(dim=1).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return history
