"""Data generation: classifier-free-guided reverse diffusion, from pure noise
or from a partially noised real image (image-oriented generation).

Every operation is a pure function of (inputs, seed). Per-sample seeds in
batch generation derive from the root seed through numpy's splittable
SeedSequence, so a 1,000-image batch is reproducible sample by sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import ManifestEntry, save_image
from .nets import GeneratorModel, PromptEmbedding
from .schedule import NoiseSchedule, ddim_step, diffuse, strength_to_timestep

GENERATION_MODES = ("stochastic-paper", "deterministic")


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs for one generation run: guidance scale, denoising strength,
    chain mode, and the root seed."""

    omega_cfg: float = 3.0
    strength: float = 0.5
    steps: int | None = None          # from-noise chain length; None = schedule T
    mode: str = "stochastic-paper"
    seed: int = 0
    stride: int = 1                   # >1 subsamples timesteps (deterministic only)

    def __post_init__(self):
        if self.omega_cfg < 0:
            raise ValueError(f"omega_cfg must be nonnegative, got {self.omega_cfg}")
        if self.mode not in GENERATION_MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.stride > 1 and self.mode != "deterministic":
            raise ValueError("strided sampling requires deterministic mode")


def guided_noise(model: GeneratorModel, z_t, t: int, v: PromptEmbedding,
                 omega_cfg: float) -> torch.Tensor:
    """Classifier-free-guided prediction:
    eps_u + omega * (eps_c - eps_u).

    omega=0 and omega=1 return the unconditional/conditional branch directly
    so the degenerate cases are exact (and skip the unused forward pass).
    """
    if omega_cfg == 0.0:
        return model.predict_noise(z_t, t, None)
    cond = model.encode_text(v)
    if omega_cfg == 1.0:
        return model.predict_noise(z_t, t, cond)
    eps_u = model.predict_noise(z_t, t, None)
    eps_c = model.predict_noise(z_t, t, cond)
    return eps_u + omega_cfg * (eps_c - eps_u)


def _reverse_chain(model: GeneratorModel, z: torch.Tensor, t_start: int,
                   v: PromptEmbedding, sched: NoiseSchedule, cfg: GenerationConfig,
                   rngs: list[np.random.Generator]) -> torch.Tensor:
    """Walk the guided reverse chain from t_start down to 0 for a batch whose
    per-sample noise comes from independent generators."""
    timesteps = list(range(t_start, 0, -1))
    if cfg.stride > 1:
        kept = timesteps[:: cfg.stride]
        if kept[-1] != 1:
            kept.append(1)
        timesteps = kept
    with torch.no_grad():
        for i, t in enumerate(timesteps):
            eps_hat = guided_noise(model, z, t, v, cfg.omega_cfg)
            t_next = timesteps[i + 1] if i + 1 < len(timesteps) else 0
            if t_next == t - 1:
                if cfg.mode == "deterministic":
                    # no per-sample noise is drawn; step the whole batch at once
                    z = ddim_step(z, eps_hat, t, sched, "deterministic")
                else:
                    z = torch.stack(
                        [ddim_step(z[j], eps_hat[j], t, sched, cfg.mode, rngs[j])
                         for j in range(z.shape[0])])
            else:
                # strided jump, deterministic update between non-adjacent steps
                a_t, s_t = float(sched.alphas[t]), float(sched.sigmas[t])
                a_n, s_n = float(sched.alphas[t_next]), float(sched.sigmas[t_next])
                z = a_n * (z - s_t * eps_hat) / a_t + s_n * eps_hat
    return z


def _spawn_rng(root_seed: int, index: int) -> tuple[int, np.random.Generator]:
    child = np.random.SeedSequence(root_seed, spawn_key=(index,))
    state = child.generate_state(2)
    seed_int = int(state[0]) << 32 | int(state[1])
    return seed_int, np.random.default_rng(child)


def generate_from_noise(model: GeneratorModel, v: PromptEmbedding,
                        sched: NoiseSchedule, cfg: GenerationConfig) -> np.ndarray:
    """Full reverse chain from z_T ~ N(0, I), decoded to one image."""
    steps = sched.T if cfg.steps is None else cfg.steps
    if steps != sched.T:
        raise ValueError(f"from-noise generation walks the full chain; "
                         f"steps={steps} but schedule has T={sched.T}")
    rng = np.random.default_rng(cfg.seed)
    c, h, w = model.latent_shape
    dtype = next(model.denoiser.parameters()).dtype
    z = torch.from_numpy(rng.standard_normal((1, c, h, w))).to(dtype)
    z = _reverse_chain(model, z, sched.T, v, sched, cfg, [rng])
    with torch.no_grad():
        return model.decode(z)[0].numpy()


def image_oriented_generate(x, model: GeneratorModel, v: PromptEmbedding,
                            sched: NoiseSchedule, cfg: GenerationConfig) -> np.ndarray:
    """Diffuse a real image to t' = round(strength * T), then run the guided
    reverse chain down to a clean latent and decode."""
    t_start = strength_to_timestep(cfg.strength, sched.T)
    rng = np.random.default_rng(cfg.seed)
    with torch.no_grad():
        z0 = model.encode(np.asarray(x))[None]
    eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape))).to(z0.dtype)
    z = diffuse(z0, t_start, eps, sched)
    z = _reverse_chain(model, z, t_start, v, sched, cfg, [rng])
    with torch.no_grad():
        return model.decode(z)[0].numpy()


def generate_dataset(model: GeneratorModel, v: PromptEmbedding, sources,
                     sched: NoiseSchedule, cfg: GenerationConfig, n: int,
                     class_label: str = "class", out_dir: str | Path | None = None,
                     source_ids: list[str] | None = None, from_noise: bool = False,
                     batch_size: int = 32,
                     ) -> tuple[np.ndarray, list[ManifestEntry]]:
    """Produce n images by cycling the source images with fresh per-sample
    seeds; write PNGs under <out_dir>/<class>/gen_<seed>.png when out_dir is
    given and return (images, manifest entries) with provenance recorded."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sources = np.asarray(sources)
    if sources.ndim == 2:
        sources = sources[None]
    if sources.shape[0] == 0:
        raise ValueError("need at least one source image")
    if source_ids is None:
        source_ids = [str(i) for i in range(sources.shape[0])]
    t_start = sched.T if from_noise else strength_to_timestep(cfg.strength, sched.T)
    c, h, w = model.latent_shape
    dtype = next(model.denoiser.parameters()).dtype
    out_images = []
    entries = []
    if out_dir is not None:
        cls_dir = Path(out_dir) / class_label
        cls_dir.mkdir(parents=True, exist_ok=True)
    for start in range(0, n, batch_size):
        count = min(batch_size, n - start)
        rngs, seeds, z_rows, src_rows = [], [], [], []
        for j in range(count):
            i = start + j
            seed_int, rng = _spawn_rng(cfg.seed, i)
            src = i % sources.shape[0]
            with torch.no_grad():
                if from_noise:
                    z = torch.from_numpy(
                        rng.standard_normal((c, h, w))).to(dtype)
                else:
                    z0 = model.encode(sources[src])
                    eps = torch.from_numpy(
                        rng.standard_normal(tuple(z0.shape))).to(dtype)
                    z = diffuse(z0, t_start, eps, sched)
            rngs.append(rng)
            seeds.append(seed_int)
            src_rows.append(src)
            z_rows.append(z)
        z = _reverse_chain(model, torch.stack(z_rows), t_start, v, sched, cfg, rngs)
        with torch.no_grad():
            images = model.decode(z).numpy()
        for j in range(count):
            img = images[j]
            out_images.append(img)
            path = ""
            if out_dir is not None:
                path = str(cls_dir / f"gen_{seeds[j]}.png")
                save_image(img, path)
            entries.append(ManifestEntry(
                path=path, label=class_label, split="train", provenance="generated",
                source_id=f"{class_label}:{source_ids[src_rows[j]]}"
                          f":omega={cfg.omega_cfg}:s={cfg.strength}:seed={seeds[j]}"))
    return np.stack(out_images), entries
