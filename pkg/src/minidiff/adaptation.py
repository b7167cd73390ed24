"""Generator adaptation: token-embedding optimization, then low-rank deltas
on the attention dense layers of the text encoder and denoiser.

Stage 1 trains only the marked slice of the prompt embedding; stage 2
attaches rank-r (A, B) factors to every targeted dense layer (B zero at
attach time, so outputs are bit-identical until training starts) and trains
only those factors. Both stages leave every other parameter untouched, which
the tests assert by hashing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidStateError, UnknownLayerError
from .nets import GeneratorModel, PromptEmbedding, diffusion_loss
from .schedule import NoiseSchedule

TOKEN_LR = 5e-4
LORA_LR = 1e-4


@dataclass
class AdaptationConfig:
    stage: str = "token"               # "token" | "lora" | "full"
    iterations: int = 1000
    batch_size: int = 4
    lr: float | None = None            # stage default when None
    seed: int = 0
    null_cond_prob: float = 0.1

    def __post_init__(self):
        if self.stage not in ("token", "lora", "full"):
            raise ValueError(f"unknown adaptation stage {self.stage!r}")
        if self.lr is None:
            self.lr = TOKEN_LR if self.stage == "token" else LORA_LR


class LoraLinear(nn.Module):
    """Dense layer with a frozen base weight plus a rank-r delta B @ A."""

    def __init__(self, base: nn.Linear, rank: int, init_rng: np.random.Generator):
        super().__init__()
        d, k = base.weight.shape
        self.base = base
        self.A = nn.Parameter(torch.from_numpy(
            init_rng.standard_normal((rank, k)) / np.sqrt(k)).to(base.weight.dtype))
        self.B = nn.Parameter(torch.zeros(d, rank, dtype=base.weight.dtype))

    def forward(self, x):
        return self.base(x) + (x @ self.A.transpose(0, 1)) @ self.B.transpose(0, 1)


@dataclass
class LoraAdapter:
    """Per-target-layer (A, B) factors bound to a model."""

    rank: int
    targets: list[str]
    layers: dict[str, LoraLinear] = field(default_factory=dict)
    merged: bool = False

    @property
    def n_trainable(self) -> int:
        return sum(layer.A.numel() + layer.B.numel() for layer in self.layers.values())

    def parameters(self) -> list[nn.Parameter]:
        out = []
        for layer in self.layers.values():
            out.extend([layer.A, layer.B])
        return out


def attach_lora(model: GeneratorModel, targets: list[str] | None = None,
                r: int = 1, seed: int = 0) -> LoraAdapter:
    """Wrap the named dense layers so forwards compute W0 x + B (A x).

    B starts at zero, so every model output is bit-identical to the
    pre-attachment model until the factors train.
    """
    if model.lora_adapter is not None:
        raise InvalidStateError("model already has an adapter attached")
    slots = model._attention_slots()
    if targets is None:
        targets = sorted(slots)
    rng = np.random.default_rng(seed)
    adapter = LoraAdapter(rank=r, targets=list(targets))
    for name in targets:
        if name not in slots:
            raise UnknownLayerError(f"no dense layer named {name!r}")
        parent, attr = slots[name]
        base = getattr(parent, attr)
        if not isinstance(base, nn.Linear):
            raise UnknownLayerError(f"target {name!r} is not a plain dense layer")
        d, k = base.weight.shape
        if r > min(d, k):
            raise ValueError(f"rank {r} exceeds min(d, k) = {min(d, k)} for {name!r}")
        wrapped = LoraLinear(base, r, rng)
        setattr(parent, attr, wrapped)
        adapter.layers[name] = wrapped
    model.lora_adapter = adapter
    return adapter


def merge_lora(adapter: LoraAdapter, model: GeneratorModel) -> GeneratorModel:
    """Fold W = W0 + B A into each base weight and drop the wrappers."""
    if adapter.merged:
        raise InvalidStateError("adapter already merged")
    if model.lora_adapter is not adapter:
        raise InvalidStateError("adapter is not attached to this model")
    slots = model._attention_slots()
    with torch.no_grad():
        for name, wrapped in adapter.layers.items():
            parent, attr = slots[name]
            wrapped.base.weight += wrapped.B @ wrapped.A
            setattr(parent, attr, wrapped.base)
    adapter.merged = True
    model.lora_adapter = None
    return model


def unmerge_lora(adapter: LoraAdapter, model: GeneratorModel) -> GeneratorModel:
    """Subtract B A back out of the merged weights and re-attach the wrappers."""
    if not adapter.merged:
        raise InvalidStateError("adapter is not merged")
    slots = model._attention_slots()
    with torch.no_grad():
        for name, wrapped in adapter.layers.items():
            parent, attr = slots[name]
            wrapped.base.weight -= wrapped.B @ wrapped.A
            setattr(parent, attr, wrapped)
    adapter.merged = False
    model.lora_adapter = adapter
    return model


def detach_lora(adapter: LoraAdapter, model: GeneratorModel) -> GeneratorModel:
    """Remove an unmerged adapter, restoring the original dense layers."""
    if adapter.merged:
        raise InvalidStateError("adapter already merged")
    slots = model._attention_slots()
    for name, wrapped in adapter.layers.items():
        parent, attr = slots[name]
        setattr(parent, attr, wrapped.base)
    model.lora_adapter = None
    return model


class _freeze_except:
    """Temporarily turn off requires_grad for all model parameters except
    the given trainables (saves backward compute and enforces isolation)."""

    def __init__(self, model: nn.Module, trainable: list[nn.Parameter]):
        self.model = model
        self.keep = {id(p) for p in trainable}
        self.saved: list[tuple[nn.Parameter, bool]] = []

    def __enter__(self):
        for p in self.model.parameters():
            self.saved.append((p, p.requires_grad))
            p.requires_grad_(id(p) in self.keep)
        return self

    def __exit__(self, *exc):
        for p, flag in self.saved:
            p.requires_grad_(flag)
        return False


def _adaptation_loop(model: GeneratorModel, images: np.ndarray, make_v,
                     sched: NoiseSchedule, cfg: AdaptationConfig,
                     params: list[nn.Parameter]) -> list[float]:
    images = np.asarray(images)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    history = []
    with _freeze_except(model, params):
        for _ in range(cfg.iterations):
            idx = rng.choice(len(images), size=min(cfg.batch_size, len(images)),
                             replace=False)
            loss = diffusion_loss(model, images[idx], make_v(), sched, rng=rng,
                                  null_cond_prob=cfg.null_cond_prob)
            # null-conditioned batches touch none of the trainables in the
            # token stage; skip the step but keep the rng stream aligned
            if loss.requires_grad:
                opt.zero_grad()
                loss.backward()
                opt.step()
            history.append(float(loss.detach()))
    return history


def train_token_embedding(images, prompt: str, model: GeneratorModel,
                          sched: NoiseSchedule, cfg: AdaptationConfig,
                          trainable_word: str | None = None) -> PromptEmbedding:
    """Stage 1: optimize only the prompt's trainable token slice on one class.

    Writes the optimized slice back into the embedding table so later
    tokenize calls reproduce it; everything else stays bit-identical.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("need a nonempty class image set")
    v0 = model.tokenize(prompt, trainable_word)
    if v0.trainable_width == 0:
        raise ValueError(
            f"prompt {prompt!r} has no trainable token; include the placeholder "
            "or pass trainable_word")
    if cfg.iterations == 0:
        return v0
    sl = v0.trainable_slice
    v_d = v0.tokens[sl].clone().requires_grad_(True)
    head = v0.tokens[: sl.start].detach()
    tail = v0.tokens[sl.stop:].detach()

    def make_v():
        # reassemble per step so the autograd graph reaches v_d
        return PromptEmbedding(tokens=torch.cat([head, v_d, tail], dim=0),
                               trainable_slice=sl, words=v0.words)

    _adaptation_loop(model, images, make_v, sched, cfg, [v_d])
    tokens = torch.cat([head, v_d.detach(), tail], dim=0)
    v_star = PromptEmbedding(tokens=tokens, trainable_slice=sl, words=v0.words)
    model.write_back_embedding(v_star)
    return v_star


def _frozen(v: PromptEmbedding) -> PromptEmbedding:
    return PromptEmbedding(tokens=v.tokens.detach().clone(),
                           trainable_slice=v.trainable_slice, words=v.words)


def train_lora(images, v_star: PromptEmbedding, model: GeneratorModel,
               sched: NoiseSchedule, cfg: AdaptationConfig) -> GeneratorModel:
    """Stage 2: train only the attached adapter's A/B factors with v* frozen."""
    adapter = model.lora_adapter
    if adapter is None:
        raise InvalidStateError("no adapter attached; call attach_lora first")
    if cfg.iterations == 0:
        return model
    frozen_v = _frozen(v_star)
    _adaptation_loop(model, images, lambda: frozen_v, sched, cfg, adapter.parameters())
    return model


def train_full_parameter(images, v: PromptEmbedding, model: GeneratorModel,
                         sched: NoiseSchedule, cfg: AdaptationConfig) -> GeneratorModel:
    """Ablation baseline: every network parameter trainable (no adapter)."""
    params = (list(model.denoiser.parameters())
              + list(model.text_encoder.parameters()) + [model.null_cond])
    frozen_v = _frozen(v)
    _adaptation_loop(model, images, lambda: frozen_v, sched, cfg, params)
    return model
