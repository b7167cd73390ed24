import numpy as np
import pytest
import torch

from minidiff.data import load_image, synth_corpus
from minidiff.errors import UnknownTokenError
from minidiff.nets import (
    GeneratorModel,
    ModelConfig,
    PromptEmbedding,
    diffusion_loss,
    pretrain_autoencoder,
    probe_loss,
    reconstruction_mse,
)
from minidiff.schedule import make_schedule

TINY = ModelConfig(image_size=8, latent_mode="identity", spatial_factor=1,
                   latent_channels=1, denoiser_width=8, denoiser_blocks=2,
                   embed_dim=8, text_mlp_hidden=16, timesteps=10)


@pytest.fixture(scope="module")
def tiny_model():
    return GeneratorModel(TINY, seed=0)


def central_diff(f, x: torch.Tensor, idx, h: float):
    x1 = x.clone()
    x1.view(-1)[idx] += h
    x2 = x.clone()
    x2.view(-1)[idx] -= h
    return (f(x1) - f(x2)) / (2 * h)


# -- auto-encoder ----------------------------------------------------------

def test_identity_mode_round_trip(tiny_model):
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.random((3, 8, 8))).float()
    z = tiny_model.encode(x)
    assert z.shape == (3, 1, 8, 8)
    torch.testing.assert_close(tiny_model.decode(z), x, rtol=0, atol=0)


def test_encode_batch_order(tiny_model):
    rng = np.random.default_rng(1)
    x = rng.random((4, 8, 8))
    batch = tiny_model.encode(x)
    for i in range(4):
        torch.testing.assert_close(batch[i], tiny_model.encode(x[i]),
                                   rtol=1e-5, atol=1e-6)


def test_encode_rejects_wrong_resolution(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.encode(np.zeros((4, 16, 16)))


@pytest.mark.slow
def test_trained_autoencoder_reconstruction(tmp_path):
    man = synth_corpus(["scratch", "pit", "patch", "scale"], 32, 32, seed=7,
                       root=tmp_path)
    imgs = np.stack([load_image(e.path) for e in man.entries])
    model = GeneratorModel(ModelConfig(), seed=0)
    pretrain_autoencoder(model, imgs, iterations=600, lr=2e-3, seed=0)
    # observed ~0.001 on this corpus; bound leaves 10x headroom
    assert reconstruction_mse(model, imgs) < 0.01
    with torch.no_grad():
        z = model.encode(imgs)
        out = model.decode(z)
    assert abs(float(z.std()) - 1.0) < 0.05
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


# -- tokenizer -------------------------------------------------------------

def test_tokenize_placeholder_prompt(tiny_model):
    v = tiny_model.tokenize("A photo of <unknown>")
    assert v.tokens.shape == (4, 8)
    assert v.trainable_slice == slice(3, 4)
    assert v.words == ("a", "photo", "of", "<unknown>")
    v2 = tiny_model.tokenize("A photo of <unknown>")
    torch.testing.assert_close(v.tokens, v2.tokens, rtol=0, atol=0)


def test_tokenize_plain_prompt_has_empty_slice(tiny_model):
    v = tiny_model.tokenize("A photo of defect")
    assert v.trainable_width == 0
    marked = tiny_model.tokenize("A photo of defect", trainable_word="defect")
    assert marked.trainable_slice == slice(3, 4)


def test_tokenize_unknown_word(tiny_model):
    with pytest.raises(UnknownTokenError):
        tiny_model.tokenize("a photo of rust")


def test_tokenize_errors(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.tokenize("")
    with pytest.raises(ValueError):
        tiny_model.tokenize("a photo of the dark bright smooth rough metal")
    with pytest.raises(ValueError):
        tiny_model.tokenize("a photo of defect", trainable_word="scratch")


def test_tokenize_wide_placeholder():
    cfg = ModelConfig(image_size=8, latent_mode="identity", spatial_factor=1,
                      latent_channels=1, denoiser_width=8, denoiser_blocks=2,
                      embed_dim=8, placeholder_width=2, timesteps=10)
    model = GeneratorModel(cfg, seed=0)
    v = model.tokenize("a photo of <unknown>")
    assert v.tokens.shape[0] == 5
    assert v.trainable_slice == slice(3, 5)


def test_prompt_embedding_validation():
    with pytest.raises(ValueError):
        PromptEmbedding(tokens=torch.zeros(3, 4), trainable_slice=slice(2, 5))
    with pytest.raises(ValueError):
        PromptEmbedding(tokens=torch.full((2, 2), float("nan")),
                        trainable_slice=slice(0, 1))


# -- text encoder ----------------------------------------------------------

def test_encode_text_finite_and_shape(tiny_model):
    v = tiny_model.tokenize("a photo of <unknown>")
    e = tiny_model.encode_text(v)
    assert e.shape == (8,)
    assert torch.isfinite(e).all()


def test_encode_text_permutation_invariant_without_positions():
    cfg = ModelConfig(image_size=8, latent_mode="identity", spatial_factor=1,
                      latent_channels=1, denoiser_width=8, denoiser_blocks=2,
                      embed_dim=8, use_positional=False, timesteps=10)
    model = GeneratorModel(cfg, seed=0).double()
    tokens = torch.randn(5, 8, dtype=torch.float64,
                         generator=torch.Generator().manual_seed(2))
    perm = torch.tensor([3, 0, 4, 2, 1])
    out = model.encode_text(tokens)
    out_perm = model.encode_text(tokens[perm])
    torch.testing.assert_close(out, out_perm, rtol=1e-10, atol=1e-12)


def test_encode_text_gradient_matches_finite_differences():
    model = GeneratorModel(TINY, seed=0).double()
    gen = torch.Generator().manual_seed(3)
    tokens = torch.randn(4, 8, dtype=torch.float64, generator=gen)
    u = torch.randn(8, dtype=torch.float64, generator=gen)

    def f(tk):
        with torch.no_grad():
            return float(model.encode_text(tk) @ u)

    req = tokens.clone().requires_grad_(True)
    (model.encode_text(req) @ u).backward()
    for idx in (0, 7, 13, 25, 31):
        fd = central_diff(f, tokens, idx, h=1e-3)
        an = float(req.grad.view(-1)[idx])
        assert abs(fd - an) <= 1e-4 * max(abs(an), 1e-6)


# -- denoiser ---------------------------------------------------------------

def test_predict_noise_shape_and_determinism(tiny_model):
    rng = np.random.default_rng(4)
    z = rng.standard_normal((2, 1, 8, 8))
    a = tiny_model.predict_noise(z, 3)
    b = tiny_model.predict_noise(z, 3)
    assert a.shape == (2, 1, 8, 8)
    torch.testing.assert_close(a, b, rtol=0, atol=0)
    single = tiny_model.predict_noise(z[0], 3)
    assert single.shape == (1, 8, 8)


def test_predict_noise_timestep_range(tiny_model):
    z = np.zeros((1, 1, 8, 8))
    with pytest.raises(ValueError):
        tiny_model.predict_noise(z, 0)
    with pytest.raises(ValueError):
        tiny_model.predict_noise(z, 11)


def test_predict_noise_conditioning_sensitivity(tiny_model):
    rng = np.random.default_rng(5)
    z = rng.standard_normal((1, 1, 8, 8))
    e1 = tiny_model.encode_text(tiny_model.tokenize("a photo of scratch"))
    e2 = tiny_model.encode_text(tiny_model.tokenize("a photo of pit"))
    out1 = tiny_model.predict_noise(z, 2, e1)
    out2 = tiny_model.predict_noise(z, 2, e2)
    null = tiny_model.predict_noise(z, 2, None)
    assert not torch.equal(out1, out2)
    assert not torch.equal(out1, null)


# -- diffusion loss ----------------------------------------------------------

class _EchoModel:
    """Duck-typed stand-in whose noise prediction equals the drawn noise."""

    def __init__(self, real: GeneratorModel, eps):
        self._real = real
        self._eps = torch.as_tensor(eps).float()

    def __getattr__(self, name):
        return getattr(self._real, name)

    def predict_noise(self, z_t, t, cond=None):
        return self._eps

    def encode_text(self, v):
        return self._real.encode_text(v)


class _ZeroModel(_EchoModel):
    def __init__(self, real: GeneratorModel):
        self._real = real

    def predict_noise(self, z_t, t, cond=None):
        return torch.zeros_like(torch.as_tensor(z_t).float())


def test_diffusion_loss_zero_for_echo_model(tiny_model):
    sched = make_schedule(10)
    rng = np.random.default_rng(6)
    x = rng.random((2, 8, 8))
    eps = rng.standard_normal((2, 1, 8, 8))
    model = _EchoModel(tiny_model, eps)
    loss = diffusion_loss(model, x, None, sched, frozen_t=np.array([3, 7]),
                          frozen_eps=eps)
    assert float(loss) == 0.0


def test_diffusion_loss_zero_model_equals_dimension(tiny_model):
    # E ||eps||^2 = K for a K-dimensional unit normal; K = 64 here.
    sched = make_schedule(10)
    rng = np.random.default_rng(7)
    x = rng.random((512, 8, 8))
    loss = diffusion_loss(_ZeroModel(tiny_model), x, None, sched, rng=rng)
    assert abs(float(loss) - 64.0) / 64.0 < 0.03


def test_diffusion_loss_empty_batch(tiny_model):
    sched = make_schedule(10)
    with pytest.raises(ValueError):
        diffusion_loss(tiny_model, np.zeros((0, 8, 8)), None, sched,
                       rng=np.random.default_rng(0))


def test_diffusion_loss_gradient_wrt_token_slice():
    # 2-image batch, frozen t and eps, double precision
    model = GeneratorModel(TINY, seed=1).double()
    sched = make_schedule(10)
    rng = np.random.default_rng(8)
    x = rng.random((2, 8, 8))
    t = np.array([2, 9])
    eps = rng.standard_normal((2, 1, 8, 8))
    v0 = model.tokenize("a photo of <unknown>")

    def loss_for(tokens):
        v = PromptEmbedding(tokens=tokens, trainable_slice=v0.trainable_slice,
                            words=v0.words)
        return float(diffusion_loss(model, x, v, sched, frozen_t=t, frozen_eps=eps))

    req = v0.tokens.clone().requires_grad_(True)
    v_live = PromptEmbedding(tokens=req, trainable_slice=v0.trainable_slice,
                             words=v0.words)
    diffusion_loss(model, x, v_live, sched, frozen_t=t, frozen_eps=eps).backward()
    # probe entries inside the trainable slice (row 3)
    for idx in (24, 27, 31):
        fd = central_diff(loss_for, v0.tokens, idx, h=1e-4)
        an = float(req.grad.view(-1)[idx])
        assert abs(fd - an) <= 1e-4 * max(abs(an), 1e-6)


def test_diffusion_loss_gradient_wrt_attention_weight():
    model = GeneratorModel(TINY, seed=2).double()
    sched = make_schedule(10)
    rng = np.random.default_rng(9)
    x = rng.random((2, 8, 8))
    t = np.array([5, 1])
    eps = rng.standard_normal((2, 1, 8, 8))
    v = model.tokenize("a photo of <unknown>")
    layer = model.attention_dense_layers()["denoiser.attn0.q"]

    def loss_now():
        return diffusion_loss(model, x, v, sched, frozen_t=t, frozen_eps=eps)

    loss_now().backward()
    grad = layer.weight.grad.clone()
    for idx in (0, 9, 33):
        with torch.no_grad():
            orig = layer.weight.view(-1)[idx].item()
            layer.weight.view(-1)[idx] = orig + 1e-4
            up = float(loss_now())
            layer.weight.view(-1)[idx] = orig - 1e-4
            down = float(loss_now())
            layer.weight.view(-1)[idx] = orig
        fd = (up - down) / 2e-4
        an = float(grad.view(-1)[idx])
        assert abs(fd - an) <= 1e-4 * max(abs(an), 1e-6)


# -- probe loss and bookkeeping ----------------------------------------------

def test_probe_loss_deterministic(tiny_model):
    sched = make_schedule(10)
    rng = np.random.default_rng(10)
    imgs = rng.random((8, 8, 8))
    v = tiny_model.tokenize("a photo of <unknown>")
    a = probe_loss(tiny_model, imgs, v, sched, seed=3)
    b = probe_loss(tiny_model, imgs, v, sched, seed=3)
    assert a == b
    assert a > 0


def test_parameter_count_and_attention_registry(tiny_model):
    assert tiny_model.n_parameters() == sum(
        p.numel() for p in tiny_model.parameters())
    layers = tiny_model.attention_dense_layers()
    expected = {f"text.block0.attn.{n}" for n in ("q", "k", "v", "out")} | \
               {f"denoiser.attn0.{n}" for n in ("q", "k", "v", "out")}
    assert set(layers) == expected
    for mod in layers.values():
        assert isinstance(mod, torch.nn.Linear)


def test_parameter_fingerprint_changes_with_weights(tiny_model):
    f1 = tiny_model.parameter_fingerprint()
    other = GeneratorModel(TINY, seed=99)
    assert f1 != other.parameter_fingerprint()
    assert f1 == tiny_model.parameter_fingerprint()


@pytest.mark.slow
def test_trained_denoiser_approaches_analytic_oracle():
    # Unconditional training on N(mu0, gamma^2) data; the prediction must
    # approach the closed-form posterior-optimal noise estimate.
    cfg = ModelConfig(image_size=8, latent_mode="identity", spatial_factor=1,
                      latent_channels=1, denoiser_width=16, denoiser_blocks=2,
                      embed_dim=8, timesteps=50)
    model = GeneratorModel(cfg, seed=0)
    sched = make_schedule(50)
    mu0, gamma = 0.6, 0.15
    rng = np.random.default_rng(0)
    opt = torch.optim.Adam(list(model.denoiser.parameters()) + [model.null_cond],
                           lr=2e-3)
    for _ in range(1500):
        x = np.clip(rng.normal(mu0, gamma, size=(32, 8, 8)), 0, 1)
        loss = diffusion_loss(model, x, None, sched, rng=rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
    gaps = []
    with torch.no_grad():
        for t in range(1, 51, 7):
            z0 = torch.from_numpy(rng.normal(mu0, gamma, (64, 1, 8, 8))).float()
            eps = torch.from_numpy(rng.standard_normal((64, 1, 8, 8))).float()
            z_t = sched.alphas[t] * z0 + sched.sigmas[t] * eps
            pred = model.predict_noise(z_t, t, None)
            var = sched.alphas[t] ** 2 * gamma**2 + sched.sigmas[t] ** 2
            optimal = sched.sigmas[t] * (z_t - sched.alphas[t] * mu0) / var
            gaps.append(float(((pred - optimal) ** 2).mean()))
    assert np.mean(gaps) < 0.05
