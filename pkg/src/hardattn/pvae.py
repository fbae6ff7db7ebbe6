"""Partial VAE in feature space: posterior S, decoder D and the masked Gaussian likelihood."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .flows import LOG_2PI, FlowStack
from .perception import GlimpseEncoder, GlimpseGrid
from .tensor import engine as E
from .tensor.engine import Tensor
from .tensor.nn import Conv2d, ConvTranspose2d, LayerNorm, Module, ModuleList, Parameter


@dataclass
class SynthesisResult:
    z: Tensor
    log_q: Tensor
    f_tilde: Tensor

    def at(self, l: int) -> np.ndarray:
        """Synthesised feature of grid cell ``l`` for every batch element."""
        b, c, s, _ = self.f_tilde.shape
        return self.f_tilde.data.reshape(b, c, s * s)[:, :, l]


@dataclass
class LikelihoodConfig:
    reduction: str = "sum"

    def __post_init__(self):
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")


class Decoder(Module):
    """z -> f~: (side-1)/2 x LN(LeakyReLU(ConvT k=3)), 5 x LN(LeakyReLU(Conv k=3 p=1)), Conv k=3 p=1."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, refine: int = 5):
        super().__init__()
        self.slope = cfg.slope
        width = cfg.decoder_channels
        ups, up_norms, convs, norms = [], [], [], []
        cin = cfg.latent_dim
        for _ in range((cfg.grid_side - 1) // 2):
            ups.append(ConvTranspose2d(cin, width, 3, rng))
            up_norms.append(LayerNorm(width))
            cin = width
        for _ in range(refine):
            convs.append(Conv2d(cin, width, 3, rng, padding=1))
            norms.append(LayerNorm(width))
            cin = width
        self.ups, self.up_norms = ModuleList(ups), ModuleList(up_norms)
        self.convs, self.norms = ModuleList(convs), ModuleList(norms)
        self.head = Conv2d(cin, cfg.feature_dim, 3, rng, padding=1)

    def forward(self, z) -> Tensor:
        z = E.as_tensor(z)
        x = z.reshape(z.shape + (1, 1))
        for up, norm in zip(self.ups, self.up_norms):
            x = norm(E.leaky_relu(up(x), self.slope))
        for conv, norm in zip(self.convs, self.norms):
            x = norm(E.leaky_relu(conv(x), self.slope))
        return self.head(x)


class PartialVAE(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.decoder = Decoder(cfg, rng)
        # global log sigma^2 of the feature likelihood
        self.log_sigma_sq = Parameter(np.zeros((), dtype=E.get_default_dtype()))


def encode_posterior(h, stack: FlowStack, rng: np.random.Generator):
    """z ~ q(z|h) with its log-density."""
    return stack.sample(E.as_tensor(h), rng)


def decode_feature_map(z, decoder: Decoder) -> Tensor:
    return decoder(z)


def synthesize(h, stack: FlowStack, decoder: Decoder, rng: np.random.Generator) -> SynthesisResult:
    z, log_q = stack.sample(E.as_tensor(h), rng)
    return SynthesisResult(z, log_q, decoder(z))


def masked_nll(f_tilde, f, m, log_sigma_sq, cfg: LikelihoodConfig | None = None) -> Tensor:
    """Gaussian NLL over observed grid cells, one log sigma^2 per observed entry.

    ``m`` has shape (..., S, S) and is broadcast over feature channels;
    returns one value per leading batch index. An empty mask gives 0.
    """
    cfg = cfg or LikelihoodConfig()
    f_tilde, f = E.as_tensor(f_tilde), E.as_tensor(f)
    m = np.asarray(m, dtype=f_tilde.dtype)
    mk = m[..., None, :, :]
    diff = f_tilde * mk - f * mk
    sq = (diff * diff).sum(axis=(-3, -2, -1))
    n_obs = mk.sum(axis=(-2, -1))[..., 0] * f_tilde.shape[-3]
    log_s2 = E.as_tensor(log_sigma_sq)
    nll = 0.5 * (sq * E.exp(-log_s2) + n_obs * log_s2)
    if cfg.reduction == "mean":
        nll = nll * (1.0 / np.maximum(n_obs, 1.0))
    return nll


def standard_normal_log_prob(z) -> Tensor:
    z = E.as_tensor(z)
    return (-0.5 * (z * z + LOG_2PI)).sum(axis=-1)


def pvae_loss(synth: SynthesisResult, f, m, log_sigma_sq, cfg: LikelihoodConfig | None = None):
    """Single-sample -ELBO per batch element: masked NLL + (log q(z|h) - log p(z)).

    Returns ``(loss, nll, kl_sample)``.
    """
    nll = masked_nll(synth.f_tilde, f, m, log_sigma_sq, cfg)
    kl = synth.log_q - standard_normal_log_prob(synth.z)
    return nll + kl, nll, kl


def build_target_feature_map(x: np.ndarray, encoder: GlimpseEncoder, grid: GlimpseGrid) -> np.ndarray:
    """f(l) = F(g(x, l), l) for every candidate, assembled as (B, F, S, S).

    Runs without recording gradients; callers choose the encoder's mode.
    """
    b = x.shape[0]
    all_g = grid.extract_all(x).reshape((b * grid.num_cells,) + x.shape[1:2] + (grid.glimpse_size,) * 2)
    locs = np.tile(grid.normalized_locations(), (b, 1)).astype(E.get_default_dtype())
    with E.no_grad():
        f = encoder(all_g, locs).data
    return np.ascontiguousarray(f.reshape(b, grid.side, grid.side, -1).transpose(0, 3, 1, 2))
