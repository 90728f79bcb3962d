"""Desk-scale encoder/decoder architecture and the meta-learned parameter set.

The encoder is a small conv stack feeding the variational heads; a latent
sample is then projected back up and decoded by a second conv stack into the
classification features consumed by the convex base-learners. The inner-loop
step size, logit scale, and variational weight are stored through softplus so
they stay positive while being optimized without constraints.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import latent
from .autodiff import Tensor

__all__ = ["ModelConfig", "MetaParams", "EmbedResult", "embed", "checksum_params"]


def _softplus_inverse(v):
    return float(np.log(np.expm1(v)))


def _fan_in_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ModelConfig:
    in_channels: int = 1
    image_side: int = 32
    conv_channels: tuple = (16, 32, 64)
    latent_dim: int = 64
    decoder_channels: tuple = (32, 64, 64)
    decoder_spatial: int = 4
    recon_hidden: int = 64
    # pins per-example feature RMS at 1, standing in for the scale control a
    # batch-normalized backbone would provide; without it feature magnitudes
    # drift unboundedly and the base-learner QPs lose conditioning
    normalize_features: bool = True

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        side = self.image_side
        for _ in self.conv_channels:
            if side > 1 and side % 2:
                raise ValueError(
                    f"image side {self.image_side} does not pool evenly through "
                    f"{len(self.conv_channels)} encoder blocks"
                )
            side = max(side // 2, 1)
        self.encoder_out_side = side

    @property
    def encoder_feature_dim(self):
        return self.conv_channels[-1] * self.encoder_out_side**2

    @property
    def feature_dim(self):
        return self.decoder_channels[-1]


@dataclass
class EmbedResult:
    """Classification features, the latent code, and the encoder features the
    reconstruction likelihood targets."""

    features: Tensor
    code: latent.LatentCode
    enc_features: Tensor


@dataclass
class MetaParams:
    """Everything the outer loop optimizes."""

    config: ModelConfig
    enc_convs: list
    latent_head: latent.LatentHead
    dec_proj: tuple
    dec_convs: list
    recon_head: latent.ReconHead
    lambda_raw: Tensor = field(default=None)
    varphi_raw: Tensor = field(default=None)
    beta_raw: Tensor = field(default=None)

    @classmethod
    def create(cls, config, rng, lambda_init=0.01, varphi_init=1.0, beta_init=0.1, dtype=None):
        dtype = dtype or ad.default_dtype()
        enc_convs = []
        cin = config.in_channels
        for cout in config.conv_channels:
            w = Tensor(_fan_in_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype), requires_grad=True)
            b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
            enc_convs.append((w, b))
            cin = cout
        head = latent.LatentHead.create(config.encoder_feature_dim, config.latent_dim, rng, dtype)

        s = config.decoder_spatial
        proj_out = config.decoder_channels[0] * s * s
        dec_proj = (
            Tensor(_fan_in_uniform(rng, (proj_out, config.latent_dim), config.latent_dim, dtype), requires_grad=True),
            Tensor(np.zeros(proj_out, dtype=dtype), requires_grad=True),
        )
        dec_convs = []
        cin = config.decoder_channels[0]
        for cout in config.decoder_channels[1:]:
            w = Tensor(_fan_in_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype), requires_grad=True)
            b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
            dec_convs.append((w, b))
            cin = cout
        recon = latent.ReconHead.create(
            config.latent_dim, config.encoder_feature_dim, config.recon_hidden, rng, dtype
        )
        return cls(
            config=config,
            enc_convs=enc_convs,
            latent_head=head,
            dec_proj=dec_proj,
            dec_convs=dec_convs,
            recon_head=recon,
            lambda_raw=Tensor(np.asarray(_softplus_inverse(lambda_init), dtype=dtype), requires_grad=True),
            varphi_raw=Tensor(np.asarray(_softplus_inverse(varphi_init), dtype=dtype), requires_grad=True),
            beta_raw=Tensor(np.asarray(_softplus_inverse(beta_init), dtype=dtype), requires_grad=True),
        )

    # positive views for use in graphs
    def inner_lr(self):
        return ad.softplus(self.lambda_raw)

    def logit_scale(self):
        return ad.softplus(self.varphi_raw)

    def var_weight(self):
        return ad.softplus(self.beta_raw)

    def params(self):
        out = {}
        for i, (w, b) in enumerate(self.enc_convs):
            out[f"enc.conv{i}.w"] = w
            out[f"enc.conv{i}.b"] = b
        out.update(self.latent_head.params("latent"))
        out["dec.proj.w"], out["dec.proj.b"] = self.dec_proj
        for i, (w, b) in enumerate(self.dec_convs):
            out[f"dec.conv{i}.w"] = w
            out[f"dec.conv{i}.b"] = b
        out.update(self.recon_head.params("recon"))
        out["scalar.lambda_raw"] = self.lambda_raw
        out["scalar.varphi_raw"] = self.varphi_raw
        out["scalar.beta_raw"] = self.beta_raw
        return out

    def checkpoint_arrays(self):
        arrays = {name: p.data for name, p in self.params().items()}
        cfg = self.config
        arrays["cfg.in_channels"] = np.asarray(float(cfg.in_channels), dtype=np.float64)
        arrays["cfg.image_side"] = np.asarray(float(cfg.image_side), dtype=np.float64)
        arrays["cfg.conv_channels"] = np.asarray(cfg.conv_channels, dtype=np.float64)
        arrays["cfg.latent_dim"] = np.asarray(float(cfg.latent_dim), dtype=np.float64)
        arrays["cfg.decoder_channels"] = np.asarray(cfg.decoder_channels, dtype=np.float64)
        arrays["cfg.decoder_spatial"] = np.asarray(float(cfg.decoder_spatial), dtype=np.float64)
        arrays["cfg.recon_hidden"] = np.asarray(float(cfg.recon_hidden), dtype=np.float64)
        arrays["cfg.normalize_features"] = np.asarray(float(cfg.normalize_features), dtype=np.float64)
        return arrays

    @classmethod
    def from_checkpoint_arrays(cls, arrays):
        try:
            config = ModelConfig(
                in_channels=int(arrays["cfg.in_channels"]),
                image_side=int(arrays["cfg.image_side"]),
                conv_channels=tuple(int(c) for c in arrays["cfg.conv_channels"]),
                latent_dim=int(arrays["cfg.latent_dim"]),
                decoder_channels=tuple(int(c) for c in arrays["cfg.decoder_channels"]),
                decoder_spatial=int(arrays["cfg.decoder_spatial"]),
                recon_hidden=int(arrays["cfg.recon_hidden"]),
                normalize_features=bool(arrays.get("cfg.normalize_features", 1.0)),
            )
        except KeyError as err:
            raise KeyError(f"checkpoint missing architecture entry {err}") from err
        mp = cls.create(config, np.random.default_rng(0))
        for name, p in mp.params().items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            stored = arrays[name]
            if tuple(stored.shape) != tuple(p.data.shape):
                raise ValueError(
                    f"checkpoint shape mismatch for {name!r}: {stored.shape} vs {p.data.shape}"
                )
            p.data = stored.astype(p.data.dtype)
        return mp


def embed(x_raw, mp, noise=None, n_samples=1):
    """Encoder stack -> latent heads -> reparameterized z -> decoder features.

    `noise` selects the epsilon source: None for the deterministic evaluation
    path (epsilon = 0), a numpy Generator for fresh draws, or an explicit list
    of [B, latent_dim] arrays (one per sample, fixed for gradient checking).
    """
    cfg = mp.config
    x = x_raw if isinstance(x_raw, Tensor) else Tensor(np.asarray(x_raw))
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_side, cfg.image_side):
        raise ValueError(
            f"expected input [B,{cfg.in_channels},{cfg.image_side},{cfg.image_side}], got {x.shape}"
        )
    B = x.shape[0]

    h = x
    for w, b in mp.enc_convs:
        h = ad.maxpool2x2(ad.relu(ad.conv2d(h, w, stride=1, padding=1) + ad.reshape(b, (1, b.shape[0], 1, 1))))
    enc_features = ad.reshape(h, (B, cfg.encoder_feature_dim))
    if cfg.normalize_features:
        enc_features = _rms_normalize(enc_features)

    mu, log_var = latent.encode(enc_features, mp.latent_head)
    if noise is None:
        eps_list = [np.zeros((B, cfg.latent_dim), dtype=mu.dtype)] * n_samples
    elif isinstance(noise, (list, tuple)):
        if len(noise) < n_samples:
            raise ValueError(f"{len(noise)} noise draws provided, {n_samples} needed")
        eps_list = [np.asarray(e, dtype=mu.dtype) for e in noise[:n_samples]]
    else:
        eps_list = [noise.standard_normal((B, cfg.latent_dim)).astype(mu.dtype) for _ in range(n_samples)]
    samples = [latent.reparameterize(mu, log_var, e) for e in eps_list]
    code = latent.LatentCode(mu=mu, log_var=log_var, samples=samples, epsilons=eps_list)

    # classification path decodes the first sample
    s = cfg.decoder_spatial
    pw, pb = mp.dec_proj
    d = ad.relu(samples[0] @ pw.T + pb)
    d = ad.reshape(d, (B, cfg.decoder_channels[0], s, s))
    for w, b in mp.dec_convs:
        d = ad.relu(ad.conv2d(d, w, stride=1, padding=1) + ad.reshape(b, (1, b.shape[0], 1, 1)))
    features = ad.tmean(ad.reshape(d, (B, cfg.feature_dim, s * s)), axis=2)
    if cfg.normalize_features:
        features = _rms_normalize(features)
    return EmbedResult(features=features, code=code, enc_features=enc_features)


def _rms_normalize(t):
    """Scale each row to unit RMS (composed from mean/log/exp primitives)."""
    ms = ad.tmean(t * t, axis=1, keepdims=True)
    return t * ad.exp(-0.5 * ad.log(ms + 1e-6))


def checksum_params(mp):
    """Stable digest of every parameter byte; used to prove evaluation never
    mutates the model."""
    h = hashlib.sha256()
    params = mp.params()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()
