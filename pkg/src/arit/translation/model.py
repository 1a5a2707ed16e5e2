"""The two-stage translation model and its objectives.

Domains: N (corrupted real), R (clean real, realized by pseudo-labels) and
V (virtual). The local stage maps N -> R (G_x1, reverse G_y1), the global
stage R -> V (G_x2, reverse G_y2). D_x* judge the forward targets (R, V) and
D_y* the reverse targets (N, R). With decoupling off a single pair
G: N -> V, F: V -> N replaces both stages.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from arit.translation.losses import (
    discriminator_loss,
    gan_loss,
    generator_adv_loss,
    l1,
    patch_nce_loss,
    resilient_loss,
    sample_patch_pairs,
)
from arit.translation.networks import Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, ProjectionHead


@dataclass(frozen=True)
class ModelConfig:
    decoupling: bool = True
    resilient: bool = True
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    k_proj: int = 64

    def to_json(self) -> dict:
        return {
            "decoupling": self.decoupling,
            "resilient": self.resilient,
            "generator": self.generator.to_json(),
            "discriminator": self.discriminator.to_json(),
            "k_proj": self.k_proj,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(
            decoupling=bool(obj["decoupling"]),
            resilient=bool(obj["resilient"]),
            generator=GeneratorSpec(**obj["generator"]),
            discriminator=DiscriminatorSpec(**obj["discriminator"]),
            k_proj=int(obj["k_proj"]),
        )


GENERATORS_DECOUPLED = ("G_x1", "G_y1", "G_x2", "G_y2")
DISCRIMINATORS_DECOUPLED = ("D_x1", "D_y1", "D_x2", "D_y2")
GENERATORS_SINGLE = ("G", "F")
DISCRIMINATORS_SINGLE = ("D_V", "D_N")


class TranslationModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        gens = GENERATORS_DECOUPLED if cfg.decoupling else GENERATORS_SINGLE
        discs = DISCRIMINATORS_DECOUPLED if cfg.decoupling else DISCRIMINATORS_SINGLE
        self.generators = nn.ModuleDict({name: Generator(cfg.generator) for name in gens})
        self.discriminators = nn.ModuleDict({name: Discriminator(cfg.discriminator) for name in discs})
        c = cfg.generator.feature_channels
        heads = ["H_x1" if cfg.decoupling else "H"]
        if cfg.resilient:
            heads.append("H_y2" if cfg.decoupling else "H_F")
        self.heads = nn.ModuleDict({name: ProjectionHead(c, cfg.k_proj) for name in heads})

    # parameter groups for the two optimizers
    def generator_parameters(self):
        yield from self.generators.parameters()
        yield from self.heads.parameters()

    def discriminator_parameters(self):
        yield from self.discriminators.parameters()

    @property
    def noisy_head(self):
        return self.heads["H_x1" if self.cfg.decoupling else "H"]

    @property
    def virtual_head(self):
        return self.heads["H_y2" if self.cfg.decoupling else "H_F"]

    def translate(self, n: torch.Tensor) -> torch.Tensor:
        g = self.generators
        if self.cfg.decoupling:
            return g["G_x2"](g["G_x1"](n))
        return g["G"](n)

    def noisy_encoder(self):
        return self.generators["G_x1" if self.cfg.decoupling else "G"]


def forward_full(n: torch.Tensor, model: TranslationModel):
    """(r_hat, v_hat, feat_noisy, feat_virtual) for a batch of noisy images.

    In single-stage mode r_hat is None and the reverse generator F plays the
    role of G_y2 for the virtual features."""
    g = model.generators
    if model.cfg.decoupling:
        r_hat, feat_noisy = g["G_x1"].forward_with_features(n)
        v_hat = g["G_x2"](r_hat)
        feat_virtual = g["G_y2"].encode(v_hat)
    else:
        r_hat = None
        v_hat, feat_noisy = g["G"].forward_with_features(n)
        feat_virtual = g["F"].encode(v_hat)
    return r_hat, v_hat, feat_noisy, feat_virtual


# --------------------------------------------------------------------------- literal objectives


def stage_objective(g_st, g_ts, d_t, d_s, s, t, lam_cyc: float = 10.0, lam_pair: float = 0.0, pair_target=None):
    """L_GAN(S,T,D_t,G_st) + L_GAN(T,S,D_s,G_ts) + lam_cyc * L_cyc (+ paired L1).

    ``d_t`` and ``d_s`` return scores in (0, 1). Returns (total, terms)."""
    fake_t = g_st(s)
    fake_s = g_ts(t)
    terms = {
        "gan_st": gan_loss(d_t(fake_t), d_t(t)),
        "gan_ts": gan_loss(d_s(fake_s), d_s(s)),
        "cyc": l1(g_ts(fake_t), s) + l1(g_st(fake_s), t) if lam_cyc else torch.zeros(()),
    }
    total = terms["gan_st"] + terms["gan_ts"] + lam_cyc * terms["cyc"]
    if lam_pair:
        if pair_target is None:
            raise ValueError("paired term requested without pseudo-label targets")
        terms["pair"] = l1(fake_t, pair_target)
        total = total + lam_pair * terms["pair"]
    return total, terms


def _scores(nets, name):
    d = nets[name]
    return d.scores if isinstance(d, Discriminator) else d


def local_objective(nets, n_batch, r_batch, lam_cyc: float = 10.0, lam_pair: float = 0.0, pseudo=None):
    """L_local over a noisy batch and a clean-real batch. ``nets`` maps
    G_x1, G_y1, D_x1, D_y1 to modules or callables (discriminators -> scores)."""
    if n_batch is None or r_batch is None:
        raise ValueError("local objective needs both an N batch and an R batch")
    return stage_objective(
        nets["G_x1"], nets["G_y1"], _scores(nets, "D_x1"), _scores(nets, "D_y1"),
        n_batch, r_batch, lam_cyc, lam_pair, pseudo,
    )


def global_objective(nets, r_batch, v_batch, lam_cyc: float = 10.0):
    """L_global over a clean-real batch and a virtual batch."""
    if r_batch is None or v_batch is None:
        raise ValueError("global objective needs both an R batch and a V batch")
    return stage_objective(
        nets["G_x2"], nets["G_y2"], _scores(nets, "D_x2"), _scores(nets, "D_y2"), r_batch, v_batch, lam_cyc
    )


# --------------------------------------------------------------------------- training losses


@dataclass(frozen=True)
class LossWeights:
    lam_cyc: float = 10.0
    lam_pair: float = 1.0
    lam_nce: float = 1.0
    n_patches: int = 64
    n_negatives: int = 64
    tau: float = 0.07
    non_saturating: bool = True


def _patch_nce(model: TranslationModel, feat_noisy, fake, w: LossWeights, seed: int):
    # patchwise contrast between the translated output and its own input;
    # keys (positive and negatives) come from the frozen input features
    enc = model.noisy_encoder()
    batch = sample_patch_pairs(
        enc.encode(fake), feat_noisy.detach(), w.n_patches, w.n_negatives, seed,
        model.noisy_head, model.noisy_head, negatives_from="virtual",
    )
    return patch_nce_loss(batch, w.tau)


def _resilient(model: TranslationModel, feat_noisy, feat_virtual, w: LossWeights, seed: int):
    # noisy queries against frozen virtual-domain features at the same positions
    batch = sample_patch_pairs(
        feat_noisy, feat_virtual.detach(), w.n_patches, w.n_negatives, seed, model.noisy_head, model.virtual_head
    )
    return resilient_loss(batch, w.tau)


def generator_forward(model: TranslationModel, n, pseudo, v) -> dict:
    """Every generator pass of one step: translations, reverse translations,
    cycle reconstructions and the patch feature maps."""
    g = model.generators
    out = {"n": n, "pseudo": pseudo, "v": v}
    if model.cfg.decoupling:
        out["r_hat"], out["feat_noisy"] = g["G_x1"].forward_with_features(n)
        out["v_hat"] = g["G_x2"](out["r_hat"])
        out["fake_n"] = g["G_y1"](pseudo)
        out["fake_r2"] = g["G_y2"](v)
        out["rec_n"] = g["G_y1"](out["r_hat"])
        out["rec_r"] = g["G_x1"](out["fake_n"])
        out["rec_r2"], out["feat_virtual"] = g["G_y2"].forward_with_features(out["v_hat"])
        out["rec_v"] = g["G_x2"](out["fake_r2"])
        out["fakes"] = {"D_x1": out["r_hat"], "D_y1": out["fake_n"], "D_x2": out["v_hat"], "D_y2": out["fake_r2"]}
    else:
        out["v_hat"], out["feat_noisy"] = g["G"].forward_with_features(n)
        out["fake_n"] = g["F"](v)
        out["rec_n"], out["feat_virtual"] = g["F"].forward_with_features(out["v_hat"])
        out["rec_v"] = g["G"](out["fake_n"])
        out["fakes"] = {"D_V": out["v_hat"], "D_N": out["fake_n"]}
    return out


def generator_losses(model: TranslationModel, out: dict, w: LossWeights, seed: int):
    """Generator-side loss terms from a ``generator_forward`` result, judged by
    the current discriminators. Returns (total, terms)."""
    d = model.discriminators
    ns = w.non_saturating
    n, pseudo, v = out["n"], out["pseudo"], out["v"]
    terms = {f"gan_{name[2:]}": generator_adv_loss(d[name](fake), ns) for name, fake in out["fakes"].items()}
    total = sum(terms.values())
    if model.cfg.decoupling:
        terms["cyc_local"] = l1(out["rec_n"], n) + l1(out["rec_r"], pseudo)
        terms["cyc_global"] = l1(out["rec_r2"], out["r_hat"]) + l1(out["rec_v"], v)
        total = total + w.lam_cyc * (terms["cyc_local"] + terms["cyc_global"])
        if w.lam_pair:
            terms["pair"] = l1(out["r_hat"], pseudo)
            total = total + w.lam_pair * terms["pair"]
        nce_fake = out["r_hat"]
    else:
        terms["cyc"] = l1(out["rec_n"], n) + l1(out["rec_v"], v)
        total = total + w.lam_cyc * terms["cyc"]
        nce_fake = out["v_hat"]
    if w.lam_nce:
        # every variant keeps the single-stage patchwise term; the resilient
        # term is added on top of it
        terms["nce"] = _patch_nce(model, out["feat_noisy"], nce_fake, w, seed)
        total = total + w.lam_nce * terms["nce"]
        if model.cfg.resilient:
            terms["resilient"] = _resilient(model, out["feat_noisy"], out["feat_virtual"], w, seed)
            total = total + w.lam_nce * terms["resilient"]
    return total, terms


def generator_step_losses(model: TranslationModel, n, pseudo, v, w: LossWeights, seed: int):
    """Generator-side loss terms for one batch. Returns (total, terms, fakes)
    where fakes are the detached images the discriminators judge."""
    out = generator_forward(model, n, pseudo, v)
    total, terms = generator_losses(model, out, w, seed)
    return total, terms, {k: x.detach() for k, x in out["fakes"].items()}


def discriminator_step_losses(model: TranslationModel, n, pseudo, v, fakes):
    """Negated GAN values for every discriminator. Returns (total, terms)."""
    d = model.discriminators
    if model.cfg.decoupling:
        reals = {"D_x1": pseudo, "D_y1": n, "D_x2": v, "D_y2": pseudo}
    else:
        reals = {"D_V": v, "D_N": n}
    terms = {f"d_{name}": discriminator_loss(d[name](fakes[name]), d[name](reals[name])) for name in reals}
    return sum(terms.values()), terms
