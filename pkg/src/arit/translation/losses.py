"""Adversarial, cycle-consistency and patch-contrastive losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from arit.errors import DataError

SCORE_EPS = 1e-7


def gan_loss(d_scores_fake: torch.Tensor, d_scores_real: torch.Tensor) -> torch.Tensor:
    """mean log(1 - D(G(s))) + mean log D(t) on scores in (0, 1).

    The discriminator ascends this value and the generator descends its first term."""
    fake = d_scores_fake.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    real = d_scores_real.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    return torch.log1p(-fake).mean() + torch.log(real).mean()


def gan_loss_logits(fake_logits: torch.Tensor, real_logits: torch.Tensor) -> torch.Tensor:
    """Same value as ``gan_loss(sigmoid(fake), sigmoid(real))`` without the clamp."""
    return F.logsigmoid(-fake_logits).mean() + F.logsigmoid(real_logits).mean()


def generator_adv_loss(fake_logits: torch.Tensor, non_saturating: bool = True) -> torch.Tensor:
    """Loss the generator minimizes.

    Literal form: mean log(1 - D(G(s))). Non-saturating form: -mean log D(G(s)),
    which has the same fixed point but does not vanish when D rejects G(s)."""
    if non_saturating:
        return -F.logsigmoid(fake_logits).mean()
    return F.logsigmoid(-fake_logits).mean()


def discriminator_loss(fake_logits: torch.Tensor, real_logits: torch.Tensor) -> torch.Tensor:
    """Negated GAN value, so that minimizing it ascends the objective."""
    return -gan_loss_logits(fake_logits, real_logits)


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def cycle_loss(g_st, g_ts, s_batch: torch.Tensor, t_batch: torch.Tensor) -> torch.Tensor:
    """mean |g_ts(g_st(s)) - s| + mean |g_st(g_ts(t)) - t|."""
    return l1(g_ts(g_st(s_batch)), s_batch) + l1(g_st(g_ts(t_batch)), t_batch)


@dataclass
class PatchFeatureBatch:
    positions: torch.Tensor  # (P,) flat spatial indices
    queries: torch.Tensor  # (B*P, k)
    positives: torch.Tensor  # (B*P, k)
    negatives: torch.Tensor  # (B*P, M, k)
    negative_positions: torch.Tensor  # (M,)


def sample_positions(n_locations: int, P: int, M: int, seed: int):
    if P < 1 or M < 0:
        raise DataError("need P >= 1 query and M >= 0 negatives")
    if P + M > n_locations:
        raise DataError(f"P + M = {P + M} exceeds the {n_locations} available feature locations")
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    perm = torch.randperm(n_locations, generator=gen)
    return perm[:P], perm[P : P + M]


def _gather(feat: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    # (B, C, H, W) -> (B, len(idx), C)
    return feat.flatten(2)[:, :, idx].transpose(1, 2)


def sample_patch_pairs(
    feat_noisy: torch.Tensor,
    feat_virtual: torch.Tensor,
    P: int,
    M: int,
    seed: int,
    head_noisy=None,
    head_virtual=None,
    negatives_from: str = "noisy",
) -> PatchFeatureBatch:
    """Queries and negatives from the noisy map, positives from the same
    positions of the virtual map. Heads default to plain L2 normalization.

    ``negatives_from="virtual"`` draws negatives from the second map instead
    (the patchwise-contrastive convention, where both keys come from one image)."""
    if feat_noisy.shape != feat_virtual.shape:
        raise DataError(f"feature maps differ in shape: {tuple(feat_noisy.shape)} vs {tuple(feat_virtual.shape)}")
    b, _, h, w = feat_noisy.shape
    pos, neg = sample_positions(h * w, P, M, seed)
    head_noisy = head_noisy or (lambda x: F.normalize(x, dim=-1))
    head_virtual = head_virtual or (lambda x: F.normalize(x, dim=-1))
    q = head_noisy(_gather(feat_noisy, pos))  # (B, P, k)
    k_pos = head_virtual(_gather(feat_virtual, pos))
    if negatives_from == "noisy":
        k_neg = head_noisy(_gather(feat_noisy, neg))  # (B, M, k)
    elif negatives_from == "virtual":
        k_neg = head_virtual(_gather(feat_virtual, neg))
    else:
        raise DataError(f"unknown negatives source {negatives_from!r}")
    k = q.shape[-1]
    negatives = k_neg[:, None].expand(b, P, M, k).reshape(b * P, M, k)
    return PatchFeatureBatch(pos, q.reshape(b * P, k), k_pos.reshape(b * P, k), negatives, neg)


def info_nce(batch: PatchFeatureBatch, tau: float = 0.07) -> torch.Tensor:
    """Mean over queries of -log softmax of the positive similarity."""
    if not tau > 0:
        raise DataError(f"temperature must be positive, got {tau}")
    pos = (batch.queries * batch.positives).sum(-1, keepdim=True)  # (Q, 1)
    neg = torch.einsum("qk,qmk->qm", batch.queries, batch.negatives)  # (Q, M)
    logits = torch.cat([pos, neg], dim=1) / tau
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def resilient_loss(batch: PatchFeatureBatch, tau: float = 0.07) -> torch.Tensor:
    """Noise-resilient term: noisy-image queries against same-position
    features of the generated virtual image (build ``batch`` with
    ``sample_patch_pairs(feat_noisy, feat_virtual, ...)``)."""
    return info_nce(batch, tau)


def patch_nce_loss(batch: PatchFeatureBatch, tau: float = 0.07) -> torch.Tensor:
    """Patchwise term of the single-image contrastive baseline: translated-output
    queries against keys from the input image."""
    return info_nce(batch, tau)
