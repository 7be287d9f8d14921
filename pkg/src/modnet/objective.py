"""Loss terms, candidate scoring and winner selection.

Two routes compute the same quantities. The per-candidate functions
(:func:`independence_loss`, :func:`score_candidates`, :func:`total_loss`)
work on :class:`~modnet.combinator.Candidate` objects one at a time. The
batched engine (:func:`encode_pool`, :func:`score_batch`, :func:`winner_loss`)
evaluates every candidate of every sample in a few large decoder calls and is
what the trainer uses.
"""

import itertools
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch.func import functional_call

from modnet.combinator import members, subset_masks
from modnet.lie import basis_penalty, exp_map
from modnet.modules import reparameterize


@dataclass
class LossWeights:
    img: float = 1.0
    ind: float = 1.0
    kl: float = 1.0
    extra: float = 1.0
    cls: float = 1.0
    feat: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class ScoreBreakdown:
    img: float
    ind: float
    kl: float
    score: float = field(init=False)

    def __post_init__(self):
        self.score = -(self.img + self.ind + self.kl)


@dataclass
class LossBreakdown:
    img: float
    ind: float
    kl: float
    extra: float
    idcls: float = None
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.img + self.ind + self.kl + self.extra
        if self.idcls is not None:
            self.total = self.total + self.idcls

    def as_floats(self):
        def f(v):
            return None if v is None else float(v.detach() if torch.is_tensor(v) else v)
        return {"img": f(self.img), "ind": f(self.ind), "kl": f(self.kl), "extra": f(self.extra),
                "idcls": f(self.idcls), "total": f(self.total)}


def image_loss(x, x_hat):
    """Mean squared error over the trailing (C, H, W) dims."""
    if x.shape[-3:] != x_hat.shape[-3:]:
        raise ValueError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).pow(2).mean(dim=(-3, -2, -1))


def kl_loss(mu, sigma):
    """KL divergence of N(mu, sigma^2) from N(0, I), summed over the last dim."""
    if mu.shape != sigma.shape:
        raise ValueError(f"mu {tuple(mu.shape)} and sigma {tuple(sigma.shape)} differ")
    if (sigma <= 0).any():
        raise ValueError("sigma must be strictly positive")
    return 0.5 * (mu.pow(2) + sigma.pow(2) - 1 - 2 * torch.log(sigma)).sum(dim=-1)


def fd_hessian(f, z, i, j, eps=1e-2):
    """Central mixed second difference of ``f`` at ``z`` along coordinates ``i`` and ``j``."""
    if i == j:
        raise ValueError("diagonal Hessian entries are not estimated (i == j)")
    if eps <= 0:
        raise ValueError(f"step must be positive, got {eps}")
    ei = torch.zeros_like(z)
    ej = torch.zeros_like(z)
    ei[..., i] = eps
    ej[..., j] = eps
    return (f(z + ei + ej) - f(z + ei - ej) - f(z - ei + ej) + f(z - ei - ej)) / (4 * eps * eps)


def block_pairs(sizes):
    """Coordinate pairs for a concatenated latent made of blocks of ``sizes``.

    Returns ``(intra, inter)``: unordered pairs inside one block, and pairs
    across every unordered pair of distinct blocks.
    """
    offsets = [0, *itertools.accumulate(sizes)]
    intra = [(offsets[b] + i, offsets[b] + j)
             for b, size in enumerate(sizes) for i, j in itertools.combinations(range(size), 2)]
    inter = [(offsets[a] + i, offsets[b] + j)
             for a, b in itertools.combinations(range(len(sizes)), 2)
             for i in range(sizes[a]) for j in range(sizes[b])]
    return intra, inter


def subsample(pairs, max_pairs=None, generator=None):
    """Pick at most ``max_pairs`` pairs at random; the weight rescales their sum to the full-set total."""
    if max_pairs is None or len(pairs) <= max_pairs:
        return list(pairs), 1.0
    idx = torch.randperm(len(pairs), generator=generator)[:max_pairs].tolist()
    return [pairs[t] for t in sorted(idx)], len(pairs) / max_pairs


def independence_penalty(probe, z, sizes, eps=1e-2, max_pairs=None, generator=None):
    """Mean over probe outputs of the summed squared mixed partials.

    ``probe`` maps the concatenated latent ``z`` to an output tensor (an
    image, or anything else). Intra-block and cross-block pairs are
    sub-sampled separately.
    """
    intra, inter = block_pairs(sizes)
    total = z.new_zeros(())
    for pairs in (intra, inter):
        chosen, weight = subsample(pairs, max_pairs, generator)
        for i, j in chosen:
            total = total + weight * fd_hessian(probe, z, i, j, eps).pow(2).mean()
    return total


def independence_loss(decoder, candidate, eps=1e-2, max_pairs=None, generator=None):
    """Intra- and inter-module independence penalty for one candidate."""
    mods = candidate.id.modules
    sizes = [candidate.latents[i].z.shape[-1] for i in mods]
    zcat = torch.cat([candidate.latents[i].z for i in mods])

    def probe(zc):
        parts = dict(zip(mods, torch.split(zc, sizes)))
        return decoder(candidate.compose(parts))

    return independence_penalty(probe, zcat, sizes, eps, max_pairs, generator)


@torch.no_grad()
def score_candidates(x, candidates, decoder, eps=1e-2, weights=None, max_pairs=None, generator=None):
    """Score each candidate as ``-(img + ind + kl)``, KL over its own modules only.

    Decodes candidates that have no reconstruction yet. Terms are scaled by
    ``weights`` (all 1 by default); a zero weight skips that term.
    """
    w = weights or LossWeights()
    out = []
    for cand in candidates:
        if cand.reconstruction is None:
            cand.reconstruction = decoder(cand.transform)
        img = w.img * float(image_loss(x, cand.reconstruction)) if w.img else 0.0
        ind = w.ind * float(independence_loss(decoder, cand, eps, max_pairs, generator)) if w.ind else 0.0
        kl = w.kl * sum(float(kl_loss(lat.mu, lat.sigma)) for lat in cand.latents.values()) if w.kl else 0.0
        sb = ScoreBreakdown(img, ind, kl)
        cand.score = sb.score
        out.append(sb)
    return out


def select_winner(scores):
    """Index (0-based) of the highest score; ties go to the lowest index."""
    values = [s.score if isinstance(s, ScoreBreakdown) else float(s) for s in scores]
    if not values:
        raise ValueError("no candidates to select from")
    values = [v if math.isfinite(v) else -math.inf for v in values]
    best = 0
    for idx, v in enumerate(values):
        if v > values[best]:
            best = idx
    return best


def _frozen_features(classifier, T):
    """Penultimate features with the classifier's own parameters cut from the graph."""
    params = {k: v.detach() for k, v in classifier.body.named_parameters()}
    return functional_call(classifier.body, params, (T.reshape(*T.shape[:-2], -1),))


def id_classifier_loss(classifier, T_identity, T_winner, label):
    """Cross-entropy of the identity transform's shape prediction, plus feature matching.

    ``ce`` trains the classifier and the identity matrix. ``feat_l2`` compares
    penultimate features of the identity and the combined transform with the
    classifier frozen and the identity side as a fixed target, so only
    whatever produced ``T_winner`` receives its gradient.
    """
    label = torch.as_tensor(label, dtype=torch.long)
    if (label < 0).any() or (label >= classifier.num_classes).any():
        raise ValueError(f"label out of range [0, {classifier.num_classes})")
    logits = classifier(T_identity)
    if logits.dim() == 1:
        ce = F.cross_entropy(logits[None], label.reshape(1))
    else:
        ce = F.cross_entropy(logits, label.reshape(-1))
    target = _frozen_features(classifier, T_identity.detach()).detach()
    feat = _frozen_features(classifier, T_winner)
    feat_l2 = (feat - target).pow(2).sum(dim=-1).mean()
    return ce, feat_l2


def total_loss(x, winner, pool, weights=None, label=None, eps=1e-2, max_pairs=None, generator=None):
    """Training loss of one winning candidate as a :class:`LossBreakdown` of tensors."""
    w = weights or LossWeights()
    recon = pool.decoder(winner.transform)
    img = w.img * image_loss(x, recon)
    ind = w.ind * independence_loss(pool.decoder, winner, eps, max_pairs, generator) if w.ind else img * 0
    kl = w.kl * sum(kl_loss(lat.mu, lat.sigma) for lat in winner.latents.values())
    extra = w.extra * sum(basis_penalty(pool.comps[i].bases) for i in winner.id.modules)
    idcls = None
    if pool.classifier is not None and label is not None:
        T_id = winner.identity_transform
        T_comp = _compositional_part(winner)
        ce, feat_l2 = id_classifier_loss(pool.classifier, T_id, T_comp @ T_id.detach(), label)
        idcls = w.cls * ce + w.feat * feat_l2
    return LossBreakdown(img, ind, kl, extra, idcls)


def _compositional_part(candidate):
    out = None
    for i in candidate.id.modules:
        T = exp_map(candidate.latents[i].z, candidate.latents[i].bases)
        out = T if out is None else out @ T
    return out


# ---------------------------------------------------------------------------
# Batched engine


class NonFiniteError(ValueError):
    """Raised when a forward pass produces NaN or infinite values."""


@dataclass
class PoolLatents:
    mu: torch.Tensor      # (B, m, k)
    sigma: torch.Tensor   # (B, m, k)
    z: torch.Tensor       # (B, m, k)
    T: torch.Tensor       # (B, m, u, u)
    bases: torch.Tensor   # (m, k, u, u)


def encode_pool(pool, x, noise):
    """Run every compositional module on ``x`` with reparameterization noise ``(B, m, k)``."""
    mus, sigmas, zs, Ts = [], [], [], []
    for i, comp in enumerate(pool.comps):
        mu, sigma = comp.encode(x)
        z = reparameterize(mu, sigma, noise[:, i])
        if not torch.isfinite(z).all():
            raise NonFiniteError(f"compositional module {i} produced non-finite latents")
        mus.append(mu)
        sigmas.append(sigma)
        zs.append(z)
        Ts.append(exp_map(z, comp.bases))
    return PoolLatents(torch.stack(mus, 1), torch.stack(sigmas, 1), torch.stack(zs, 1), torch.stack(Ts, 1),
                       pool.bases)


@dataclass
class PairPlan:
    """Sampled Hessian pairs for one subset, in (module, coordinate) form."""

    pairs: list
    weights: list


def plan_pairs(m, k, max_pairs=None, generator=None):
    """Draw the Hessian pairs used this step for every subset mask.

    Scoring and the winner's loss both read the same plan, so the winner's
    scored independence term is the one it is trained on.
    """
    plans = {}
    for mask in subset_masks(m):
        mods = members(mask)
        intra, inter = block_pairs([k] * len(mods))
        pairs, weights = [], []
        for group in (intra, inter):
            chosen, wgt = subsample(group, max_pairs, generator)
            for a, b in chosen:
                pairs.append(((mods[a // k], a % k), (mods[b // k], b % k)))
                weights.append(wgt)
        plans[mask] = PairPlan(pairs, weights)
    return plans


_SIGNS = ((1, 1), (1, -1), (-1, 1), (-1, -1))


def _fold(mats, mods):
    out = mats[..., mods[0], :, :]
    for i in mods[1:]:
        out = out @ mats[..., i, :, :]
    return out


def subset_terms(decoder, x, lat, mask, idents, plan=None, eps=1e-2, need_ind=True):
    """Reconstruction, image loss and independence penalty for one subset.

    ``idents`` is ``(J, u, u)`` shared across the batch or ``(B, J, u, u)``
    per sample. Returns ``recon (B, J, C, H, W)``, ``img (B, J)``, ``ind (B, J)``.
    """
    mods = members(mask)
    B = x.shape[0]
    prod = _fold(lat.T, mods)
    if idents.dim() == 3:
        idents = idents.expand(B, *idents.shape)
    cand = prod[:, None] @ idents
    recon = decoder(cand)
    img = image_loss(x[:, None], recon)
    ind = img.new_zeros(img.shape)
    if need_ind and plan is not None and plan.pairs:
        q = len(plan.pairs)
        m, k = lat.z.shape[1], lat.z.shape[2]
        delta = lat.z.new_zeros(q, 4, m, k)
        for p, ((a, i), (b, j)) in enumerate(plan.pairs):
            for s, (sa, sb) in enumerate(_SIGNS):
                delta[p, s, a, i] += sa * eps
                delta[p, s, b, j] += sb * eps
        zp = lat.z[:, None, None] + delta                                  # (B, q, 4, m, k)
        Tp = torch.stack([exp_map(zp[..., i, :], lat.bases[i]) if i in mods else lat.T[:, None, None, i].expand(B, q, 4, *lat.T.shape[-2:])
                          for i in range(m)], dim=-3)
        prod_p = _fold(Tp, mods)                                            # (B, q, 4, u, u)
        out = decoder(prod_p[:, :, :, None] @ idents[:, None, None])      # (B, q, 4, J, C, H, W)
        hess = (out[:, :, 0] - out[:, :, 1] - out[:, :, 2] + out[:, :, 3]) / (4 * eps * eps)
        per_pair = hess.pow(2).mean(dim=(-3, -2, -1))                     # (B, q, J)
        wts = torch.tensor(plan.weights, dtype=per_pair.dtype, device=per_pair.device)
        ind = (per_pair * wts[None, :, None]).sum(dim=1)
    return recon, img, ind


@dataclass
class BatchScores:
    img: torch.Tensor     # (B, N) weighted terms, N = (2**m - 1) * n
    ind: torch.Tensor
    kl: torch.Tensor

    @property
    def score(self):
        return -(self.img + self.ind + self.kl)

    def winners(self):
        """Per-sample argmax, ties to the lowest index; non-finite scores never win unless all are."""
        s = torch.nan_to_num(self.score, nan=-math.inf, posinf=-math.inf)
        return torch.argmax(s, dim=1)

    def breakdown(self, b, idx):
        return ScoreBreakdown(float(self.img[b, idx]), float(self.ind[b, idx]), float(self.kl[b, idx]))


def module_kl(lat):
    return kl_loss(lat.mu, lat.sigma)  # (B, m)


@torch.no_grad()
def score_batch(pool, x, lat, plans, weights=None, eps=1e-2):
    """Weighted img/ind/kl terms for every candidate of every sample."""
    w = weights or LossWeights()
    idents = pool.identity_matrices()
    kl_mod = module_kl(lat)
    imgs, inds, kls = [], [], []
    for mask in subset_masks(pool.m):
        _, img, ind = subset_terms(pool.decoder, x, lat, mask, idents, plans.get(mask), eps, need_ind=w.ind > 0)
        kl = kl_mod[:, list(members(mask))].sum(dim=1, keepdim=True).expand_as(img)
        imgs.append(w.img * img)
        inds.append(w.ind * ind)
        kls.append(w.kl * kl)
    return BatchScores(torch.cat(imgs, 1), torch.cat(inds, 1), torch.cat(kls, 1))


def winner_loss(pool, x, lat, winners, plans, weights=None, eps=1e-2, labels=None):
    """Mean over the batch of each sample's winning-candidate loss (with gradients).

    Samples are grouped by winning subset so that each group needs one
    decoder call. Returns ``(LossBreakdown of scalar tensors, per-sample dict)``.
    """
    w = weights or LossWeights()
    B = x.shape[0]
    n = pool.n
    masks = subset_masks(pool.m)
    winners = torch.as_tensor(winners)
    subset_idx = winners // n
    ident_idx = winners % n
    idents = pool.identity_matrices()
    kl_mod = module_kl(lat)

    img = x.new_zeros(B)
    ind = x.new_zeros(B)
    kl = x.new_zeros(B)
    extra = x.new_zeros(B)
    for s in torch.unique(subset_idx).tolist():
        rows = (subset_idx == s).nonzero(as_tuple=True)[0]
        mask = masks[s]
        mods = list(members(mask))
        sub = PoolLatents(lat.mu[rows], lat.sigma[rows], lat.z[rows], lat.T[rows], lat.bases)
        T_id = idents[ident_idx[rows]][:, None]                           # (b, 1, u, u)
        _, g_img, g_ind = subset_terms(pool.decoder, x[rows], sub, mask, T_id, plans.get(mask), eps,
                                       need_ind=w.ind > 0)
        img = img.index_put((rows,), g_img[:, 0])
        ind = ind.index_put((rows,), g_ind[:, 0])
        kl = kl.index_put((rows,), kl_mod[rows][:, mods].sum(dim=1))
        pen = sum(basis_penalty(pool.comps[i].bases) for i in mods)
        extra = extra.index_put((rows,), pen.expand(len(rows)))

    idcls = None
    per_sample = {"img": w.img * img, "ind": w.ind * ind, "kl": w.kl * kl, "extra": w.extra * extra}
    if pool.classifier is not None and labels is not None:
        T_id = idents[ident_idx]
        T_comp = torch.stack([_fold(lat.T[b], list(members(masks[int(subset_idx[b])]))) for b in range(B)])
        labels = torch.as_tensor(labels, dtype=torch.long)
        if (labels < 0).any() or (labels >= pool.classifier.num_classes).any():
            raise ValueError(f"label out of range [0, {pool.classifier.num_classes})")
        ce = F.cross_entropy(pool.classifier(T_id), labels, reduction="none")
        target = _frozen_features(pool.classifier, T_id.detach()).detach()
        feat = _frozen_features(pool.classifier, T_comp @ T_id.detach())
        feat_l2 = (feat - target).pow(2).sum(dim=-1)
        per_sample["idcls"] = w.cls * ce + w.feat * feat_l2
        idcls = per_sample["idcls"].mean()

    loss = LossBreakdown(per_sample["img"].mean(), per_sample["ind"].mean(), per_sample["kl"].mean(),
                         per_sample["extra"].mean(), idcls)
    return loss, per_sample


def sample_noise(B, m, k, generator=None, dtype=None):
    return torch.randn(B, m, k, generator=generator, dtype=dtype or torch.get_default_dtype())


def finite(value):
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    return math.isfinite(v)
