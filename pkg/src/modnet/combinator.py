"""Exhaustive enumeration of candidate transforms.

A candidate is a non-empty subset of compositional transforms multiplied in
ascending module order, right-multiplied by one identity transform. Subsets
are ordered by (popcount, mask) and identities vary fastest, so candidate
``s * n + j`` pairs subset ``s`` with identity ``j``.
"""

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import torch

from modnet.lie import exp_map

MAX_MODULES = 6


@dataclass(frozen=True)
class CombinationId:
    """``mask`` bit ``i`` set means compositional module ``i`` (0-based) participates."""

    mask: int
    identity: int

    def __post_init__(self):
        if self.mask <= 0:
            raise ValueError("subset mask must be non-empty")
        if self.identity < 0:
            raise ValueError(f"identity index must be >= 0, got {self.identity}")

    @property
    def modules(self):
        return members(self.mask)


@dataclass
class Latent:
    mu: torch.Tensor
    sigma: torch.Tensor
    z: torch.Tensor
    bases: torch.Tensor


@dataclass
class Candidate:
    id: CombinationId
    transform: torch.Tensor
    latents: dict = field(default_factory=dict)
    identity_transform: torch.Tensor = None
    reconstruction: torch.Tensor = None
    score: float = None

    def compose(self, zs):
        """Rebuild the candidate transform from (possibly perturbed) per-module latents.

        ``zs`` maps module index to a latent vector; modules not given keep
        their stored ``z``.
        """
        out = None
        for i in self.id.modules:
            T = exp_map(zs.get(i, self.latents[i].z), self.latents[i].bases)
            out = T if out is None else out @ T
        if self.identity_transform is not None:
            out = out @ self.identity_transform
        return out


def members(mask):
    return tuple(i for i in range(mask.bit_length()) if mask >> i & 1)


@lru_cache(maxsize=None)
def subset_masks(m):
    """All non-empty masks over ``m`` modules, ordered by (popcount, mask)."""
    if m < 1:
        raise ValueError(f"need at least one compositional module, got {m}")
    if m > MAX_MODULES:
        warnings.warn(f"m={m} gives {2 ** m - 1} subsets per identity; cost grows exponentially", stacklevel=2)
    return tuple(sorted(range(1, 2 ** m), key=lambda s: (bin(s).count("1"), s)))


def subset_products(transforms):
    """Products for every subset, stacked along a new axis.

    ``transforms`` has shape ``(..., m, u, u)``; returns ``(masks, products)``
    with products of shape ``(..., 2**m - 1, u, u)``. Each product extends the
    product of the mask without its highest bit, so the fold is ascending.
    """
    m = transforms.shape[-3]
    masks = subset_masks(m)
    cache = {}
    for s in masks:
        top = s.bit_length() - 1
        rest = s & ~(1 << top)
        T_top = transforms[..., top, :, :]
        cache[s] = T_top if rest == 0 else cache[rest] @ T_top
    return masks, torch.stack([cache[s] for s in masks], dim=-3)


def enumerate_compositional(transforms):
    """List of ``(mask, product)`` for every non-empty subset of ``m`` transforms."""
    if len(transforms) == 0:
        raise ValueError("need at least one compositional transform")
    stacked = torch.stack(list(transforms)) if not isinstance(transforms, torch.Tensor) else transforms
    masks, products = subset_products(stacked)
    return [(s, products[idx]) for idx, s in enumerate(masks)]


def candidate_transforms(products, idents):
    """``products`` ``(..., S, u, u)`` times ``idents`` ``(n, u, u)`` -> ``(..., S * n, u, u)``."""
    if idents.shape[0] == 0:
        raise ValueError("need at least one identity transform")
    out = products.unsqueeze(-3) @ idents
    return out.reshape(*products.shape[:-3], -1, *products.shape[-2:])


def pair_with_identities(comps, idents, latents=None):
    """Cross every ``(mask, product)`` with every identity transform.

    ``latents`` optionally maps module index to :class:`Latent`, attached to
    each candidate for the modules in its subset.
    """
    if len(idents) == 0:
        raise ValueError("need at least one identity transform")
    out = []
    for mask, product in comps:
        for j, T_id in enumerate(idents):
            cand_latents = {i: latents[i] for i in members(mask)} if latents else {}
            out.append(Candidate(CombinationId(mask, j), product @ T_id, cand_latents, T_id))
    return out


def candidate_ids(m, n):
    return [CombinationId(s, j) for s in subset_masks(m) for j in range(n)]
