"""Matrix exponential and Lie-algebra helpers (torch, differentiable)."""

import math

import torch

# Scaled matrices are kept at or below this 1-norm before the series is summed.
_SCALE_TARGET = 0.5
_MAX_TERMS = 30


def _check_square(M, name="M"):
    if not isinstance(M, torch.Tensor):
        raise TypeError(f"{name} must be a torch.Tensor, got {type(M).__name__}")
    if M.dim() < 2 or M.shape[-1] != M.shape[-2]:
        raise ValueError(f"{name} must be square in its last two dims, got shape {tuple(M.shape)}")
    if not torch.isfinite(M).all():
        raise ValueError(f"{name} has non-finite entries")


def _series_terms(dtype):
    """Smallest order whose remainder bound at the scaling target drops below epsilon."""
    eps = torch.finfo(dtype).eps
    q = 1
    while _SCALE_TARGET ** (q + 1) / math.factorial(q + 1) > eps and q < _MAX_TERMS:
        q += 1
    return q


def mat_exp(M):
    """Matrix exponential by scaling and squaring with a truncated Taylor series.

    Works on a single ``(u, u)`` matrix or any batch ``(..., u, u)``. Each
    matrix is scaled by its own power of two until its 1-norm is at most 0.5,
    the series is cut where the remainder falls below the dtype's epsilon, and
    the result is squared back. Results do not depend on the other matrices in
    the batch, and autograd differentiates through every step.
    """
    _check_square(M)
    if not M.is_floating_point():
        M = M.to(torch.get_default_dtype())
    u = M.shape[-1]
    eye = torch.eye(u, dtype=M.dtype, device=M.device)

    norms = M.detach().abs().sum(dim=-2).amax(dim=-1)
    squarings = torch.clamp(torch.ceil(torch.log2(norms / _SCALE_TARGET)), min=0)
    squarings = torch.nan_to_num(squarings, nan=0.0, neginf=0.0)
    A = M / torch.exp2(squarings)[..., None, None]

    result = eye + A
    term = A
    for q in range(2, _series_terms(M.dtype) + 1):
        term = term @ A / q
        result = result + term

    steps = int(squarings.max().item()) if squarings.numel() else 0
    for r in range(steps):
        active = (squarings > r)[..., None, None]
        result = torch.where(active, result @ result, result)
    return result


def exp_map(z, bases):
    """Map latent coordinates to a group element, ``exp(sum_i z_i A_i)``.

    ``z`` has shape ``(..., k)`` and ``bases`` shape ``(k, u, u)``; the result
    has shape ``(..., u, u)``.
    """
    if bases.dim() != 3 or bases.shape[-1] != bases.shape[-2]:
        raise ValueError(f"bases must have shape (k, u, u), got {tuple(bases.shape)}")
    if z.shape[-1] != bases.shape[0]:
        raise ValueError(f"latent length {z.shape[-1]} does not match {bases.shape[0]} bases")
    algebra = torch.einsum("...k,kij->...ij", z.to(bases.dtype), bases)
    return mat_exp(algebra)


def basis_penalty(bases):
    """Sum of squared Frobenius norms of ``A_i A_j`` over ordered pairs ``i != j``.

    Zero exactly when every cross product of distinct generators vanishes.
    """
    if bases.dim() != 3:
        raise ValueError(f"bases must have shape (k, u, u), got {tuple(bases.shape)}")
    k = bases.shape[0]
    if k < 2:
        return bases.sum() * 0.0
    products = torch.einsum("aij,bjk->abik", bases, bases)
    off_diag = ~torch.eye(k, dtype=torch.bool, device=bases.device)
    return products[off_diag].pow(2).sum()
