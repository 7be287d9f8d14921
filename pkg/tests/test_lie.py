import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from modnet.lie import basis_penalty, exp_map, mat_exp

from oracles import taylor_expm


def test_zero_matrix_gives_identity():
    assert torch.equal(mat_exp(torch.zeros(4, 4)), torch.eye(4))


def test_diagonal_exponential():
    M = torch.diag(torch.tensor([math.log(2.0), math.log(3.0)], dtype=torch.float64))
    np.testing.assert_allclose(mat_exp(M).numpy(), np.diag([2.0, 3.0]), rtol=1e-13, atol=1e-13)


def test_matches_taylor_oracle_on_unit_spectral_norm(rng):
    for _ in range(100):
        A = rng.standard_normal((4, 4))
        A /= max(1.0, np.linalg.norm(A, 2)) / rng.uniform(0.05, 1.0)
        assert np.linalg.norm(A, 2) <= 1.0 + 1e-12
        got = mat_exp(torch.from_numpy(A)).numpy()
        ref = taylor_expm(A)
        assert np.linalg.norm(got - ref) / np.linalg.norm(ref) <= 1e-6


def test_large_norm_uses_squaring(rng):
    A = rng.standard_normal((5, 5)) * 4
    got = mat_exp(torch.from_numpy(A)).numpy()
    # Taylor with many terms on the half-scaled matrix, squared once, is an independent route here.
    half = taylor_expm(A / 64, terms=40)
    ref = np.linalg.matrix_power(half, 64)
    assert np.linalg.norm(got - ref) / np.linalg.norm(ref) <= 1e-10


def test_batched_results_do_not_depend_on_neighbours(rng):
    A = torch.from_numpy(rng.standard_normal((3, 4, 4)))
    big = torch.from_numpy(rng.standard_normal((4, 4)) * 20)
    alone = mat_exp(A)
    together = mat_exp(torch.cat([A, big[None]]))[:3]
    assert torch.equal(alone, together)


def test_gradient_matches_central_differences(rng):
    for _ in range(5):
        M = torch.from_numpy(rng.standard_normal((3, 3)))
        G = torch.from_numpy(rng.standard_normal((3, 3)))  # random cotangent
        M.requires_grad_(True)
        (mat_exp(M) * G).sum().backward()
        h = 1e-5
        fd = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                E = torch.zeros(3, 3, dtype=torch.float64)
                E[i, j] = h
                with torch.no_grad():
                    fd[i, j] = ((mat_exp(M + E) - mat_exp(M - E)) * G).sum() / (2 * h)
        rel = np.linalg.norm(M.grad.numpy() - fd) / np.linalg.norm(fd)
        assert rel <= 1e-3


def test_determinant_positive(rng):
    A = torch.from_numpy(rng.standard_normal((20, 4, 4)) * 2)
    assert (torch.linalg.det(mat_exp(A)) > 0).all()


@pytest.mark.parametrize("bad", [torch.zeros(3, 4), torch.zeros(4), torch.tensor([[float("nan"), 0.0], [0.0, 0.0]]),
                                 torch.tensor([[float("inf"), 0.0], [0.0, 0.0]])])
def test_invalid_input_rejected(bad):
    with pytest.raises(ValueError):
        mat_exp(bad)


def test_exp_map_zero_is_identity():
    bases = torch.randn(4, 6, 6)
    assert torch.allclose(exp_map(torch.zeros(4), bases), torch.eye(6), atol=0)


@pytest.mark.parametrize("theta", [0.0, 0.3, -1.2, math.pi / 2, 2.5, 3.0])
def test_exp_map_rotation_closed_form(theta):
    A = torch.tensor([[[0.0, -1.0], [1.0, 0.0]]], dtype=torch.float64)
    got = exp_map(torch.tensor([theta], dtype=torch.float64), A).numpy()
    ref = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    assert np.abs(got - ref).max() <= 1e-8


def test_exp_map_one_hot_selects_single_basis():
    bases = torch.randn(3, 4, 4, dtype=torch.float64)
    z = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    torch.testing.assert_close(exp_map(z, bases), mat_exp(bases[0]), rtol=1e-12, atol=1e-12)


def test_exp_map_length_mismatch():
    with pytest.raises(ValueError):
        exp_map(torch.zeros(3), torch.zeros(4, 2, 2))


def test_basis_penalty_examples():
    N = torch.tensor([[0.0, 1.0], [0.0, 0.0]])
    assert basis_penalty(torch.stack([N, N])).item() == 0.0
    assert basis_penalty(torch.stack([torch.eye(3), torch.eye(3)])).item() == pytest.approx(6.0)
    assert basis_penalty(torch.randn(1, 4, 4)).item() == 0.0


def test_basis_penalty_matches_loop(rng):
    bases = rng.standard_normal((4, 3, 3))
    ref = sum(np.linalg.norm(bases[i] @ bases[j]) ** 2 for i in range(4) for j in range(4) if i != j)
    assert basis_penalty(torch.from_numpy(bases)).item() == pytest.approx(ref, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(4)), st.integers(0, 2 ** 31 - 1))
def test_basis_penalty_permutation_invariant(perm, seed):
    bases = torch.from_numpy(np.random.default_rng(seed).standard_normal((4, 3, 3)))
    a = basis_penalty(bases).item()
    b = basis_penalty(bases[list(perm)]).item()
    assert a == pytest.approx(b, rel=1e-12)
