"""Dense linear-algebra and probability primitives.

Every routine works on float64 torch tensors. A ``Matrix`` is a tensor whose
last two dimensions are (rows, cols); any leading dimensions are treated as a
batch and the 2-D semantics apply to each trailing matrix independently.
"""

import logging
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .errors import DomainError, NumericError, ShapeError, shape_of

logger = logging.getLogger(__name__)

DTYPE = torch.float64

# Singular values below PINV_RTOL x largest are treated as zero.
PINV_RTOL = 1e-10

ArrayLike = Union[torch.Tensor, np.ndarray, Sequence]


def make_rng(seed: int) -> np.random.Generator:
    """Return the lab's seeded generator (PCG64, 64-bit output)."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(a: ArrayLike) -> torch.Tensor:
    """Convert to a float64 tensor with at least two dimensions."""
    t = a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a, dtype=np.float64))
    if t.dtype != DTYPE:
        t = t.to(DTYPE)
    if t.dim() < 2:
        raise ShapeError(f"expected a matrix, got shape {shape_of(t)}")
    if t.shape[-1] < 1 or t.shape[-2] < 1:
        raise ShapeError(f"matrix must have at least one row and column, got {shape_of(t)}")
    return t


def ensure_finite(t: torch.Tensor, op: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"{op} produced non-finite values")
    return t


def matmul(a: ArrayLike, b: ArrayLike) -> torch.Tensor:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {shape_of(a)} by {shape_of(b)}")
    return ensure_finite(a @ b, "matmul")


def causal_mask(n: int) -> torch.Tensor:
    """Boolean N x N mask, True where key position <= query position."""
    return torch.tril(torch.ones(n, n, dtype=torch.bool))


def softmax_rows(
    logits: ArrayLike,
    mask: Optional[torch.Tensor] = None,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Row-wise softmax of ``logits / temperature``.

    ``mask`` is boolean with True marking positions a row may attend to; it
    must broadcast against ``logits``. Masked entries come out exactly 0.
    """
    if not temperature > 0:
        raise DomainError(f"softmax_rows: temperature must be positive, got {temperature}")
    z = as_matrix(logits) / temperature
    if mask is not None:
        try:
            torch.broadcast_shapes(mask.shape, z.shape)
        except RuntimeError:
            raise ShapeError(f"softmax_rows: mask {shape_of(mask)} does not fit logits {shape_of(z)}")
        if not bool(mask.any(dim=-1).all()):
            raise DomainError("softmax_rows: a row is fully masked")
        z = z.masked_fill(~mask, float("-inf"))
    return ensure_finite(torch.softmax(z, dim=-1), "softmax_rows")


def frobenius_inner(a: ArrayLike, b: ArrayLike) -> torch.Tensor:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise ShapeError(f"frobenius_inner: shapes differ, {shape_of(a)} vs {shape_of(b)}")
    return (a * b).sum(dim=(-2, -1))


def pinv(p: torch.Tensor, rtol: float = PINV_RTOL) -> torch.Tensor:
    """Moore-Penrose pseudo-inverse through an explicit SVD with a relative cutoff."""
    u, s, vh = torch.linalg.svd(p, full_matrices=False)
    cutoff = rtol * s[..., :1]
    keep = (s > cutoff) & (s > 0)
    s_inv = torch.where(keep, 1.0 / torch.where(keep, s, torch.ones_like(s)), torch.zeros_like(s))
    return vh.transpose(-2, -1) @ (s_inv.unsqueeze(-1) * u.transpose(-2, -1))


def least_squares_rows(p: ArrayLike, t: ArrayLike) -> torch.Tensor:
    """Minimum-norm least-squares solution of ``X @ P = T`` for X."""
    p, t = as_matrix(p), as_matrix(t)
    if t.shape[-1] != p.shape[-1]:
        raise ShapeError(f"least_squares_rows: T {shape_of(t)} and P {shape_of(p)} need equal column counts")
    return ensure_finite(t @ pinv(p), "least_squares_rows")


def simplex_project(v: ArrayLike) -> torch.Tensor:
    """Euclidean projection of each vector (last dim) onto the probability simplex.

    Sort-and-threshold: find the largest k with u_k - (sum_{j<=k} u_j - 1)/k > 0
    on the descending sort u, then shift by that threshold and clip at zero.
    """
    v = v if isinstance(v, torch.Tensor) else torch.as_tensor(np.asarray(v, dtype=np.float64))
    v = v.to(DTYPE)
    if v.dim() == 0 or v.shape[-1] == 0:
        raise DomainError("simplex_project: empty vector")
    n = v.shape[-1]
    u, _ = torch.sort(v, dim=-1, descending=True)
    css = u.cumsum(dim=-1) - 1.0
    k = torch.arange(1, n + 1, dtype=DTYPE)
    rho = (u - css / k > 0).sum(dim=-1, keepdim=True)
    theta = css.gather(-1, rho - 1) / rho.to(DTYPE)
    return torch.clamp(v - theta, min=0.0)


def numerical_rank(a: ArrayLike, rtol: float = 1e-8) -> int:
    s = torch.linalg.svdvals(as_matrix(a))
    if float(s.max()) == 0.0:
        return 0
    return int((s > rtol * s.max()).sum())


def row_entropy(p: ArrayLike) -> torch.Tensor:
    """Shannon entropy (nats) of each row, with 0 ln 0 = 0."""
    return torch.special.entr(as_matrix(p)).sum(dim=-1)


def cosine_similarity_flat(a: ArrayLike, b: ArrayLike) -> torch.Tensor:
    """Cosine similarity of the flattened trailing matrices."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity_flat: shapes differ, {shape_of(a)} vs {shape_of(b)}")
    fa, fb = a.flatten(-2), b.flatten(-2)
    na, nb = fa.norm(dim=-1), fb.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise DomainError("cosine_similarity_flat: zero-norm matrix")
    return (fa * fb).sum(dim=-1) / (na * nb)


def random_matrix(rng: np.random.Generator, rows: int, cols: int, scale: float = 1.0) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal((rows, cols))) * scale


def random_stochastic(
    rng: np.random.Generator,
    rows: int,
    cols: int,
    concentration: float = 1.0,
) -> torch.Tensor:
    """Row-stochastic matrix from a softmax of scaled normal draws."""
    return softmax_rows(random_matrix(rng, rows, cols, concentration))
