"""Information-theoretic primitives used by the debiasing methods and the audit metrics.

Everything here accepts either numpy arrays or torch tensors. Tensor inputs stay
inside the autograd graph, so the same functions serve as training losses.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .errors import InvalidInputError, NumericalError

PROB_TOL = 1e-9


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_finite(t: torch.Tensor, name: str) -> None:
    if not bool(torch.isfinite(t.detach()).all()):
        raise InvalidInputError(f"{name} contains non-finite entries")


def rate_distortion(Z, eps: float, gram: str = "auto") -> torch.Tensor:
    """Coding rate ``0.5 * log2 det(I + d/(n eps^2) Z Z^T)`` of the rows of ``Z``.

    The log-determinant is taken from a Cholesky factor of a Gram matrix:
    ``gram="n"`` uses Z Z^T, ``gram="d"`` uses Z^T Z, and ``"auto"`` picks the
    smaller one. All three agree by Sylvester's identity. Returns a 0-dim
    tensor that supports backprop.
    """
    if gram not in ("auto", "n", "d"):
        raise InvalidInputError(f"gram must be 'auto', 'n' or 'd', got {gram!r}")
    if not eps > 0:
        raise InvalidInputError(f"eps must be positive, got {eps}")
    Z = _as_tensor(Z)
    if Z.ndim != 2 or Z.shape[0] < 1 or Z.shape[1] < 1:
        raise InvalidInputError(f"Z must be a non-empty 2-D matrix, got shape {tuple(Z.shape)}")
    _check_finite(Z, "Z")
    n, d = Z.shape
    scale = d / (n * eps * eps)
    use_n = n <= d if gram == "auto" else gram == "n"
    g = Z @ Z.T if use_n else Z.T @ Z
    mat = torch.eye(g.shape[0], dtype=Z.dtype, device=Z.device) + scale * g
    chol, info = torch.linalg.cholesky_ex(mat)
    if int(info) != 0 or not bool(torch.isfinite(chol.detach()).all()):
        with torch.no_grad():
            m = mat.detach()
            cond = float(torch.linalg.cond(m)) if bool(torch.isfinite(m).all()) else math.inf
        raise NumericalError(
            f"Cholesky factorization failed (condition number {cond:.3e})", condition_number=cond
        )
    # log det = 2 * sum(log diag L); the leading 0.5 cancels the 2
    return torch.log(torch.diagonal(chol)).sum() / math.log(2.0)


def _check_distribution(p) -> torch.Tensor:
    t = _as_tensor(p)
    if t.ndim != 1 or t.shape[0] < 2:
        raise InvalidInputError(f"distribution needs a 1-D vector over >= 2 classes, got shape {tuple(t.shape)}")
    v = t.detach()
    if not bool(torch.isfinite(v).all()) or bool((v < 0).any()):
        raise InvalidInputError("distribution entries must be finite and non-negative")
    if abs(float(v.sum()) - 1.0) > PROB_TOL:
        raise InvalidInputError(f"distribution sums to {float(v.sum())!r}, not 1")
    return t


def _xlogy(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    # 0 * log 0 = 0
    return torch.xlogy(p, q)


def entropy(p):
    """Shannon entropy in nats. Returns a float for array input, a tensor for tensor input."""
    is_tensor = isinstance(p, torch.Tensor)
    t = _check_distribution(p)
    h = -_xlogy(t, t).sum()
    return h if is_tensor else float(h)


def kl_from_uniform(p):
    """KL(p || uniform) in nats, i.e. ``sum p_i log(k p_i)``."""
    is_tensor = isinstance(p, torch.Tensor)
    t = _check_distribution(p)
    k = t.shape[0]
    kl = _xlogy(t, t * k).sum()
    return kl if is_tensor else float(kl)


def _abs_scale(t: torch.Tensor) -> torch.Tensor:
    s = t.detach().abs().amax(-1, keepdim=True)
    return torch.where(s > 0, s, torch.ones_like(s))


def cosine_sim(a, b):
    """Cosine similarity along the last axis; 0 when either vector has zero norm.

    Works row-wise on batches: shapes ``(..., d)`` broadcast against each other.
    """
    is_tensor = isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor)
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta.shape[-1] != tb.shape[-1]:
        raise InvalidInputError(f"dimension mismatch: {ta.shape[-1]} vs {tb.shape[-1]}")
    # cosine is scale-invariant; dividing by a detached max-abs keeps squared norms
    # out of the subnormal/overflow range without changing the value or the gradient
    ta, tb = ta / _abs_scale(ta), tb / _abs_scale(tb)
    dot = (ta * tb).sum(-1)
    na = torch.linalg.vector_norm(ta, dim=-1)
    nb = torch.linalg.vector_norm(tb, dim=-1)
    denom = na * nb
    zero = denom == 0
    # guard the division so the masked branch never produces nan gradients
    safe = torch.where(zero, torch.ones_like(denom), denom)
    out = torch.where(zero, torch.zeros_like(dot), dot / safe)
    out = out.clamp(-1.0, 1.0)
    if is_tensor:
        return out
    return float(out) if out.ndim == 0 else out.numpy()
