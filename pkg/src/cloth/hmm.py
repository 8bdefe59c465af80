"""Higher-order moment matching.

Two routes to the same number:

* the explicit route flattens the q-th moment tensor of every latent vector
  into a length ``p**q`` feature and compares empirical means (only viable for
  tiny ``p``; kept as an oracle and as the baseline in the benchmark);
* the kernel route uses ``<phi_q(z), phi_q(z')> = <z, z'>**q`` so that only
  ``n x n`` Gram matrices of ``p``-vectors are ever formed.

Expectations are plain empirical means over all pairs, diagonal included, so
both routes agree to rounding error.
"""
import string
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, DomainError, ParameterError, ScaleError

MAX_FLAT = 10**6
MAX_ORDER = 8


def check_order(q):
    if int(q) != q or not 1 <= q <= MAX_ORDER:
        raise ParameterError(f"moment order must be an integer in [1, {MAX_ORDER}], got {q}")
    return int(q)


def _batch(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be an (n, p) matrix, got shape {a.shape}")
    return a


def phi_flatten(z, q):
    """Row-major flattening of the q-th outer power of ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError("phi_flatten expects a single vector")
    return phi_flatten_batch(z[None, :], q)[0]


def phi_flatten_batch(z, q):
    z = _batch(z, "latent batch")
    q = check_order(q)
    n, p = z.shape
    if p**q > MAX_FLAT:
        raise ScaleError(f"p**q = {p}**{q} exceeds the flattening bound {MAX_FLAT}")
    out = z
    for _ in range(q - 1):
        out = (out[:, :, None] * z[:, None, :]).reshape(n, -1)
    return out


def hm_bruteforce(u, v, q):
    u, v = _batch(u, "U"), _batch(v, "V")
    if len(u) == 0 or len(v) == 0:
        raise DomainError("moment distance of an empty batch")
    diff = phi_flatten_batch(u, q).mean(axis=0) - phi_flatten_batch(v, q).mean(axis=0)
    return float(diff @ diff)


def _ipow(a, k):
    """a**k for a small nonnegative integer k by repeated multiplication (much faster than pow)."""
    if k == 0:
        return np.ones_like(a)
    out = a
    for _ in range(k - 1):
        out = out * a
    return out


def poly_kernel(a, b, q, scale=1.0):
    return _ipow(scale * (a @ b.T), q)


def hm_kernel(u, v, q, scale=1.0):
    """E_UU[k] + E_VV[k] - 2 E_UV[k] with k(z, z') = (scale * <z, z'>)**q."""
    u, v = _batch(u, "U"), _batch(v, "V")
    if len(u) == 0 or len(v) == 0:
        raise DomainError("moment distance of an empty batch")
    q = check_order(q)
    return float(poly_kernel(u, u, q, scale).mean() + poly_kernel(v, v, q, scale).mean()
                 - 2.0 * poly_kernel(u, v, q, scale).mean())


class CahommResult(NamedTuple):
    loss: float
    grad_source: np.ndarray
    grad_target: np.ndarray
    grad_t_probs: np.ndarray
    present: np.ndarray  # boolean mask over classes


def _class_weights(source_labels, t_probs, n_source):
    labels = np.asarray(source_labels, dtype=np.int64)
    t_probs = np.asarray(t_probs, dtype=np.float64)
    if labels.shape != (n_source,):
        raise DimensionError("one label per source row is required")
    if t_probs.ndim != 2:
        raise DimensionError("transport probabilities must be an (n_target, M) matrix")
    num_classes = t_probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError("source label outside [0, M)")
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    present = counts > 0
    return labels, t_probs, counts, present


def cahomm_loss(source, source_labels, target, t_probs, q, scale=1.0):
    """Class-aware moment matching and its exact gradients.

    ``source_labels`` are 0-based. For every class m present in the source
    batch, the class-m source moments are compared with the target moments
    weighted by ``t_probs[:, m]``; the result is averaged over present classes.
    Absent classes contribute nothing; with no class present the loss is 0.
    """
    zs, zt = _batch(source, "source"), _batch(target, "target")
    q = check_order(q)
    labels, t_probs, counts, present = _class_weights(source_labels, t_probs, len(zs))
    if t_probs.shape[0] != len(zt):
        raise DimensionError("one row of transport probabilities per target row is required")
    n_s, n_t = len(zs), len(zt)
    n_present = int(present.sum())
    if n_present == 0 or n_t == 0:
        return CahommResult(0.0, np.zeros_like(zs), np.zeros_like(zt), np.zeros_like(t_probs), present)

    cls = np.flatnonzero(present)
    # U[i, k] = 1/n_m for source rows of class m; V[a, k] = T_m(z_a) / n_t
    u = np.zeros((n_s, n_present))
    col = np.searchsorted(cls, labels)
    u[np.arange(n_s), col] = 1.0 / counts[labels]
    v = t_probs[:, cls] / n_t

    g_ss, g_tt, g_st = scale * (zs @ zs.T), scale * (zt @ zt.T), scale * (zs @ zt.T)
    p_ss, p_tt, p_st = _ipow(g_ss, q - 1), _ipow(g_tt, q - 1), _ipow(g_st, q - 1)
    k_ss, k_tt, k_st = p_ss * g_ss, p_tt * g_tt, p_st * g_st
    ku_s = k_ss @ u
    kv_t = k_tt @ v
    kst_v = k_st @ v
    per_class = (np.sum(u * ku_s, axis=0) + np.sum(v * kv_t, axis=0) - 2.0 * np.sum(u * kst_v, axis=0))
    w = 1.0 / n_present
    loss = float(w * per_class.sum())

    grad_v = w * (2.0 * kv_t - 2.0 * (k_st.T @ u))
    grad_t = np.zeros_like(t_probs)
    grad_t[:, cls] = grad_v / n_t

    dk_ss = w * (u @ u.T)
    dk_tt = w * (v @ v.T)
    dk_st = -2.0 * w * (u @ v.T)
    # d(scale*G)^q / dG = q * scale * (scale*G)^(q-1)
    bar_ss = dk_ss * (q * scale) * p_ss
    bar_tt = dk_tt * (q * scale) * p_tt
    bar_st = dk_st * (q * scale) * p_st
    # bar_ss and bar_tt are symmetric
    grad_s = 2.0 * (bar_ss @ zs) + bar_st @ zt
    grad_z_t = 2.0 * (bar_tt @ zt) + bar_st.T @ zs
    return CahommResult(loss, grad_s, grad_z_t, grad_t, present)


def _phi_grad(z, g_phi, q):
    """Backpropagate d/d phi_q(z) (rows of length p**q) to d/dz."""
    n, p = z.shape
    if q == 1:
        return g_phi.copy()
    letters = string.ascii_lowercase[:q]
    tensor = g_phi.reshape((n,) + (p,) * q)
    out = np.zeros_like(z)
    for j in range(q):
        others = [c for k, c in enumerate(letters) if k != j]
        spec = "z" + letters + "," + ",".join("z" + c for c in others) + "->z" + letters[j]
        out += np.einsum(spec, tensor, *([z] * (q - 1)), optimize=True)
    return out


def cahomm_bruteforce(source, source_labels, target, t_probs, q, scale=1.0):
    """Same loss and gradients as :func:`cahomm_loss` through explicit flattening.

    The scale enters as ``phi_q(sqrt(scale) z)`` so both routes share one kernel.
    """
    zs, zt = _batch(source, "source"), _batch(target, "target")
    q = check_order(q)
    labels, t_probs, counts, present = _class_weights(source_labels, t_probs, len(zs))
    n_t = len(zt)
    n_present = int(present.sum())
    if n_present == 0 or n_t == 0:
        return CahommResult(0.0, np.zeros_like(zs), np.zeros_like(zt), np.zeros_like(t_probs), present)
    r = np.sqrt(scale)
    phi_s = phi_flatten_batch(r * zs, q)
    phi_t = phi_flatten_batch(r * zt, q)
    w = 1.0 / n_present
    loss = 0.0
    g_phi_s = np.zeros_like(phi_s)
    g_phi_t = np.zeros_like(phi_t)
    grad_t = np.zeros_like(t_probs)
    for m in np.flatnonzero(present):
        rows = labels == m
        diff = phi_s[rows].mean(axis=0) - (t_probs[:, m] @ phi_t) / n_t
        loss += w * float(diff @ diff)
        g_phi_s[rows] += 2.0 * w * diff / counts[m]
        g_phi_t -= 2.0 * w * np.outer(t_probs[:, m], diff) / n_t
        grad_t[:, m] = -2.0 * w * (phi_t @ diff) / n_t
    grad_s = r * _phi_grad(r * zs, g_phi_s, q)
    grad_z_t = r * _phi_grad(r * zt, g_phi_t, q)
    return CahommResult(loss, grad_s, grad_z_t, grad_t, present)
