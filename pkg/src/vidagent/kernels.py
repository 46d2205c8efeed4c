"""Batch numeric kernels for group advantages, clipped surrogate and KL.

Each kernel exists twice: a numba ``@njit`` loop and a vectorized numpy
version. Groups are packed flat with an ``offsets`` array (group g spans
``offsets[g]:offsets[g+1]``) so many prompt groups go through one call.

The numba path is used when numba imports and ``VIDAGENT_NO_NUMBA`` is
unset or ``0``. Both paths agree to within float rounding.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

KL_SERIES_CUTOFF = 1e-4

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


# --- numpy ---------------------------------------------------------------

def _segments(offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    counts = np.diff(offsets)
    if np.any(counts < 1):
        raise ValueError("every group needs at least one element")
    return offsets[:-1], counts


def group_advantages_np(rewards, offsets, std_floor):
    r = np.asarray(rewards, dtype=np.float64)
    starts, counts = _segments(np.asarray(offsets, dtype=np.int64))
    means = np.add.reduceat(r, starts) / counts
    dev = r - np.repeat(means, counts)
    # second pass removes the rounding left in the first mean
    corr = np.add.reduceat(dev, starts) / counts
    means = means + corr
    dev = dev - np.repeat(corr, counts)
    stds = np.sqrt(np.add.reduceat(dev * dev, starts) / counts)
    flat = np.maximum.reduceat(r, starts) == np.minimum.reduceat(r, starts)
    stds[flat] = 0.0
    dev[np.repeat(flat, counts)] = 0.0
    adv = dev / np.repeat(np.maximum(stds, std_floor), counts)
    return adv, means, stds


def clipped_surrogate_np(ratios, advantages, offsets, eps):
    rho = np.asarray(ratios, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    starts, counts = _segments(np.asarray(offsets, dtype=np.int64))
    terms = np.minimum(rho * a, np.clip(rho, 1.0 - eps, 1.0 + eps) * a)
    return np.add.reduceat(terms, starts) / counts


def _k3_np(d: np.ndarray) -> np.ndarray:
    small = np.abs(d) < KL_SERIES_CUTOFF
    out = np.empty_like(d)
    ds = d[small]
    out[small] = ds * ds * (0.5 + ds / 6.0)
    dl = d[~small]
    out[~small] = np.expm1(dl) - dl
    return out


def kl_k3_np(logp_theta, logp_ref):
    d = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_theta, dtype=np.float64)
    return float(np.mean(_k3_np(d)))


# --- numba ---------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def group_advantages_nb(rewards, offsets, std_floor):
        n_groups = offsets.shape[0] - 1
        adv = np.empty(rewards.shape[0], dtype=np.float64)
        means = np.empty(n_groups, dtype=np.float64)
        stds = np.empty(n_groups, dtype=np.float64)
        for g in range(n_groups):
            lo = offsets[g]
            hi = offsets[g + 1]
            n = hi - lo
            if n < 1:
                raise ValueError("every group needs at least one element")
            s = 0.0
            rmin = rewards[lo]
            rmax = rewards[lo]
            for i in range(lo, hi):
                s += rewards[i]
                rmin = min(rmin, rewards[i])
                rmax = max(rmax, rewards[i])
            mu = s / n
            c = 0.0
            for i in range(lo, hi):
                c += rewards[i] - mu
            mu += c / n
            means[g] = mu
            if rmin == rmax:
                stds[g] = 0.0
                for i in range(lo, hi):
                    adv[i] = 0.0
                continue
            ss = 0.0
            for i in range(lo, hi):
                d = rewards[i] - mu
                ss += d * d
            sd = np.sqrt(ss / n)
            stds[g] = sd
            denom = max(sd, std_floor)
            for i in range(lo, hi):
                adv[i] = (rewards[i] - mu) / denom
        return adv, means, stds

    @njit(cache=True)
    def clipped_surrogate_nb(ratios, advantages, offsets, eps):
        n_groups = offsets.shape[0] - 1
        out = np.empty(n_groups, dtype=np.float64)
        lo_clip = 1.0 - eps
        hi_clip = 1.0 + eps
        for g in range(n_groups):
            lo = offsets[g]
            hi = offsets[g + 1]
            if hi - lo < 1:
                raise ValueError("every group needs at least one element")
            acc = 0.0
            for i in range(lo, hi):
                rho = ratios[i]
                a = advantages[i]
                clipped = min(max(rho, lo_clip), hi_clip)
                acc += min(rho * a, clipped * a)
            out[g] = acc / (hi - lo)
        return out

    @njit(cache=True)
    def kl_k3_nb(logp_theta, logp_ref):
        n = logp_theta.shape[0]
        acc = 0.0
        for i in range(n):
            d = logp_ref[i] - logp_theta[i]
            if abs(d) < KL_SERIES_CUTOFF:
                acc += d * d * (0.5 + d / 6.0)
            else:
                acc += np.expm1(d) - d
        return acc / n


def _numba_wrapped():
    def adv(rewards, offsets, std_floor):
        return group_advantages_nb(
            np.ascontiguousarray(rewards, dtype=np.float64),
            np.ascontiguousarray(offsets, dtype=np.int64),
            float(std_floor),
        )

    def surr(ratios, advantages, offsets, eps):
        return clipped_surrogate_nb(
            np.ascontiguousarray(ratios, dtype=np.float64),
            np.ascontiguousarray(advantages, dtype=np.float64),
            np.ascontiguousarray(offsets, dtype=np.int64),
            float(eps),
        )

    def kl(logp_theta, logp_ref):
        return float(kl_k3_nb(
            np.ascontiguousarray(logp_theta, dtype=np.float64),
            np.ascontiguousarray(logp_ref, dtype=np.float64),
        ))

    return SimpleNamespace(name="numba", group_advantages=adv, clipped_surrogate=surr, kl_k3=kl)


NUMPY = SimpleNamespace(
    name="numpy",
    group_advantages=group_advantages_np,
    clipped_surrogate=clipped_surrogate_np,
    kl_k3=kl_k3_np,
)
NUMBA = _numba_wrapped() if HAVE_NUMBA else None


def available() -> list[str]:
    return ["numpy"] + (["numba"] if HAVE_NUMBA else [])


def get(name: str | None = None) -> SimpleNamespace:
    """Kernel set by name, or the default chosen from the environment."""
    if name is None:
        disabled = os.environ.get("VIDAGENT_NO_NUMBA", "0") not in ("", "0")
        name = "numba" if HAVE_NUMBA and not disabled else "numpy"
    if name == "numba":
        if NUMBA is None:
            raise RuntimeError("numba backend requested but numba is not installed")
        return NUMBA
    if name == "numpy":
        return NUMPY
    raise ValueError(f"unknown kernel backend {name!r}")
