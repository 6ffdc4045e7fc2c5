"""Shared test oracles, kept deliberately independent of the library code."""
from __future__ import annotations

import numpy as np


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one element at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(ga: np.ndarray, gf: np.ndarray) -> float:
    """max_i |ga - gf| / (|ga| + |gf| + 1e-8)."""
    ga = np.asarray(ga, dtype=np.float64)
    gf = np.asarray(gf, dtype=np.float64)
    return float(np.max(np.abs(ga - gf) / (np.abs(ga) + np.abs(gf) + 1e-8)))


def dft_oracle(frame: np.ndarray) -> np.ndarray:
    """Direct O(n^2) DFT of a real frame."""
    n = len(frame)
    k = np.arange(n)
    w = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return w @ frame.astype(np.float64)


def segment_counts_oracle(ref: np.ndarray, pred: np.ndarray, frames_per_seg: int):
    """Brute-force per-segment S/D/I/N by enumerating every (segment, event)."""
    t_total, n_events = ref.shape
    n_seg = (t_total + frames_per_seg - 1) // frames_per_seg
    s_list, d_list, i_list, n_list = [], [], [], []
    for seg in range(n_seg):
        lo = seg * frames_per_seg
        hi = min(lo + frames_per_seg, t_total)
        fn = 0
        fp = 0
        n_ref = 0
        for e in range(n_events):
            r_active = False
            p_active = False
            for t in range(lo, hi):
                if ref[t, e]:
                    r_active = True
                if pred[t, e]:
                    p_active = True
            if r_active:
                n_ref += 1
            if r_active and not p_active:
                fn += 1
            if p_active and not r_active:
                fp += 1
        s = min(fn, fp)
        s_list.append(s)
        d_list.append(fn - s)
        i_list.append(fp - s)
        n_list.append(n_ref)
    return s_list, d_list, i_list, n_list
