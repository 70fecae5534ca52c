"""Independent reference implementations used only by the tests.

Each oracle is written from the mathematical definition with no code
shared with the package: finite differences for gradients, a Jacobi
eigensolver for spectra, double-loop HSIC for CKA, a literal 1-based
transcription of the head-redundancy procedure, and a step-by-step
replay of the masking corruption draw order. If package and oracle
agree, both would have to be wrong in the same way for a bug to pass.
"""

import numpy as np


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def jacobi_gram_singular_values(x: np.ndarray, sweeps: int = 60) -> np.ndarray:
    """Singular values of x via cyclic Jacobi diagonalization of x^T x.

    Plain textbook rotations, no library eigensolver, so it is an
    independent route to the same spectrum as an SVD.
    """
    a = np.asarray(x, dtype=np.float64)
    s = a.T @ a
    n = s.shape[0]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += s[p, q] ** 2
                if abs(s[p, q]) < 1e-30:
                    continue
                theta = 0.5 * np.arctan2(2.0 * s[p, q], s[q, q] - s[p, p])
                c, sn = np.cos(theta), np.sin(theta)
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = sn
                rot[q, p] = -sn
                s = rot.T @ s @ rot
        if off < 1e-24:
            break
    eig = np.clip(np.diag(s), 0.0, None)
    return np.sqrt(np.sort(eig)[::-1])


def cka_double_loop(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA via explicit double-loop HSIC on centered features."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    kx = xc @ xc.T
    ky = yc @ yc.T
    n = kx.shape[0]

    def hsic(k1, k2):
        total = 0.0
        for i in range(n):
            for j in range(n):
                total += k1[i, j] * k2[i, j]
        return total

    num = hsic(kx, ky)
    den = np.sqrt(hsic(kx, kx) * hsic(ky, ky))
    return num / den


def head_search_literal(q: np.ndarray, eta: float, width: int):
    """1-based transcription of the head-redundancy pseudocode.

    Returns (removed_set_1based, h_star). Kept deliberately word-for-word,
    including comparing against already-removed heads on the inner axis.
    """
    h = q.shape[0]
    removed = set()
    for i in range(1, h + 1):
        if i in removed:
            continue
        for j in range(i + 1, h + 1):
            if q[i - 1, j - 1] > eta:
                removed.add(j)
    h_star = h - len(removed)
    while h_star > 1 and width % h_star != 0:
        h_star -= 1
    return removed, h_star


def mlm_corruption_replay(ids: np.ndarray, mask_prob: float, seed: int,
                          vocab_size: int, pad_id: int = 0, mask_id: int = 1,
                          n_reserved: int = 3):
    """Replay the documented corruption draw order with scalar draws.

    One uniform per position (flat order); position selected if u <
    mask_prob and the id is not PAD. Then per selected position, in flat
    order: one uniform action draw (<0.8 mask, <0.9 random, else keep)
    and, only when the action is 'random', one integer draw over the
    non-reserved id range.
    """
    rng = np.random.default_rng(seed)
    flat = ids.reshape(-1)
    sel = np.empty(flat.size, dtype=bool)
    for i in range(flat.size):
        sel[i] = rng.random() < mask_prob and flat[i] != pad_id
    out = flat.copy()
    for i in range(flat.size):
        if not sel[i]:
            continue
        action = rng.random()
        if action < 0.8:
            out[i] = mask_id
        elif action < 0.9:
            out[i] = rng.integers(n_reserved, vocab_size)
        # else: keep original id
    return out.reshape(ids.shape), sel.reshape(ids.shape)


def pearson_reference(u: np.ndarray, v: np.ndarray, eps: float = 1e-8) -> float:
    """Pearson correlation from the definition, with the package's eps."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    uc = u - u.mean()
    vc = v - v.mean()
    cov = (uc * vc).mean()
    su = np.sqrt((uc * uc).mean() + eps * eps)
    sv = np.sqrt((vc * vc).mean() + eps * eps)
    return cov / (su * sv + eps)
