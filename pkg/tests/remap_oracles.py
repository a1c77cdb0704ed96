"""Independent per-index brute-force oracles for every remapping rule.

Each oracle walks target indices one by one and applies the defining
index relation directly (1-based relations translated inline), without
any vectorized slicing, so they share no code with the library.
"""

import numpy as np


def depth_oracle(seed_layers, m):
    l = len(seed_layers)
    out = []
    for i in range(1, m + 1):          # 1-based layer index
        f_i = min(i, l)
        out.append(seed_layers[f_i - 1])
    return out


def width_oracle(seed, target_shape):
    p, q = seed.shape[:2]
    r, s = target_shape[:2]
    out = np.zeros(target_shape, dtype=seed.dtype)
    for i in range(r):
        for j in range(s):
            if i < p and j < q:
                out[i, j] = seed[i, j]
    return out


def grouped_oracle(seed, g):
    p, q = seed.shape[:2]
    s = q // g
    out = np.zeros((p, s) + seed.shape[2:], dtype=seed.dtype)
    for i in range(p):
        id_g = i // (p // g)
        for j in range(s):
            out[i, j] = seed[i, id_g * s + j]
    return out


def kernel_oracle(seed, target_k):
    k = seed.shape[-1]
    off = abs(k - target_k) // 2
    out = np.zeros(seed.shape[:-2] + (target_k, target_k), dtype=seed.dtype)
    if target_k <= k:
        for h in range(target_k):
            for w in range(target_k):
                out[..., h, w] = seed[..., h + off, w + off]
    else:
        for h in range(target_k):
            for w in range(target_k):
                if off <= h < off + k and off <= w < off + k:
                    out[..., h, w] = seed[..., h - off, w - off]
    return out


def dilate_oracle(seed, target_k):
    out = np.zeros(seed.shape[:-2] + (target_k, target_k), dtype=seed.dtype)
    half = (target_k - 1) // 2
    positions = [0, half, 2 * half]    # 1 + i*(k-1)/2 for i in 0,1,2, shifted to 0-base
    for a, h in enumerate(positions):
        for b, w in enumerate(positions):
            out[..., h, w] = seed[..., a, b]
    return out


def reference_indices_oracle(values, q):
    """Top-q selection then ascending sort, ties kept in index order."""
    values = list(values)
    ranked = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return sorted(ranked[:q])


def reference_width_oracle(seed, target_shape, values):
    idx = reference_indices_oracle(values, target_shape[0])
    out = np.zeros(target_shape, dtype=seed.dtype)
    for new_i, src_i in enumerate(idx):
        for j in range(target_shape[1]):
            if j < seed.shape[1]:
                out[new_i, j] = seed[src_i, j]
    return out
