# Compiled kernels for gradient-boosted trees of depth 1 or 2.
#
# A tree is stored as three (feature, threshold) nodes -- root, left child,
# right child -- and four leaf values ordered LL, LR, RL, RR. A node with
# feature -1 sends every row left, which is how depth-1 trees and unsplittable
# nodes are encoded.

import numpy as np
from numba import njit


@njit(cache=True)
def _best_split(X, g, h, order, member, node, min_leaf, l2):
    n, d = X.shape
    G = 0.0
    H = 0.0
    cnt = 0
    for i in range(n):
        if member[i] == node:
            G += g[i]
            H += h[i]
            cnt += 1
    best_gain = 1e-12
    best_feat = -1
    best_thr = 0.0
    if cnt < 2 * min_leaf:
        return best_feat, best_thr, G, H
    parent = G * G / (H + l2)
    for j in range(d):
        GL = 0.0
        HL = 0.0
        cl = 0
        prev = -1
        for t in range(n):
            r = order[t, j]
            if member[r] != node:
                continue
            if prev >= 0 and cl >= min_leaf and cnt - cl >= min_leaf and X[r, j] > X[prev, j]:
                GR = G - GL
                HR = H - HL
                gain = GL * GL / (HL + l2) + GR * GR / (HR + l2) - parent
                if gain > best_gain:
                    best_gain = gain
                    best_feat = j
                    best_thr = 0.5 * (X[prev, j] + X[r, j])
            GL += g[r]
            HL += h[r]
            cl += 1
            prev = r
    return best_feat, best_thr, G, H


@njit(cache=True)
def _leaf(Gs, Hs, l2):
    if Hs + l2 <= 0.0:
        return 0.0
    return Gs / (Hs + l2)


@njit(cache=True)
def fit_boost(X, y, order, n_trees, lr, max_depth, min_leaf, logistic, l2, f0):
    n = X.shape[0]
    feat = np.full((n_trees, 3), -1, dtype=np.int64)
    thr = np.zeros((n_trees, 3))
    vals = np.zeros((n_trees, 4))
    F = np.full(n, f0)
    g = np.empty(n)
    h = np.empty(n)
    member = np.zeros(n, dtype=np.int64)
    for t in range(n_trees):
        for i in range(n):
            if logistic:
                p = 1.0 / (1.0 + np.exp(-F[i]))
                g[i] = y[i] - p
                h[i] = max(p * (1.0 - p), 1e-12)
            else:
                g[i] = y[i] - F[i]
                h[i] = 1.0
            member[i] = 0
        f, c, G, H = _best_split(X, g, h, order, member, 0, min_leaf, l2)
        feat[t, 0] = f
        thr[t, 0] = c
        if f < 0:
            v = _leaf(G, H, l2)
            vals[t, 0] = v
            vals[t, 2] = v
            for i in range(n):
                F[i] += lr * v
            continue
        for i in range(n):
            member[i] = 1 if X[i, f] <= c else 2
        for side in range(2):
            node = side + 1
            if max_depth >= 2:
                f2, c2, G2, H2 = _best_split(X, g, h, order, member, node, min_leaf, l2)
            else:
                f2 = -1
                c2 = 0.0
                G2 = 0.0
                H2 = 0.0
                for i in range(n):
                    if member[i] == node:
                        G2 += g[i]
                        H2 += h[i]
            feat[t, node] = f2
            thr[t, node] = c2
            if f2 < 0:
                v = _leaf(G2, H2, l2)
                vals[t, 2 * side] = v
                vals[t, 2 * side + 1] = v
            else:
                GL = 0.0
                HL = 0.0
                for i in range(n):
                    if member[i] == node and X[i, f2] <= c2:
                        GL += g[i]
                        HL += h[i]
                vals[t, 2 * side] = _leaf(GL, HL, l2)
                vals[t, 2 * side + 1] = _leaf(G2 - GL, H2 - HL, l2)
        for i in range(n):
            side = 0 if member[i] == 1 else 1
            f2 = feat[t, side + 1]
            leaf = 2 * side
            if f2 >= 0 and X[i, f2] > thr[t, side + 1]:
                leaf += 1
            F[i] += lr * vals[t, leaf]
    return feat, thr, vals


@njit(cache=True)
def predict_boost(X, f0, lr, feat, thr, vals):
    n = X.shape[0]
    out = np.full(n, f0)
    for t in range(feat.shape[0]):
        for i in range(n):
            side = 0
            if feat[t, 0] >= 0 and X[i, feat[t, 0]] > thr[t, 0]:
                side = 1
            leaf = 2 * side
            f2 = feat[t, side + 1]
            if f2 >= 0 and X[i, f2] > thr[t, side + 1]:
                leaf += 1
            out[i] += lr * vals[t, leaf]
    return out
