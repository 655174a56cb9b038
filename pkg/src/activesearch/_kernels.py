"""Compiled inner loops of the search engine.

Each proposal's belief increment is computed in one fused pass over the
proposals instead of a dozen temporary arrays.  Disjoint pairs (IoU = 0) skip
``exp``: the kernel is then exactly ``exp(-1 / (2 sigma^2))``, precomputed.

Kernels use numba's numpy error model: no divisor here can be zero, and
dropping the ZeroDivisionError check lets LLVM vectorize the overlap loops.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True, error_model="numpy", inline="always")
def _extent(a0, alen, b0, blen):
    d = b0 - a0
    if d <= 0.0:
        e = blen + d
    else:
        e = alen - d
    return min(min(e, alen), blen)


@numba.njit(cache=True, error_model="numpy", inline="always")
def _overlap(ax, ay, aw, ah, aarea, bx, by, bw, bh, barea):
    # same expression as geometry.iou, so results are bit-identical
    ix = _extent(ax, aw, bx, bw)
    iy = _extent(ay, ah, by, bh)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (aarea + barea - inter)


@numba.njit(cache=True, error_model="numpy")
def _overlap_row(ax, ay, aw, ah, x, y, w, h, area, out):
    """``out[i]`` = IoU of box ``a`` with proposal ``i``; branch-free, so it vectorizes.

    Equal to :func:`_overlap` except that a zero may come out as ``-0.0``.
    """
    aa = aw * ah
    for i in range(x.shape[0]):
        ix = max(_extent(ax, aw, x[i], w[i]), 0.0)
        iy = max(_extent(ay, ah, y[i], h[i]), 0.0)
        inter = ix * iy
        out[i] = inter / (aa + area[i] - inter)


@numba.njit(cache=True, error_model="numpy")
def force_rows_into(o, gamma, x, y, w, h, area, two_ss, two_sc, ks, kc):
    """Fill ``ks`` (score kernel row) and ``kc`` (context force row) for one observation."""
    n = x.shape[0]
    ks0 = math.exp(-(1.0 * 1.0) / two_ss)
    kc0 = math.exp(-(1.0 * 1.0) / two_sc)
    v = np.empty(n)
    _overlap_row(o[0], o[1], o[2], o[3], x, y, w, h, area, v)
    for i in range(n):
        if v[i] == 0.0:
            ks[i] = ks0
        else:
            d = 1.0 - v[i]
            ks[i] = math.exp(-(d * d) / two_ss)
        kc[i] = 0.0
    for j in range(gamma.shape[0]):
        _overlap_row(gamma[j, 0], gamma[j, 1], gamma[j, 2], gamma[j, 3], x, y, w, h, area, v)
        for i in range(n):
            if v[i] == 0.0:
                kc[i] += kc0
            else:
                d = 1.0 - v[i]
                kc[i] += math.exp(-(d * d) / two_sc)


@numba.njit(cache=True, error_model="numpy")
def belief_step(beliefs, visited, o, phi, gamma, x, y, w, h, area, lam, two_ss, two_sc,
                ks, kc):
    """Apply one observation to every belief; return the next unvisited argmax or -1."""
    force_rows_into(o, gamma, x, y, w, h, area, two_ss, two_sc, ks, kc)
    a = phi - 0.5
    b = 1.0 - lam
    best = -1
    best_v = -np.inf
    for i in range(beliefs.shape[0]):
        beliefs[i] += lam * (ks[i] * a) + b * kc[i]
        if not visited[i] and (best < 0 or beliefs[i] > best_v):
            best = i
            best_v = beliefs[i]
    return best


@numba.njit(cache=True, error_model="numpy")
def lockstep_episodes(start, scores, ks_rows, kc_rows, s_idx, c_idx, lams, budget):
    """Run G searches on one image at once from precomputed kernel rows.

    ``ks_rows[s, o]`` / ``kc_rows[c, o]`` are the force rows of observing
    proposal ``o`` under the s-th score bandwidth / c-th context bandwidth.
    Returns the ``(G, budget)`` visit order.
    """
    G = lams.shape[0]
    n = scores.shape[0]
    order = np.empty((G, budget), dtype=np.int64)
    for g in range(G):
        beliefs = np.zeros(n)
        visited = np.zeros(n, dtype=np.bool_)
        lam = lams[g]
        b = 1.0 - lam
        ks = ks_rows[s_idx[g]]
        kc = kc_rows[c_idx[g]]
        cur = start
        for t in range(budget):
            order[g, t] = cur
            visited[cur] = True
            a = scores[cur] - 0.5
            best = -1
            best_v = -np.inf
            for i in range(n):
                beliefs[i] += lam * (ks[cur, i] * a) + b * kc[cur, i]
                if not visited[i] and (best < 0 or beliefs[i] > best_v):
                    best = i
                    best_v = beliefs[i]
            cur = best
            if cur < 0:
                for r in range(t + 1, budget):
                    order[g, r] = -1
                break
    return order


@numba.njit(cache=True, error_model="numpy", inline="always")
def _popcount64(v):
    v = v - ((v >> np.uint64(1)) & np.uint64(0x5555555555555555))
    v = (v & np.uint64(0x3333333333333333)) + ((v >> np.uint64(2)) & np.uint64(0x3333333333333333))
    v = (v + (v >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return (v * np.uint64(0x0101010101010101)) >> np.uint64(56)


@numba.njit(cache=True, error_model="numpy")
def route_leaves(kind, thr, left, right, pw, pc, windows, codes, nbits, evals):
    """Leaf reached by each query; ``pc``/``codes`` are codes viewed as uint64 words.

    ``evals[i]`` is incremented by the number of distance tests of query ``i``.
    """
    n = windows.shape[0]
    words = codes.shape[1]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        ax = windows[i, 0]
        ay = windows[i, 1]
        aw = windows[i, 2]
        ah = windows[i, 3]
        node = 0
        while kind[node] >= 0:
            if kind[node] == 0:
                bx = pw[node, 0]
                by = pw[node, 1]
                bw = pw[node, 2]
                bh = pw[node, 3]
                d = 1.0 - _overlap(ax, ay, aw, ah, aw * ah, bx, by, bw, bh, bw * bh)
            else:
                c = np.uint64(0)
                for k in range(words):
                    c += _popcount64(codes[i, k] ^ pc[node, k])
                d = c / nbits
            evals[i] += 1
            if d >= thr[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@numba.njit(cache=True, error_model="numpy")
def kernel_rows(windows, contexts, two_ss, two_sc):
    """Force rows of observing each proposal, for several bandwidths at once.

    ``contexts`` is ``(n, J, 4)``.  Returns ``ks[s, o, i]`` and ``kc[c, o, i]``
    with exactly the arithmetic of :func:`force_rows_into`.
    """
    n = windows.shape[0]
    J = contexts.shape[1]
    S = two_ss.shape[0]
    C = two_sc.shape[0]
    x = windows[:, 0].copy()
    y = windows[:, 1].copy()
    w = windows[:, 2].copy()
    h = windows[:, 3].copy()
    area = windows[:, 2] * windows[:, 3]
    ks = np.empty((S, n, n))
    kc = np.zeros((C, n, n))
    ks0 = np.empty(S)
    kc0 = np.empty(C)
    for s in range(S):
        ks0[s] = math.exp(-(1.0 * 1.0) / two_ss[s])
    for c in range(C):
        kc0[c] = math.exp(-(1.0 * 1.0) / two_sc[c])
    v = np.empty(n)
    for o in range(n):
        _overlap_row(x[o], y[o], w[o], h[o], x, y, w, h, area, v)
        for i in range(n):
            d = 1.0 - v[i]
            for s in range(S):
                ks[s, o, i] = ks0[s] if v[i] == 0.0 else math.exp(-(d * d) / two_ss[s])
        for j in range(J):
            _overlap_row(contexts[o, j, 0], contexts[o, j, 1], contexts[o, j, 2],
                         contexts[o, j, 3], x, y, w, h, area, v)
            for i in range(n):
                if v[i] == 0.0:
                    for c in range(C):
                        kc[c, o, i] += kc0[c]
                else:
                    d = 1.0 - v[i]
                    for c in range(C):
                        kc[c, o, i] += math.exp(-(d * d) / two_sc[c])
    return ks, kc


@numba.njit(cache=True, error_model="numpy")
def greedy_nms(order, windows, threshold):
    """Positions of ``order`` kept by greedy NMS, in keep order."""
    n = order.shape[0]
    keep = np.empty(n, dtype=np.int64)
    nk = 0
    for r in range(n):
        p = order[r]
        px, py, pw, ph = windows[p, 0], windows[p, 1], windows[p, 2], windows[p, 3]
        ok = True
        for k in range(nk):
            q = keep[k]
            qw, qh = windows[q, 2], windows[q, 3]
            if _overlap(windows[q, 0], windows[q, 1], qw, qh, qw * qh,
                        px, py, pw, ph, pw * ph) > threshold:
                ok = False
                break
        if ok:
            keep[nk] = p
            nk += 1
    return keep[:nk]


@numba.njit(cache=True, error_model="numpy")
def prefix_nms_match(rank, visit_time, suppress, gt_iou, checkpoints, match_threshold):
    """Greedy NMS plus ground-truth matching on every visit-order prefix.

    ``rank`` lists proposals by descending score (lowest index first on ties);
    a proposal belongs to the prefix of budget ``b`` iff ``visit_time < b``.
    ``suppress[p, q]`` is IoU(p, q) > NMS threshold.  Returns ``kept`` and
    ``tp`` flags of shape ``(len(checkpoints), n)``, indexed by rank position.
    """
    n = rank.shape[0]
    g = gt_iou.shape[1]
    C = checkpoints.shape[0]
    kept = np.zeros((C, n), dtype=np.bool_)
    tp = np.zeros((C, n), dtype=np.bool_)
    keep_list = np.empty(n, dtype=np.int64)
    matched = np.zeros(g, dtype=np.bool_)
    for c in range(C):
        b = checkpoints[c]
        nk = 0
        matched[:] = False
        for r in range(n):
            p = rank[r]
            if visit_time[p] >= b:
                continue
            ok = True
            for k in range(nk):
                if suppress[keep_list[k], p]:
                    ok = False
                    break
            if not ok:
                continue
            keep_list[nk] = p
            nk += 1
            kept[c, r] = True
            best = -1
            best_v = -1.0
            for k in range(g):
                if not matched[k] and gt_iou[p, k] > best_v:
                    best = k
                    best_v = gt_iou[p, k]
            if best >= 0 and best_v > match_threshold:
                tp[c, r] = True
                matched[best] = True
    return kept, tp
