"""Compiled hot loops for tree growing and tree traversal.

Trees are grown on pre-binned features (uint8 bin ids) and stored as flat
node arrays: ``feature`` holds -1 for leaves, split nodes carry the bin
boundary ``b`` with the rule  bin <= b  (equivalently  x < edge[b])  going
left. All reductions run in a fixed order so repeated fits are bitwise
identical.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True)
def grow_gbt_tree(binned, g, h, max_depth, min_child_weight, lam, n_bins):
    """Grow one regression tree on gradients/hessians; returns node arrays.

    Output: (feature, bin, left, right, value, gain, n_nodes, row_pred)
    where row_pred[i] is the leaf value each training row landed in.
    """
    n_rows, n_feats = binned.shape
    cap = 2 ** (max_depth + 1) - 1
    node_feature = np.full(cap, -1, np.int32)
    node_bin = np.zeros(cap, np.int32)
    node_left = np.zeros(cap, np.int32)
    node_right = np.zeros(cap, np.int32)
    node_value = np.zeros(cap, np.float64)
    node_gain = np.zeros(cap, np.float64)
    row_pred = np.zeros(n_rows, np.float64)

    idx = np.arange(n_rows).astype(np.int32)
    buf = np.empty(n_rows, np.int32)
    stack_node = np.empty(cap, np.int32)
    stack_lo = np.empty(cap, np.int32)
    stack_hi = np.empty(cap, np.int32)
    stack_depth = np.empty(cap, np.int32)
    sp = 0
    stack_node[sp], stack_lo[sp], stack_hi[sp], stack_depth[sp] = 0, 0, n_rows, 0
    sp += 1
    node_count = 1

    while sp > 0:
        sp -= 1
        nid = stack_node[sp]
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        depth = stack_depth[sp]

        total_g = 0.0
        total_h = 0.0
        for ii in range(lo, hi):
            r = idx[ii]
            total_g += g[r]
            total_h += h[r]
        val = -total_g / (total_h + lam)
        node_value[nid] = val

        if depth >= max_depth or hi - lo < 2:
            for ii in range(lo, hi):
                row_pred[idx[ii]] = val
            continue

        hist_g = np.zeros((n_feats, n_bins), np.float64)
        hist_h = np.zeros((n_feats, n_bins), np.float64)
        for ii in range(lo, hi):
            r = idx[ii]
            gr = g[r]
            hr = h[r]
            for f in range(n_feats):
                b = binned[r, f]
                hist_g[f, b] += gr
                hist_h[f, b] += hr

        parent = total_g * total_g / (total_h + lam)
        best_gain = 1e-12
        best_f = -1
        best_b = -1
        for f in range(n_feats):
            left_g = 0.0
            left_h = 0.0
            for b in range(n_bins - 1):
                left_g += hist_g[f, b]
                left_h += hist_h[f, b]
                right_h = total_h - left_h
                if left_h < min_child_weight or right_h < min_child_weight:
                    continue
                right_g = total_g - left_g
                gain = (left_g * left_g / (left_h + lam)
                        + right_g * right_g / (right_h + lam) - parent)
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_b = b

        if best_f < 0:
            for ii in range(lo, hi):
                row_pred[idx[ii]] = val
            continue

        # stable partition keeps row order inside each child deterministic
        n_left = 0
        for ii in range(lo, hi):
            r = idx[ii]
            if binned[r, best_f] <= best_b:
                buf[lo + n_left] = r
                n_left += 1
        pos = lo + n_left
        for ii in range(lo, hi):
            r = idx[ii]
            if binned[r, best_f] > best_b:
                buf[pos] = r
                pos += 1
        for ii in range(lo, hi):
            idx[ii] = buf[ii]

        lid = node_count
        rid = node_count + 1
        node_count += 2
        node_feature[nid] = best_f
        node_bin[nid] = best_b
        node_left[nid] = lid
        node_right[nid] = rid
        node_gain[nid] = best_gain
        stack_node[sp], stack_lo[sp], stack_hi[sp], stack_depth[sp] = (
            rid, lo + n_left, hi, depth + 1)
        sp += 1
        stack_node[sp], stack_lo[sp], stack_hi[sp], stack_depth[sp] = (
            lid, lo, lo + n_left, depth + 1)
        sp += 1

    return (node_feature, node_bin, node_left, node_right, node_value,
            node_gain, node_count, row_pred)


@njit(cache=True)
def grow_rf_tree(binned, class_ids, n_classes, rows, tree_seed, n_try,
                 max_depth, n_bins):
    """Grow one Gini classification tree on a bootstrap sample.

    ``rows`` are the bootstrap row indices; ``n_try`` features are drawn
    without replacement at every node from the tree's own seeded stream.
    Returns (feature, bin, left, right, leaf_probs, gain, n_nodes) where
    gain already carries the node-fraction weight used for importances.
    """
    np.random.seed(tree_seed)
    n_rows = rows.shape[0]
    n_feats = binned.shape[1]
    cap = 2 * n_rows + 1
    node_feature = np.full(cap, -1, np.int32)
    node_bin = np.zeros(cap, np.int32)
    node_left = np.zeros(cap, np.int32)
    node_right = np.zeros(cap, np.int32)
    leaf_probs = np.zeros((cap, n_classes), np.float32)
    node_gain = np.zeros(cap, np.float64)

    idx = rows.copy()
    buf = np.empty(n_rows, np.int32)
    pool = np.arange(n_feats).astype(np.int32)
    counts = np.zeros(n_classes, np.float64)
    left_counts = np.zeros(n_classes, np.float64)

    stack_node = np.empty(cap, np.int32)
    stack_lo = np.empty(cap, np.int32)
    stack_hi = np.empty(cap, np.int32)
    stack_depth = np.empty(cap, np.int32)
    sp = 0
    stack_node[sp], stack_lo[sp], stack_hi[sp], stack_depth[sp] = 0, 0, n_rows, 0
    sp += 1
    node_count = 1

    while sp > 0:
        sp -= 1
        nid = stack_node[sp]
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        depth = stack_depth[sp]
        node_n = hi - lo

        for k in range(n_classes):
            counts[k] = 0.0
        for ii in range(lo, hi):
            counts[class_ids[idx[ii]]] += 1.0
        biggest = 0.0
        for k in range(n_classes):
            if counts[k] > biggest:
                biggest = counts[k]

        if node_n < 2 or biggest == node_n or depth >= max_depth:
            for k in range(n_classes):
                leaf_probs[nid, k] = np.float32(counts[k] / node_n)
            continue

        for j in range(n_try):
            swap = j + np.random.randint(0, n_feats - j)
            tmp = pool[j]
            pool[j] = pool[swap]
            pool[swap] = tmp

        hist = np.zeros((n_try, n_bins, n_classes), np.float64)
        for ii in range(lo, hi):
            r = idx[ii]
            yk = class_ids[r]
            for j in range(n_try):
                hist[j, binned[r, pool[j]], yk] += 1.0

        sq = 0.0
        for k in range(n_classes):
            sq += counts[k] * counts[k]
        parent_gini = 1.0 - sq / (node_n * node_n)

        best_dec = 1e-12
        best_j = -1
        best_b = -1
        for j in range(n_try):
            for k in range(n_classes):
                left_counts[k] = 0.0
            n_left = 0.0
            for b in range(n_bins - 1):
                for k in range(n_classes):
                    left_counts[k] += hist[j, b, k]
                    n_left += hist[j, b, k]
                n_right = node_n - n_left
                if n_left < 1.0 or n_right < 1.0:
                    continue
                sq_left = 0.0
                sq_right = 0.0
                for k in range(n_classes):
                    sq_left += left_counts[k] * left_counts[k]
                    rc = counts[k] - left_counts[k]
                    sq_right += rc * rc
                child = (n_left - sq_left / n_left) + (n_right - sq_right / n_right)
                dec = parent_gini - child / node_n
                if dec > best_dec:
                    best_dec = dec
                    best_j = j
                    best_b = b

        if best_j < 0:
            for k in range(n_classes):
                leaf_probs[nid, k] = np.float32(counts[k] / node_n)
            continue

        best_f = pool[best_j]
        n_left = 0
        for ii in range(lo, hi):
            r = idx[ii]
            if binned[r, best_f] <= best_b:
                buf[lo + n_left] = r
                n_left += 1
        pos = lo + n_left
        for ii in range(lo, hi):
            r = idx[ii]
            if binned[r, best_f] > best_b:
                buf[pos] = r
                pos += 1
        for ii in range(lo, hi):
            idx[ii] = buf[ii]

        lid = node_count
        rid = node_count + 1
        node_count += 2
        node_feature[nid] = best_f
        node_bin[nid] = best_b
        node_left[nid] = lid
        node_right[nid] = rid
        node_gain[nid] = best_dec * node_n / n_rows
        stack_node[sp], stack_lo[sp], stack_hi[sp], stack_depth[sp] = (
            rid, lo + n_left, hi, depth + 1)
        sp += 1
        stack_node[sp], stack_lo[sp], stack_hi[sp], stack_depth[sp] = (
            lid, lo, lo + n_left, depth + 1)
        sp += 1

    return (node_feature, node_bin, node_left, node_right, leaf_probs,
            node_gain, node_count)


@njit(cache=True, parallel=True)
def accumulate_gbt_raw(x, feature, threshold, left, right, value,
                       tree_offset, tree_class, raw):
    """Add every tree's leaf value into raw class scores, one row at a time."""
    n_rows = x.shape[0]
    n_trees = tree_class.shape[0]
    for i in prange(n_rows):
        for t in range(n_trees):
            base = tree_offset[t]
            node = 0
            while feature[base + node] >= 0:
                f = feature[base + node]
                if x[i, f] < threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            raw[i, tree_class[t]] += value[base + node]


@njit(cache=True, parallel=True)
def accumulate_rf_probs(x, feature, threshold, left, right, leaf_probs,
                        tree_offset, acc):
    """Sum per-tree leaf class distributions into acc; caller divides by T."""
    n_rows = x.shape[0]
    n_trees = tree_offset.shape[0] - 1
    n_classes = acc.shape[1]
    for i in prange(n_rows):
        for t in range(n_trees):
            base = tree_offset[t]
            node = 0
            while feature[base + node] >= 0:
                f = feature[base + node]
                if x[i, f] < threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            for k in range(n_classes):
                acc[i, k] += leaf_probs[base + node, k]
