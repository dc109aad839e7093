"""Compiled per-event training pass. Gradients mirror ``model.event_gradient``."""
import numpy as np
from numba import njit

ADAGRAD_EPS = 1e-10


@njit(cache=True)
def _sigmoid(s):
    if s >= 0:
        return 1.0 / (1.0 + np.exp(-s))
    e = np.exp(s)
    return e / (1.0 + e)


@njit(cache=True)
def _logloss(s, y):
    z = s if y == 1 else -s
    if z > 0:
        return np.log1p(np.exp(-z))
    return -z + np.log1p(np.exp(z))


@njit(cache=True)
def _first(arr, j, v):
    for jj in range(j):
        if arr[jj] == v:
            return False
    return True


@njit(cache=True)
def _slot(arr, n, v):
    for q in range(n):
        if arr[q] == v:
            return q
    return -1


@njit(cache=True)
def _scale(acc, adagrad):
    # per-coordinate (or per-row) step multiplier
    if not adagrad:
        return 1.0
    return 1.0 / (np.sqrt(acc) + ADAGRAD_EPS)


@njit(cache=True)
def sgd_pass(order, cat_idx, cat_val, urow, uscale, irow, iscale, uref, uref_w, iref, iref_w, iref_list,
             dense, labels, w, bias, UE, IE, Q, R, dlin, dproj, acc_w, acc_b, acc_u, acc_i, acc_q,
             acc_r, acc_dl, acc_dp, lr_lin, lr_emb, l2, use_emb, adagrad_lin, adagrad, adagrad_rows,
             counts):
    """One pass over ``order``; updates parameters in place and returns the
    summed log-loss of the visited events, each taken before its update.

    Every step uses the gradient of the per-event objective (log-loss plus L2
    on the distinct touched parameters) at the pre-update parameters. Linear
    parameters (bias, hashed weights, dense linear weights) step with
    ``lr_lin``, everything else with ``lr_emb``. The three Adagrad flags
    switch linear parameters, projections and embedding tables separately;
    an enabled step is divided by the root of the accumulated squared
    gradient, per coordinate or, for embedding tables, per row (mean square).
    User-side references enter as ``Q @ IE[ref]``, members of item list ``l``
    as ``R[l] @ IE[ref]``.
    """
    E = IE.shape[1]
    D = dense.shape[1]
    A = uref.shape[1]
    B = iref.shape[1]
    L = R.shape[0]
    U = np.zeros(E)
    I = np.zeros(E)
    QtI = np.zeros(E)
    gU = np.zeros(E)
    gQ = np.zeros((E, E))
    gR = np.zeros((L, E, E))
    RtU = np.zeros((L, E))
    lseen = np.zeros(L, dtype=np.bool_)
    iseen = np.empty(1 + A + B, dtype=np.int64)
    gI = np.zeros((1 + A + B, E))
    total = 0.0
    for t in range(order.shape[0]):
        i = order[t]
        y = labels[i]
        ur = urow[i] if use_emb else -1
        ir = irow[i] if use_emb else -1

        s = bias[0]
        for j in range(cat_idx.shape[1]):
            c = cat_idx[i, j]
            if c >= 0:
                s += cat_val[i, j] * w[c]
        for d in range(D):
            s += dlin[d] * dense[i, d]
        for e in range(E):
            U[e] = uscale[i] * UE[ur, e] if ur >= 0 else 0.0
            I[e] = iscale[i] * IE[ir, e] if ir >= 0 else 0.0
        has_ref = False
        for a in range(A):
            r = uref[i, a]
            if r >= 0:
                has_ref = True
                for e in range(E):
                    acc = 0.0
                    for f in range(E):
                        acc += Q[e, f] * IE[r, f]
                    U[e] += uref_w[i, a] * acc
        for b in range(B):
            r = iref[i, b]
            if r >= 0:
                l = iref_list[b]
                for e in range(E):
                    acc = 0.0
                    for f in range(E):
                        acc += R[l, e, f] * IE[r, f]
                    I[e] += iref_w[i, b] * acc
        for e in range(E):
            acc = 0.0
            for d in range(D):
                acc += dproj[e, d] * dense[i, d]
            I[e] += acc
            s += U[e] * I[e]

        total += _logloss(s, y)
        g = _sigmoid(s) - y

        # gradients of the item rows, collected per distinct row
        ns = 0
        if ir >= 0:
            iseen[0] = ir
            for e in range(E):
                gI[0, e] = g * iscale[i] * U[e]
            ns = 1
        if has_ref:
            for f in range(E):
                acc = 0.0
                for e in range(E):
                    acc += Q[e, f] * I[e]
                QtI[f] = acc
            for e in range(E):
                for f in range(E):
                    gQ[e, f] = l2 * Q[e, f]
        for a in range(A):
            r = uref[i, a]
            if r >= 0:
                wa = uref_w[i, a]
                q = _slot(iseen, ns, r)
                if q < 0:
                    q = ns
                    iseen[ns] = r
                    gI[q, :] = 0.0
                    ns += 1
                for e in range(E):
                    gI[q, e] += g * wa * QtI[e]
                    for f in range(E):
                        gQ[e, f] += g * wa * I[e] * IE[r, f]
        lseen[:] = False
        for b in range(B):
            r = iref[i, b]
            if r >= 0:
                l = iref_list[b]
                wb = iref_w[i, b]
                if not lseen[l]:
                    lseen[l] = True
                    for f in range(E):
                        acc = 0.0
                        for e in range(E):
                            acc += R[l, e, f] * U[e]
                        RtU[l, f] = acc
                        for e in range(E):
                            gR[l, e, f] = l2 * R[l, e, f]
                q = _slot(iseen, ns, r)
                if q < 0:
                    q = ns
                    iseen[ns] = r
                    gI[q, :] = 0.0
                    ns += 1
                for e in range(E):
                    gI[q, e] += g * wb * RtU[l, e]
                    for f in range(E):
                        gR[l, e, f] += g * wb * U[e] * IE[r, f]
        if ur >= 0:
            for e in range(E):
                gU[e] = g * uscale[i] * I[e] + l2 * UE[ur, e]

        # linear parameters
        acc_b[0] += g * g
        bias[0] -= lr_lin * g * _scale(acc_b[0], adagrad_lin)
        for j in range(cat_idx.shape[1]):
            c = cat_idx[i, j]
            if c >= 0 and _first(cat_idx[i], j, c):
                gc = 0.0
                for jj in range(j, cat_idx.shape[1]):
                    if cat_idx[i, jj] == c:
                        gc += cat_val[i, jj]
                gc = g * gc + l2 * w[c]
                acc_w[c] += gc * gc
                w[c] -= lr_lin * gc * _scale(acc_w[c], adagrad_lin)
        for d in range(D):
            gd = g * dense[i, d] + l2 * dlin[d]
            acc_dl[d] += gd * gd
            dlin[d] -= lr_lin * gd * _scale(acc_dl[d], adagrad_lin)
            for e in range(E):
                gp = g * U[e] * dense[i, d] + l2 * dproj[e, d]
                acc_dp[e, d] += gp * gp
                dproj[e, d] -= lr_emb * gp * _scale(acc_dp[e, d], adagrad)

        # embedding tables and the reference projection
        if ur >= 0:
            m = 0.0
            for e in range(E):
                m += gU[e] * gU[e]
            acc_u[ur] += m / E
            sc = lr_emb * _scale(acc_u[ur], adagrad_rows)
            for e in range(E):
                UE[ur, e] -= sc * gU[e]
        if has_ref:
            for e in range(E):
                for f in range(E):
                    acc_q[e, f] += gQ[e, f] * gQ[e, f]
                    Q[e, f] -= lr_emb * gQ[e, f] * _scale(acc_q[e, f], adagrad)
        for l in range(L):
            if lseen[l]:
                for e in range(E):
                    for f in range(E):
                        acc_r[l, e, f] += gR[l, e, f] * gR[l, e, f]
                        R[l, e, f] -= lr_emb * gR[l, e, f] * _scale(acc_r[l, e, f], adagrad)
        for q in range(ns):
            r = iseen[q]
            m = 0.0
            for e in range(E):
                gI[q, e] += l2 * IE[r, e]
                m += gI[q, e] * gI[q, e]
            acc_i[r] += m / E
            sc = lr_emb * _scale(acc_i[r], adagrad_rows)
            for e in range(E):
                IE[r, e] -= sc * gI[q, e]
        if irow[i] >= 0:
            counts[irow[i]] += 1
    return total
