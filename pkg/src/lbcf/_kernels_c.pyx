#cython: language_level=3
"""Compiled sampling kernels.

Mirrors ``_kernels_py`` statement for statement: identical pre-drawn
randomness layout and identical floating-point association order, so chains
produced by the two backends agree bitwise (the extension is compiled with
-ffp-contract=off to keep the compiler from fusing multiply-adds).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport M_PI, isnan, log, log1p, pow, sqrt
from libc.stdlib cimport qsort

BACKEND = "compiled"

cdef enum:
    M_NHIGH = 0
    M_FREETOP = 1
    M_NLEAF = 2
    M_NINT = 3
    M_ACCEPT = 4
    M_MOVE = 5
    M_VALID = 6

cdef enum:
    MV_GROW = 0
    MV_PRUNE = 1
    MV_CHANGE = 2
    MV_SWAP = 3

cdef enum:
    FEAT_LEAF = -1
    FEAT_FREE = -2


cdef int _cmp_double(const void* a, const void* b) noexcept nogil:
    cdef double x = (<const double*> a)[0]
    cdef double y = (<const double*> b)[0]
    if x < y:
        return -1
    if x > y:
        return 1
    return 0


cdef inline Py_ssize_t _pick(double u, Py_ssize_t k) nogil:
    cdef Py_ssize_t i = <Py_ssize_t> (u * k)
    return k - 1 if i >= k else i


cdef inline double _grow_prior_delta(double depth, double alpha, double beta) nogil:
    cdef double pd = alpha * pow(1.0 + depth, -beta)
    cdef double pd1 = alpha * pow(2.0 + depth, -beta)
    return log(pd) + 2.0 * log1p(-pd1) - log1p(-pd)


cdef inline Py_ssize_t _route_from(Py_ssize_t s, const int[:] feat,
                                   const double[:] thr, const unsigned char[:] missl,
                                   const int[:] left, const int[:] right,
                                   const double[:, ::1] X, Py_ssize_t i) nogil:
    cdef double v
    cdef bint go_left
    while feat[s] >= 0:
        v = X[i, feat[s]]
        if isnan(v):
            go_left = missl[s] != 0
        else:
            go_left = v <= thr[s]
        s = left[s] if go_left else right[s]
    return s


def route(tree, X):
    """Leaf slot per row; NaN follows the split's missing direction."""
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const int[:] feat = tree.feat
    cdef const double[:] thr = tree.thr
    cdef const unsigned char[:] missl = tree.missl
    cdef const int[:] left = tree.left
    cdef const int[:] right = tree.right
    cdef Py_ssize_t n = Xv.shape[0], i
    out = np.empty(n, dtype=np.int32)
    cdef int[:] ov = out
    for i in range(n):
        ov[i] = <int> _route_from(0, feat, thr, missl, left, right, Xv, i)
    return out


def forest_predict(offs, feat, thr, missl, left, right, leafval, X):
    """Sum of leaf values over a stacked forest, per row of X.

    Trees accumulate in index order, matching sequential per-tree summation.
    """
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const int[:] offsv = np.ascontiguousarray(offs, dtype=np.int32)
    cdef const int[:] featv = np.ascontiguousarray(feat, dtype=np.int32)
    cdef const double[:] thrv = np.ascontiguousarray(thr, dtype=np.float64)
    cdef const unsigned char[:] misslv = np.ascontiguousarray(missl, dtype=np.uint8)
    cdef const int[:] leftv = np.ascontiguousarray(left, dtype=np.int32)
    cdef const int[:] rightv = np.ascontiguousarray(right, dtype=np.int32)
    cdef const double[:] lv = np.ascontiguousarray(leafval, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], nt = offsv.shape[0] - 1, i, t, s
    out = np.zeros(n, dtype=np.float64)
    cdef double[:] ov = out
    for t in range(nt):
        for i in range(n):
            s = _route_from(offsv[t], featv, thrv, misslv, leftv, rightv, Xv, i)
            ov[i] += lv[s]
    return out


def update_tree(tree, X, c, r, obs_idx, obs_row, g, slots,
                double sigma2, double leaf_var, double alpha, double beta,
                long min_leaf, probs, u, normals, ws=None):
    """One full Metropolis-within-Gibbs update of a single tree.

    See the pure-Python reference for the algorithm; this version performs
    partial re-routing but produces identical states, and uses the caller's
    workspace to avoid per-call allocation. The caller guarantees two free
    slots and a workspace with capacity >= tree capacity.
    """
    # tree storage
    cdef int[:] feat = tree.feat
    cdef double[:] thr = tree.thr
    cdef unsigned char[:] missl = tree.missl
    cdef int[:] left = tree.left
    cdef int[:] right = tree.right
    cdef int[:] depth = tree.depth
    cdef double[:] leafval = tree.leafval
    cdef int[:] free_ = tree.free
    cdef long long[:] meta = tree.meta

    # data views
    cdef double[:, ::1] Xv = X
    cdef double[:] cv = c
    cdef double[:] rv = r
    cdef long long[:] oiv = obs_idx
    cdef int[:] orv = obs_row
    cdef double[:] gv = g
    cdef int[:] sl = slots
    cdef double[:] uv = u
    cdef double[:] nm = normals

    # workspace
    cdef double[:] s_part = ws.s_part
    cdef double[:] dbuf = ws.dbuf
    cdef double[:] vbuf = ws.vbuf
    cdef double[:] ncur = ws.ncur
    cdef double[:] scur = ws.scur
    cdef double[:] nprop = ws.nprop
    cdef double[:] sprop = ws.sprop
    cdef int[:] slots_prop = ws.slots_prop
    cdef unsigned char[:] memb = ws.memb
    cdef int[:] lbuf = ws.lbuf
    cdef int[:] stack = ws.stack
    cdef int[:] rowcnt = ws.rowcnt

    cdef Py_ssize_t n_rows = Xv.shape[0]
    cdef Py_ssize_t P = Xv.shape[1]
    cdef Py_ssize_t cap = feat.shape[0]
    cdef Py_ssize_t nhigh = meta[M_NHIGH]
    cdef Py_ssize_t i, j, k, s, m, dm, idx
    cdef double pgrow = probs.grow
    cdef double pprune = probs.prune
    cdef double pchange = probs.change

    if ws.cap < cap:
        raise ValueError("workspace smaller than tree capacity")
    if cap - nhigh + meta[M_FREETOP] < 2:
        raise ValueError("caller must guarantee two free slots")

    # --- partial residual stats per row --------------------------------
    for i in range(n_rows):
        s_part[i] = 0.0
    for k in range(oiv.shape[0]):
        s_part[orv[k]] += rv[oiv[k]]
    for i in range(n_rows):
        s_part[i] = s_part[i] + cv[i] * gv[i]

    for s in range(cap):
        ncur[s] = 0.0
        scur[s] = 0.0
    for i in range(n_rows):
        ncur[sl[i]] += cv[i]
        scur[sl[i]] += s_part[i]

    cdef double lc = log(2.0 * M_PI * sigma2)
    cdef double ml_cur = 0.0, t_, n_, sm_
    for s in range(nhigh):
        if feat[s] == FEAT_LEAF:
            n_ = ncur[s]
            sm_ = scur[s]
            t_ = sigma2 + n_ * leaf_var
            ml_cur += (-0.5 * n_ * lc + 0.5 * log(sigma2 / t_)
                       + leaf_var * sm_ * sm_ / (2.0 * sigma2 * t_))

    # --- move selection -------------------------------------------------
    cdef long move
    if uv[0] < pgrow:
        move = MV_GROW
    elif uv[0] < pgrow + pprune:
        move = MV_PRUNE
    elif uv[0] < pgrow + pprune + pchange:
        move = MV_CHANGE
    else:
        move = MV_SWAP

    cdef bint valid = False
    cdef double log_q = 0.0, dprior = 0.0, cut = 0.0, v
    cdef Py_ssize_t n_leaf, n_int, n_prun, node = -1, gl = -1, gr = -1
    cdef Py_ssize_t f = -1, f_old = -1, n_cut, n_cut_old, total, nl, top
    cdef double cut_old = 0.0
    cdef unsigned char md = 0, md_old = 0
    cdef bint go_left, found
    cdef Py_ssize_t d

    if move == MV_GROW:
        # pick a leaf (ascending slot order), a feature, a cut, a direction
        n_leaf = 0
        for s in range(nhigh):
            if feat[s] == FEAT_LEAF:
                lbuf[n_leaf] = <int> s
                n_leaf += 1
        node = lbuf[_pick(uv[1], n_leaf)]
        f = _pick(uv[2], P)
        m = 0
        for i in range(n_rows):
            if sl[i] == node:
                v = Xv[i, f]
                if not isnan(v):
                    vbuf[m] = v
                    m += 1
        if m > 0:
            qsort(&vbuf[0], m, sizeof(double), _cmp_double)
        dm = 0
        for j in range(m):
            if j == 0 or vbuf[j] != vbuf[j - 1]:
                vbuf[dm] = vbuf[j]
                dm += 1
        n_cut = dm - 1
        if n_cut >= 1:
            cut = vbuf[_pick(uv[3], n_cut)]
            md = 1 if uv[4] < 0.5 else 0
            total = 0
            nl = 0
            for i in range(n_rows):
                if sl[i] == node:
                    total += 1
                    v = Xv[i, f]
                    go_left = (md != 0) if isnan(v) else (v <= cut)
                    if go_left:
                        nl += 1
            if nl >= min_leaf and total - nl >= min_leaf:
                # apply grow: allocate children (free stack first, then fresh)
                if meta[M_FREETOP] > 0:
                    meta[M_FREETOP] -= 1
                    gl = free_[meta[M_FREETOP]]
                else:
                    gl = nhigh
                    nhigh += 1
                if meta[M_FREETOP] > 0:
                    meta[M_FREETOP] -= 1
                    gr = free_[meta[M_FREETOP]]
                else:
                    gr = nhigh
                    nhigh += 1
                meta[M_NHIGH] = nhigh
                d = depth[node]
                feat[gl] = FEAT_LEAF
                depth[gl] = <int> (d + 1)
                leafval[gl] = 0.0
                feat[gr] = FEAT_LEAF
                depth[gr] = <int> (d + 1)
                leafval[gr] = 0.0
                feat[node] = <int> f
                thr[node] = cut
                missl[node] = md
                left[node] = <int> gl
                right[node] = <int> gr
                meta[M_NLEAF] += 1
                meta[M_NINT] += 1
                # proposal routing: only the grown leaf's rows move
                for i in range(n_rows):
                    if sl[i] == node:
                        v = Xv[i, f]
                        go_left = (md != 0) if isnan(v) else (v <= cut)
                        slots_prop[i] = <int> (gl if go_left else gr)
                    else:
                        slots_prop[i] = sl[i]
                # prunable count in the candidate tree
                n_prun = 0
                for s in range(nhigh):
                    if feat[s] >= 0 and feat[left[s]] == FEAT_LEAF \
                            and feat[right[s]] == FEAT_LEAF:
                        n_prun += 1
                # rule choices are proposed from the rule prior, so those
                # densities cancel in the Hastings ratio
                log_q = (log(pprune) - log(<double> n_prun)
                         - log(pgrow) + log(<double> n_leaf))
                dprior = _grow_prior_delta(<double> d, alpha, beta)
                valid = True

    elif move == MV_PRUNE:
        n_prun = 0
        for s in range(nhigh):
            if feat[s] >= 0 and feat[left[s]] == FEAT_LEAF \
                    and feat[right[s]] == FEAT_LEAF:
                lbuf[n_prun] = <int> s
                n_prun += 1
        if n_prun > 0:
            node = lbuf[_pick(uv[1], n_prun)]
            f_old = feat[node]
            cut_old = thr[node]
            gl = left[node]
            gr = right[node]
            # reverse grow must be able to re-propose the old cut
            m = 0
            for i in range(n_rows):
                if sl[i] == gl or sl[i] == gr:
                    v = Xv[i, f_old]
                    if not isnan(v):
                        vbuf[m] = v
                        m += 1
            if m > 0:
                qsort(&vbuf[0], m, sizeof(double), _cmp_double)
            dm = 0
            for j in range(m):
                if j == 0 or vbuf[j] != vbuf[j - 1]:
                    vbuf[dm] = vbuf[j]
                    dm += 1
            n_cut = dm - 1
            found = False
            for j in range(n_cut):
                if vbuf[j] == cut_old:
                    found = True
                    break
            if n_cut >= 1 and found:
                md_old = missl[node]
                # apply prune (children pushed left then right)
                feat[gl] = FEAT_FREE
                free_[meta[M_FREETOP]] = <int> gl
                meta[M_FREETOP] += 1
                feat[gr] = FEAT_FREE
                free_[meta[M_FREETOP]] = <int> gr
                meta[M_FREETOP] += 1
                feat[node] = FEAT_LEAF
                leafval[node] = 0.0
                meta[M_NLEAF] -= 1
                meta[M_NINT] -= 1
                for i in range(n_rows):
                    if sl[i] == gl or sl[i] == gr:
                        slots_prop[i] = <int> node
                    else:
                        slots_prop[i] = sl[i]
                log_q = (log(pgrow) - log(<double> meta[M_NLEAF])
                         - log(pprune) + log(<double> n_prun))
                dprior = -_grow_prior_delta(<double> depth[node], alpha, beta)
                valid = True

    elif move == MV_CHANGE:
        n_int = 0
        for s in range(nhigh):
            if feat[s] >= 0:
                lbuf[n_int] = <int> s
                n_int += 1
        if n_int > 0:
            node = lbuf[_pick(uv[1], n_int)]
            f = _pick(uv[2], P)
            # rows currently under the node (its leaf-descendant set)
            for s in range(nhigh):
                rowcnt[s] = 0
            top = 0
            stack[top] = <int> node
            top += 1
            while top > 0:
                top -= 1
                s = stack[top]
                if feat[s] >= 0:
                    stack[top] = right[s]
                    top += 1
                    stack[top] = left[s]
                    top += 1
                else:
                    rowcnt[s] = 1
            for i in range(n_rows):
                memb[i] = rowcnt[sl[i]] != 0
            m = 0
            for i in range(n_rows):
                if memb[i]:
                    v = Xv[i, f]
                    if not isnan(v):
                        vbuf[m] = v
                        m += 1
            if m > 0:
                qsort(&vbuf[0], m, sizeof(double), _cmp_double)
            dm = 0
            for j in range(m):
                if j == 0 or vbuf[j] != vbuf[j - 1]:
                    vbuf[dm] = vbuf[j]
                    dm += 1
            n_cut = dm - 1
            if n_cut >= 1:
                f_old = feat[node]
                cut_old = thr[node]
                # the reverse move must be able to re-propose the old rule
                m = 0
                for i in range(n_rows):
                    if memb[i]:
                        v = Xv[i, f_old]
                        if not isnan(v):
                            dbuf[m] = v
                            m += 1
                if m > 0:
                    qsort(&dbuf[0], m, sizeof(double), _cmp_double)
                n_cut_old = 0
                for j in range(m):
                    if j == 0 or dbuf[j] != dbuf[j - 1]:
                        dbuf[n_cut_old] = dbuf[j]
                        n_cut_old += 1
                n_cut_old -= 1
                found = False
                for j in range(n_cut_old):
                    if dbuf[j] == cut_old:
                        found = True
                        break
                if n_cut_old >= 1 and found:
                    cut = vbuf[_pick(uv[3], n_cut)]
                    md = 1 if uv[4] < 0.5 else 0
                    md_old = missl[node]
                    feat[node] = <int> f
                    thr[node] = cut
                    missl[node] = md
                    for i in range(n_rows):
                        if memb[i]:
                            slots_prop[i] = <int> _route_from(
                                node, feat, thr, missl, left, right, Xv, i)
                        else:
                            slots_prop[i] = sl[i]
                    # every leaf must keep min_leaf rows
                    for s in range(nhigh):
                        rowcnt[s] = 0
                    for i in range(n_rows):
                        rowcnt[slots_prop[i]] += 1
                    valid = True
                    for s in range(nhigh):
                        if feat[s] == FEAT_LEAF and rowcnt[s] < min_leaf:
                            valid = False
                            break
                    if valid:
                        # redrawn rule comes from the rule prior; old rule's
                        # prior mass equals its reverse density, all cancels
                        log_q = 0.0
                    else:
                        feat[node] = <int> f_old
                        thr[node] = cut_old
                        missl[node] = md_old

    else:  # MV_SWAP
        # (parent, internal child) pairs: parent ascending, left before right
        n_int = 0
        for s in range(nhigh):
            if feat[s] >= 0:
                if feat[left[s]] >= 0:
                    lbuf[n_int] = <int> s
                    stack[n_int] = left[s]
                    n_int += 1
                if feat[right[s]] >= 0:
                    lbuf[n_int] = <int> s
                    stack[n_int] = right[s]
                    n_int += 1
        if n_int > 0:
            idx = _pick(uv[1], n_int)
            node = lbuf[idx]
            j = stack[idx]  # the child
            f_old = feat[node]
            cut_old = thr[node]
            md_old = missl[node]
            feat[node] = feat[j]
            thr[node] = thr[j]
            missl[node] = missl[j]
            feat[j] = <int> f_old
            thr[j] = cut_old
            missl[j] = md_old
            # rows under the parent
            for s in range(nhigh):
                rowcnt[s] = 0
            top = 0
            stack[top] = <int> node
            top += 1
            while top > 0:
                top -= 1
                s = stack[top]
                if feat[s] >= 0:
                    stack[top] = right[s]
                    top += 1
                    stack[top] = left[s]
                    top += 1
                else:
                    rowcnt[s] = 1
            for i in range(n_rows):
                memb[i] = rowcnt[sl[i]] != 0
                if memb[i]:
                    slots_prop[i] = <int> _route_from(
                        node, feat, thr, missl, left, right, Xv, i)
                else:
                    slots_prop[i] = sl[i]
            for s in range(nhigh):
                rowcnt[s] = 0
            for i in range(n_rows):
                rowcnt[slots_prop[i]] += 1
            valid = True
            for s in range(nhigh):
                if feat[s] == FEAT_LEAF and rowcnt[s] < min_leaf:
                    valid = False
                    break
            if valid:
                log_q = 0.0
            else:
                # swap back
                f_old = feat[node]
                cut_old = thr[node]
                md_old = missl[node]
                feat[node] = feat[j]
                thr[node] = thr[j]
                missl[node] = missl[j]
                feat[j] = <int> f_old
                thr[j] = cut_old
                missl[j] = md_old

    meta[M_MOVE] = move
    meta[M_VALID] = 1 if valid else 0

    # --- MH test ---------------------------------------------------------
    cdef bint accepted = False
    cdef double ml_prop, log_ratio
    cdef Py_ssize_t nhigh2 = meta[M_NHIGH]
    if valid:
        for s in range(cap):
            nprop[s] = 0.0
            sprop[s] = 0.0
        for i in range(n_rows):
            nprop[slots_prop[i]] += cv[i]
            sprop[slots_prop[i]] += s_part[i]
        ml_prop = 0.0
        for s in range(nhigh2):
            if feat[s] == FEAT_LEAF:
                n_ = nprop[s]
                sm_ = sprop[s]
                t_ = sigma2 + n_ * leaf_var
                ml_prop += (-0.5 * n_ * lc + 0.5 * log(sigma2 / t_)
                            + leaf_var * sm_ * sm_ / (2.0 * sigma2 * t_))
        log_ratio = dprior + (ml_prop - ml_cur) + log_q
        if log(uv[5]) < log_ratio:
            accepted = True
            for i in range(n_rows):
                sl[i] = slots_prop[i]
        else:
            # undo the applied move
            if move == MV_GROW:
                feat[gl] = FEAT_FREE
                free_[meta[M_FREETOP]] = <int> gl
                meta[M_FREETOP] += 1
                feat[gr] = FEAT_FREE
                free_[meta[M_FREETOP]] = <int> gr
                meta[M_FREETOP] += 1
                feat[node] = FEAT_LEAF
                leafval[node] = 0.0
                meta[M_NLEAF] -= 1
                meta[M_NINT] -= 1
            elif move == MV_PRUNE:
                meta[M_FREETOP] -= 2
                d = depth[node]
                feat[gl] = FEAT_LEAF
                depth[gl] = <int> (d + 1)
                leafval[gl] = 0.0
                feat[gr] = FEAT_LEAF
                depth[gr] = <int> (d + 1)
                leafval[gr] = 0.0
                feat[node] = <int> f_old
                thr[node] = cut_old
                missl[node] = md_old
                left[node] = <int> gl
                right[node] = <int> gr
                meta[M_NLEAF] += 1
                meta[M_NINT] += 1
            elif move == MV_CHANGE:
                feat[node] = <int> f_old
                thr[node] = cut_old
                missl[node] = md_old
            else:  # swap back
                f_old = feat[node]
                cut_old = thr[node]
                md_old = missl[node]
                feat[node] = feat[j]
                thr[node] = thr[j]
                missl[node] = missl[j]
                feat[j] = <int> f_old
                thr[j] = cut_old
                missl[j] = md_old

    meta[M_ACCEPT] = 1 if accepted else 0
    if accepted:
        tree.pre_cache = None

    # --- redraw leaf values from their conjugate posteriors ---------------
    cdef double[:] nfin
    cdef double[:] sfin
    if accepted:
        nfin = nprop
        sfin = sprop
    else:
        nfin = ncur
        sfin = scur
    nhigh2 = meta[M_NHIGH]
    j = 0
    cdef double vpost, mpost
    for s in range(nhigh2):
        if feat[s] == FEAT_LEAF:
            n_ = nfin[s]
            vpost = 1.0 / (1.0 / leaf_var + n_ / sigma2)
            mpost = vpost * (sfin[s] / sigma2)
            leafval[s] = mpost + sqrt(vpost) * nm[j]
            j += 1

    # --- fold the changed fit back into the residuals ---------------------
    for i in range(n_rows):
        dbuf[i] = leafval[sl[i]] - gv[i]
    for k in range(oiv.shape[0]):
        rv[oiv[k]] -= dbuf[orv[k]]
    for i in range(n_rows):
        gv[i] = leafval[sl[i]]
