"""Compiled event loop for the branching random walk.

Particles are counted per slot ``type * S + site``; type 0 is a live
particle, type 1 a ghost that has left the killing box but keeps moving
(used only to couple the killed process to the free one).  A Fenwick tree
over slots holds ``count * rate`` so sampling and updates cost ``O(log S)``.
Randomness comes in as a buffer of uniforms, three per event.
"""
import numba as nb
import numpy as np

OK = 0
NEED_RANDOM = 1
EXTINCT = 2
CAP_EXCEEDED = 3
MAX_EVENTS = 4

JUMP = 0
BIRTH = 1
DEATH = 2
OFFSPRING = 3
KILLED = 4

EVENT_NAMES = ("jump", "birth", "death", "offspring", "killed")

_REBUILD_EVERY = 1 << 16


@nb.njit(cache=True, nogil=True)
def fenwick_build(tree, counts, rate, S):
    m = counts.shape[0]
    for i in range(m + 1):
        tree[i] = 0.0
    for i in range(1, m + 1):
        tree[i] += counts[i - 1] * rate[(i - 1) % S]
        j = i + (i & -i)
        if j <= m:
            tree[j] += tree[i]


@nb.njit(cache=True, nogil=True)
def _fenwick_add(tree, slot, delta):
    m = tree.shape[0] - 1
    i = slot + 1
    while i <= m:
        tree[i] += delta
        i += i & -i


@nb.njit(cache=True, nogil=True)
def _fenwick_total(tree):
    m = tree.shape[0] - 1
    total = 0.0
    i = m
    while i > 0:
        total += tree[i]
        i -= i & -i
    return total


@nb.njit(cache=True, nogil=True)
def _fenwick_find(tree, target):
    m = tree.shape[0] - 1
    bit = 1
    while bit * 2 <= m:
        bit *= 2
    pos = 0
    rem = target
    while bit > 0:
        nxt = pos + bit
        if nxt <= m and tree[nxt] < rem:
            pos = nxt
            rem -= tree[nxt]
        bit //= 2
    return pos


@nb.njit(cache=True, nogil=True)
def _change(counts, tree, rate, S, slot, delta, state_i):
    counts[slot] += delta
    _fenwick_add(tree, slot, delta * rate[slot % S])
    state_i[1] += delta
    if slot < S:
        state_i[2] += delta


@nb.njit(cache=True, nogil=True)
def advance(counts, tree, rate, jump_rate, birth, death, off_rate, off_k, off_cum,
            nbr, kill, ghost, state_f, state_i, t_stop, max_events, pop_cap, uni, rec):
    """Run events until ``t_stop``.

    ``state_f[0]`` is the clock; ``state_i`` holds (uniform cursor, total
    population, live population, events since last tree rebuild).  ``rec``
    receives (kind, site, target, k, slot type) of the last event.
    """
    S = rate.shape[0]
    twod = nbr.shape[1]
    n_ev = 0
    while True:
        if state_i[1] == 0:
            return EXTINCT
        if n_ev >= max_events:
            return MAX_EVENTS
        upos = state_i[0]
        if upos + 3 > uni.shape[0]:
            return NEED_RANDOM
        u1 = uni[upos]
        u2 = uni[upos + 1]
        u3 = uni[upos + 2]
        state_i[0] = upos + 3
        total = _fenwick_total(tree)
        t_next = state_f[0] - np.log1p(-u1) / total
        if t_next > t_stop:
            state_f[0] = t_stop
            return OK
        state_f[0] = t_next
        slot = _fenwick_find(tree, u2 * total)
        if slot >= counts.shape[0] or counts[slot] == 0:
            # roundoff at a slot boundary: take the nearest occupied slot
            slot = min(slot, counts.shape[0] - 1)
            lo = slot
            while lo >= 0 and counts[lo] == 0:
                lo -= 1
            if lo < 0:
                lo = slot
                while counts[lo] == 0:
                    lo += 1
            slot = lo
        x = slot % S
        typ = slot // S
        r = u3 * rate[x]
        jtot = jump_rate * twod
        n_ev += 1
        rec[1] = x
        rec[2] = -1
        rec[3] = 0
        rec[4] = typ
        if r < jtot:
            dirn = min(int(r / jump_rate), twod - 1)
            y = nbr[x, dirn]
            rec[2] = y
            if kill[y]:
                _change(counts, tree, rate, S, slot, -1, state_i)
                if ghost:
                    _change(counts, tree, rate, S, S + y, 1, state_i)
                rec[0] = KILLED if typ == 0 else JUMP
            else:
                _change(counts, tree, rate, S, slot, -1, state_i)
                _change(counts, tree, rate, S, typ * S + y, 1, state_i)
                rec[0] = JUMP
        else:
            r -= jtot
            if r < birth[x]:
                _change(counts, tree, rate, S, slot, 1, state_i)
                rec[0] = BIRTH
            else:
                r -= birth[x]
                if r < death[x] or off_rate <= 0.0:
                    _change(counts, tree, rate, S, slot, -1, state_i)
                    rec[0] = DEATH
                else:
                    r -= death[x]
                    v = min(r / off_rate, 1.0) * off_cum[off_cum.shape[0] - 1]
                    idx = 0
                    while idx < off_cum.shape[0] - 1 and off_cum[idx] <= v:
                        idx += 1
                    k = off_k[idx]
                    _change(counts, tree, rate, S, slot, k - 1, state_i)
                    rec[0] = OFFSPRING
                    rec[3] = k
        if state_i[1] > pop_cap:
            return CAP_EXCEEDED
        state_i[3] += 1
        if state_i[3] >= _REBUILD_EVERY:
            fenwick_build(tree, counts, rate, S)
            state_i[3] = 0
