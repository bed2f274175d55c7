"""Inner loops of the tabular solvers.

Each kernel is written once as plain Python over numpy arrays and compiled
with numba unless ``MCML_NUMBA=0``. Where a vectorised numpy formulation
exists it is provided alongside (``*_numpy``) and used as the fallback.
"""
import numpy as np

from ._accel import NUMBA_ENABLED, jit


@jit
def _segment_max_loop(values, offsets, out_max, out_arg):
    for s in range(offsets.size - 1):
        lo = offsets[s]
        hi = offsets[s + 1]
        best = values[lo]
        arg = lo
        for k in range(lo + 1, hi):
            if values[k] > best:
                best = values[k]
                arg = k
        out_max[s] = best
        out_arg[s] = arg - lo


def segment_max_numpy(values, offsets):
    out_max = np.maximum.reduceat(values, offsets[:-1])
    seg = np.repeat(np.arange(offsets.size - 1), np.diff(offsets))
    # first position within each segment attaining the max
    hit = values == out_max[seg]
    first = np.full(offsets.size - 1, np.iinfo(np.int64).max)
    np.minimum.at(first, seg[hit], np.flatnonzero(hit))
    return out_max, first - offsets[:-1]


def segment_max(values, offsets):
    """Max and first argmax (relative) of each ``values[offsets[i]:offsets[i+1]]``.

    Segments must be non-empty.
    """
    if not NUMBA_ENABLED:
        return segment_max_numpy(values, offsets)
    out_max = np.empty(offsets.size - 1)
    out_arg = np.empty(offsets.size - 1, dtype=np.int64)
    _segment_max_loop(values, offsets, out_max, out_arg)
    return out_max, out_arg


@jit
def q_learning_loop(
    q,
    visits,
    mask,
    reward,
    action_energy,
    state_energy,
    state_radix,
    energy_caps,
    s0,
    arrivals,
    cpu_next,
    u_explore,
    u_pick,
    epsilon,
    gamma,
    lr_power,
    fixed_lr,
):
    """Run ``len(arrivals)`` epsilon-greedy Q-learning steps in place.

    Exogenous randomness (energy arrivals, next CPU shares, exploration
    uniforms) is pre-drawn so the compiled and interpreted paths agree
    exactly. ``fixed_lr < 0`` selects the visit-count step size
    ``(1 + n) ** -lr_power``. Returns the final state index.
    """
    n_dev = state_energy.shape[1]
    n_act = q.shape[1]
    s = s0
    for t in range(arrivals.shape[0]):
        row = q[s]
        m = mask[s]
        if u_explore[t] < epsilon:
            count = 0
            for a in range(n_act):
                if m[a]:
                    count += 1
            pick = int(u_pick[t] * count)
            if pick >= count:
                pick = count - 1
            a_t = -1
            for a in range(n_act):
                if m[a]:
                    if pick == 0:
                        a_t = a
                        break
                    pick -= 1
        else:
            a_t = -1
            best = -np.inf
            for a in range(n_act):
                if m[a] and row[a] > best:
                    best = row[a]
                    a_t = a

        # next state, mixed radix with device 0 most significant
        s_next = 0
        for i in range(n_dev):
            c = state_energy[s, i] - action_energy[a_t, i] + arrivals[t, i]
            if c > energy_caps[i]:
                c = energy_caps[i]
            local = cpu_next[t, i] * (energy_caps[i] + 1) + c
            s_next = s_next * state_radix[i] + local

        best_next = -np.inf
        m_next = mask[s_next]
        for a in range(n_act):
            if m_next[a] and q[s_next, a] > best_next:
                best_next = q[s_next, a]

        if fixed_lr < 0:
            lr = (1.0 + visits[s, a_t]) ** (-lr_power)
        else:
            lr = fixed_lr
        visits[s, a_t] += 1
        q[s, a_t] = (1.0 - lr) * q[s, a_t] + lr * (reward[a_t] + gamma * best_next)
        s = s_next
    return s


@jit
def _adam_loop(p, g, m, v, lr, b1, b2, c1, c2, eps):
    for i in range(p.size):
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * (g[i] * g[i])
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


def adam_update_numpy(p, g, m, v, lr, b1, b2, c1, c2, eps):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def adam_update(p, g, m, v, lr, b1, b2, c1, c2, eps):
    """Fused in-place Adam moment and parameter update on contiguous arrays."""
    if not NUMBA_ENABLED:
        adam_update_numpy(p, g, m, v, lr, b1, b2, c1, c2, eps)
        return
    _adam_loop(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1), lr, b1, b2, c1, c2, eps)


@jit
def _feasible_argmax_loop(h, w, b, states, offsets, flat, out_arg, out_val):
    hidden = h.shape[1]
    for k in range(h.shape[0]):
        s = states[k]
        best = -np.inf
        arg = -1
        for j in range(offsets[s], offsets[s + 1]):
            a = flat[j]
            q = b[a]
            for u in range(hidden):
                q += h[k, u] * w[u, a]
            if q > best:
                best = q
                arg = a
        out_arg[k] = arg
        out_val[k] = best


def feasible_argmax_numpy(h, w, b, states, offsets, flat):
    q = h @ w + b
    mask = np.zeros(q.shape, dtype=bool)
    for k, s in enumerate(states):
        mask[k, flat[offsets[s] : offsets[s + 1]]] = True
    q = np.where(mask, q, -np.inf)
    arg = q.argmax(axis=1)
    return arg, q[np.arange(q.shape[0]), arg]


def feasible_argmax(h, w, b, states, offsets, flat):
    """Argmax (lowest index on ties) and max of ``h @ w + b`` over each row's feasible set.

    Row ``k`` may use the actions ``flat[offsets[s]:offsets[s+1]]`` with
    ``s = states[k]``; ``flat`` is sorted within every segment.
    """
    if not NUMBA_ENABLED:
        return feasible_argmax_numpy(h, w, b, states, offsets, flat)
    out_arg = np.empty(h.shape[0], dtype=np.int64)
    out_val = np.empty(h.shape[0])
    _feasible_argmax_loop(h, w, b, states, offsets, flat, out_arg, out_val)
    return out_arg, out_val


@jit
def _selected_q_loop(h, w, b, actions, out):
    hidden = h.shape[1]
    for k in range(h.shape[0]):
        a = actions[k]
        q = b[a]
        for u in range(hidden):
            q += h[k, u] * w[u, a]
        out[k] = q


def selected_q_numpy(h, w, b, actions):
    return (h @ w + b)[np.arange(h.shape[0]), actions]


def selected_q(h, w, b, actions):
    """``(h @ w + b)[k, actions[k]]``, rounded exactly as :func:`feasible_argmax` rounds."""
    actions = np.asarray(actions, dtype=np.int64)
    if not NUMBA_ENABLED:
        return selected_q_numpy(h, w, b, actions)
    out = np.empty(h.shape[0])
    _selected_q_loop(h, w, b, actions, out)
    return out
