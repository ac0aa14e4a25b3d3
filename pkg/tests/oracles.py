"""Independent oracles the tests check the implementation against.

Everything here is written from first principles with no imports from the
package internals it verifies (only plain data types cross the boundary), so
a bug cannot cancel on both sides of an assertion.
"""

from collections import deque
from fractions import Fraction

import numpy as np


def fd_gradient(f, x: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    idx = range(len(x)) if indices is None else indices
    g = np.zeros(len(x))
    for i in idx:
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def fd_close(analytic: np.ndarray, numeric: np.ndarray, rel: float = 1e-4, floor: float = 1e-6) -> bool:
    gap = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return bool(np.all(gap <= np.maximum(floor, rel * scale)))


def bfs_distances(passable: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Multi-source BFS over 4-connected passable cells; -1 where unreachable."""
    m = passable.shape[0]
    dist = np.full((m, m), -1, dtype=int)
    q = deque()
    for r in range(m):
        for c in range(m):
            if sources[r, c] and passable[r, c]:
                dist[r, c] = 0
                q.append((r, c))
    while q:
        r, c = q.popleft()
        for nr, nc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if 0 <= nr < m and 0 <= nc < m and passable[nr, nc] and dist[nr, nc] < 0:
                dist[nr, nc] = dist[r, c] + 1
                q.append((nr, nc))
    return dist


def sampled_line_of_sight(occluder: np.ndarray, a: tuple, b: tuple, samples: int = 4096) -> bool:
    """Exact-rational dense sampling of the open segment between cell centers.

    A point strictly inside an occluder cell's interior blocks sight. With
    unit cells and the small offsets used in tests, any crossing interval is
    far wider than the sampling step, so this matches the open-interior
    predicate while sharing none of its code.
    """
    (r0, c0), (r1, c1) = a, b
    for i in range(1, samples):
        t = Fraction(i, samples)
        # doubled coordinates keep everything integral: centers at odd integers
        x = 2 * r0 + 1 + t * (2 * (r1 - r0))
        y = 2 * c0 + 1 + t * (2 * (c1 - c0))
        ir, ic = int(x // 2), int(y // 2)
        if (ir, ic) in (a, b):
            continue
        if 0 <= ir < occluder.shape[0] and 0 <= ic < occluder.shape[1] and occluder[ir, ic]:
            # strictly inside, not on the boundary lines
            if x != 2 * ir and x != 2 * ir + 2 and y != 2 * ic and y != 2 * ic + 2:
                return False
    return True


def gae_double_loop(rewards, values, dones, last_values, gamma, lam):
    """Direct double-loop GAE: sum of discounted TD residuals within each episode."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n_steps, n_envs = rewards.shape
    adv = np.zeros_like(rewards)
    for e in range(n_envs):
        for t in range(n_steps):
            acc = 0.0
            coef = 1.0
            for j in range(t, n_steps):
                if j == n_steps - 1:
                    next_v = last_values[e]
                else:
                    next_v = values[j + 1, e]
                nonterm = 0.0 if dones[j, e] else 1.0
                delta = rewards[j, e] + gamma * next_v * nonterm - values[j, e]
                acc += coef * delta
                if dones[j, e]:
                    break
                coef *= gamma * lam
            adv[t, e] = acc
    return adv


def discounted_return(rewards, gamma):
    return float(sum(r * gamma**t for t, r in enumerate(rewards)))


def kl_divergence(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    sup = p > 0
    return float(np.sum(p[sup] * (np.log(p[sup]) - np.log(q[sup]))))
