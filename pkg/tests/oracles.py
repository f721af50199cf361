"""Independent reference computations used by the tests.

Everything here is written from the definitions with plain Python loops
or exact arithmetic, sharing no code with the package under test.
"""

import itertools
import math
from fractions import Fraction

import numpy as np

from attentive_saliency import backbone as bb


# -- metrics ---------------------------------------------------------------------

def nss_loop(pred, fix):
    vals = [float(v) for v in np.asarray(pred).ravel()]
    n = len(vals)
    mu = sum(vals) / n
    sd = math.sqrt(sum((v - mu) ** 2 for v in vals) / n)
    hits = [(v - mu) / sd for v, f in zip(vals, np.asarray(fix).ravel()) if f]
    return sum(hits) / len(hits)


def cc_loop(a, b):
    xs = [float(v) for v in np.asarray(a).ravel()]
    ys = [float(v) for v in np.asarray(b).ravel()]
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
    sx = math.sqrt(sum((x - mx) ** 2 for x in xs) / n)
    sy = math.sqrt(sum((y - my) ** 2 for y in ys) / n)
    return cov / (sx * sy)


def kl_loop(pred, gt, eps=1e-7):
    ps = [float(v) for v in np.asarray(pred).ravel()]
    qs = [float(v) for v in np.asarray(gt).ravel()]
    sp, sq = sum(ps), sum(qs)
    total = 0.0
    for p, q in zip(ps, qs):
        p, q = p / sp, q / sq
        total += q * math.log(q / (p + eps) + eps)
    return total


def auc_threshold_fraction(pos, neg):
    """ROC area by walking every distinct positive score as a threshold, exactly."""
    pos = np.asarray(pos, float).ravel()
    neg = np.asarray(neg, float).ravel()
    pts = [(Fraction(0), Fraction(0))]
    for t in sorted(set(pos.tolist()), reverse=True):
        tp = Fraction(int(np.sum(pos >= t)), len(pos))
        fp = Fraction(int(np.sum(neg >= t)), len(neg))
        pts.append((fp, tp))
    pts.append((Fraction(1), Fraction(1)))
    area = Fraction(0)
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2
    return area


def auc_judd_fraction(pred, fix):
    s = np.asarray(pred).ravel()
    f = np.asarray(fix).ravel().astype(bool)
    return auc_threshold_fraction(s[f], s[~f])


def auc_pairwise(pos, neg):
    """Mann-Whitney form of the same area: P(pos > neg) with ties counted half."""
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


# -- transport ---------------------------------------------------------------------

def emd_linprog(p, q):
    """Transport cost through scipy's HiGHS LP solver on the full plan."""
    from scipy.optimize import linprog

    p = np.asarray(p, float)
    q = np.asarray(q, float)
    p, q = p / p.sum(), q / q.sum()
    h, w = p.shape
    coords = np.array([(i, j) for i in range(h) for j in range(w)], float)
    cost = np.hypot(*(coords[:, None, :] - coords[None, :, :]).transpose(2, 0, 1))
    n = h * w
    a_eq = np.zeros((2 * n, n * n))
    for i in range(n):
        a_eq[i, i * n:(i + 1) * n] = 1
        a_eq[n + i, i::n] = 1
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=np.concatenate([p.ravel(), q.ravel()]),
                  bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun


def transport_vertices(supply, demand, cost):
    """Minimum cost over every vertex of the transport polytope.

    Each vertex is a basic solution: pick m + n - 1 cells, solve the balance
    equations restricted to them, keep it when the system is nonsingular and
    the flows are non-negative.
    """
    supply = np.asarray(supply, float)
    demand = np.asarray(demand, float)
    cost = np.asarray(cost, float)
    m, n = len(supply), len(demand)
    cells = [(i, j) for i in range(m) for j in range(n)]
    rhs = np.concatenate([supply, demand])[:-1]   # one balance row is redundant
    best = math.inf
    for basis in itertools.combinations(range(len(cells)), m + n - 1):
        a = np.zeros((m + n - 1, m + n - 1))
        for col, c in enumerate(basis):
            i, j = cells[c]
            a[i, col] = 1.0
            if m + j < m + n - 1:
                a[m + j, col] = 1.0
        if abs(np.linalg.det(a)) < 0.5:          # bases of this matrix have det +-1
            continue
        x = np.linalg.solve(a, rhs)
        if x.min() < -1e-12:
            continue
        best = min(best, sum(x[k] * cost[cells[c]] for k, c in enumerate(basis)))
    return best


def grid_cost(h, w):
    pts = [(i, j) for i in range(h) for j in range(w)]
    return [[math.hypot(a[0] - b[0], a[1] - b[1]) for b in pts] for a in pts]


def emd_enumerate(p, q):
    """Brute-force EMD of two small grids, cancelling shared mass first.

    Mass left in place costs nothing, so only the surplus cells need to ship
    and only the deficit cells receive; the optimum is then a vertex of the
    much smaller surplus-to-deficit transport polytope.
    """
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    p, q = p / p.sum(), q / q.sum()
    h, w = p.shape
    d = (p - q).ravel()
    src = [k for k in range(d.size) if d[k] > 0]
    dst = [k for k in range(d.size) if d[k] < 0]
    full = grid_cost(h, w)
    cost = [[full[a][b] for b in dst] for a in src]
    return transport_vertices([d[k] for k in src], [-d[k] for k in dst], cost)


# -- networks ---------------------------------------------------------------------

def random_linear_net(rng):
    """A random chain of bias-free valid convs with one or more strided layers.

    Returns ``(spec, params, input, index of a strided layer)``.
    """
    n_layers = int(rng.integers(2, 5))
    c = int(rng.integers(1, 3))
    layers, params = [], []
    c_in = c
    for _ in range(n_layers):
        ch = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        s = int(rng.choice([1, 2, 3]))
        layers.append(bb.conv(ch, k, stride=s, padding="valid"))
        params.append((rng.normal(size=(ch, c_in, k, k)), np.zeros(ch)))
        c_in = ch
    strided = [i for i, l in enumerate(layers) if l.stride > 1]
    if not strided:
        i = int(rng.integers(0, n_layers))
        layers[i] = bb.conv(layers[i].channels, layers[i].kernel, stride=2, padding="valid")
        strided = [i]
    net = bb.NetworkSpec(c, tuple(layers))
    # walk back from a small final extent so every layer has output left
    def needed(n_out):
        for l in reversed(layers):
            n_out = (n_out - 1) * l.stride + l.kernel
        return n_out + int(rng.integers(0, 3))
    x = rng.normal(size=(c, needed(int(rng.integers(2, 5))), needed(int(rng.integers(2, 5)))))
    return net, params, x, int(rng.choice(strided))


def dilation_equivalence_error(net, params, x, i):
    """Max deviation between the original output and the transformed one subsampled."""
    s = net.layers[i].stride
    y = bb.forward(net, params, x)
    y2 = bb.forward(bb.dilate_transform(net, i), params, x)
    sub = y2[:, ::s, ::s]
    assert sub.shape == y.shape, (sub.shape, y.shape)
    return float(np.max(np.abs(y - sub)))
