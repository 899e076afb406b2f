"""Independent numerical oracles shared by the test modules."""

import numpy as np

NOISE = -1


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences (``x`` is restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- brute-force oracle: threshold graphs and BFS, no MST or union-find -------

def _components(members, w, below):
    members = list(members)
    left = set(members)
    comps = []
    while left:
        seed = min(left)
        left.discard(seed)
        comp, frontier = [seed], [seed]
        while frontier:
            a = frontier.pop()
            for b in sorted(left):
                if w[a, b] < below:
                    left.discard(b)
                    comp.append(b)
                    frontier.append(b)
        comps.append(sorted(comp))
    return comps


def _bottleneck(members, w):
    cands = sorted({w[a, b] for a in members for b in members if a < b})
    for t in cands:
        if len(_components(members, w, np.nextafter(t, np.inf))) == 1:
            return t
    raise AssertionError("unreachable")


def oracle_hdbscan(x, min_cluster_size=2, min_samples=1):
    n = len(x)
    if n < min_cluster_size:
        return np.full(n, NOISE)
    d = np.array([[np.linalg.norm(a - b) for b in x] for a in x])
    core = np.array([sorted(row)[min(min_samples, n - 1)] for row in d])
    w = np.maximum(d, np.maximum(core[:, None], core[None, :]))

    clusters = {}  # id -> dict(points, birth, stability, kids, parent)
    counter = [0]

    def new_cluster(points, birth, parent):
        cid = counter[0]
        counter[0] += 1
        clusters[cid] = dict(points=list(points), birth=birth, stab=0.0, kids=[], parent=parent)
        return cid

    def fall(cid, pts, lam):
        clusters[cid]["stab"] += (lam - clusters[cid]["birth"]) * len(pts)

    def grow(cid, members):
        while True:
            if len(members) == 1:
                fall(cid, members, np.inf)
                return
            t = _bottleneck(members, w)
            lam = np.inf if t == 0 else 1.0 / t
            comps = _components(members, w, t)
            big = [c for c in comps if len(c) >= min_cluster_size]
            if np.isinf(lam):
                big = []
            small = [p for c in comps if c not in big for p in c]
            fall(cid, small, lam)
            if len(big) >= 2:
                for c in big:
                    fall(cid, c, lam)
                    kid = new_cluster(c, lam, cid)
                    clusters[cid]["kids"].append(kid)
                    grow(kid, c)
                return
            if not big:
                return
            members = big[0]

    root = new_cluster(range(n), 0.0, None)
    grow(root, list(range(n)))

    def best(c):
        kids = clusters[c]["kids"]
        if not kids:
            return clusters[c]["stab"], [c]
        total, sel = 0.0, []
        for k in kids:
            v, s = best(k)
            total += v
            sel += s
        if total > clusters[c]["stab"]:
            return total, sel
        return clusters[c]["stab"], [c]

    if clusters[root]["kids"]:
        selected = [s for k in clusters[root]["kids"] for s in best(k)[1]]
    else:
        selected = [root]
    labels = np.full(n, NOISE)
    for i, c in enumerate(selected):
        # a selected cluster owns every point it held at birth
        labels[clusters[c]["points"]] = i
    return labels


def canonical_partition(labels):
    """Cluster partition as a set of frozensets plus the noise set."""
    groups = {}
    for i, l in enumerate(labels):
        groups.setdefault(int(l), []).append(i)
    noise = frozenset(groups.pop(NOISE, []))
    return frozenset(frozenset(g) for g in groups.values()), noise
