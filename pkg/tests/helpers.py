"""Shared test oracles."""
import math

import numpy as np
import torch


def fd_check(loss_fn, param: torch.Tensor, n_entries: int = 4, eps: float = 1e-6, seed: int = 0):
    """Compare autograd against central differences on the largest-gradient entries of ``param``.

    Returns (analytic, numeric) arrays. ``loss_fn`` recomputes the loss from scratch.
    """
    param.grad = None
    loss_fn().backward()
    grad = param.grad.detach().reshape(-1).clone()
    # a few of the largest entries plus random ones; tiny gradients make relative error meaningless
    order = torch.argsort(grad.abs(), descending=True)
    rng = np.random.default_rng(seed)
    top = order[: max(1, n_entries // 2)].tolist()
    live = order[: max(len(order) // 4, 1)].tolist()
    picks = top + [int(i) for i in rng.choice(live, size=min(n_entries - len(top), len(live)), replace=False)]
    analytic, numeric = [], []
    flat = param.data.view(-1)
    for i in picks:
        old = flat[i].item()
        with torch.no_grad():
            flat[i] = old + eps
            up = float(loss_fn())
            flat[i] = old - eps
            down = float(loss_fn())
            flat[i] = old
        analytic.append(float(grad[i]))
        numeric.append((up - down) / (2 * eps))
    return np.array(analytic), np.array(numeric)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


# ------------------------------------------------------------ clustering oracles
# Written straight from the definitions with Python loops, sharing no code with the package.

def oracle_ari(a, b):
    n11 = n10 = n01 = n00 = 0
    n = len(a)
    for i in range(n):
        for j in range(i + 1, n):
            same_a, same_b = a[i] == a[j], b[i] == b[j]
            if same_a and same_b:
                n11 += 1
            elif same_a:
                n10 += 1
            elif same_b:
                n01 += 1
            else:
                n00 += 1
    denom = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11)
    if denom == 0:
        return 1.0
    return 2.0 * (n00 * n11 - n01 * n10) / denom


def oracle_mi(a, b):
    n = len(a)
    total = 0.0
    for u in set(a):
        for v in set(b):
            nuv = sum(1 for x, y in zip(a, b) if x == u and y == v)
            if nuv:
                nu = sum(1 for x in a if x == u)
                nv = sum(1 for y in b if y == v)
                total += nuv / n * math.log(n * nuv / (nu * nv))
    return total


def _dist(p, q):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(p, q)))


def oracle_silhouette(x, labels):
    x = [list(map(float, r)) for r in x]
    scores = []
    for i, p in enumerate(x):
        own = [j for j in range(len(x)) if labels[j] == labels[i] and j != i]
        if not own:
            scores.append(0.0)
            continue
        a = sum(_dist(p, x[j]) for j in own) / len(own)
        b = min(
            sum(_dist(p, x[j]) for j in range(len(x)) if labels[j] == c) / sum(1 for l in labels if l == c)
            for c in set(labels) if c != labels[i]
        )
        scores.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return sum(scores) / len(scores)


def _centroids(x, labels):
    out = {}
    for c in sorted(set(labels)):
        pts = [r for r, l in zip(x, labels) if l == c]
        out[c] = [sum(col) / len(pts) for col in zip(*pts)]
    return out


def oracle_davies_bouldin(x, labels):
    x = [list(map(float, r)) for r in x]
    cents = _centroids(x, labels)
    scatter = {c: sum(_dist(r, cents[c]) for r, l in zip(x, labels) if l == c) / sum(1 for l in labels if l == c)
               for c in cents}
    worst = []
    for i in cents:
        worst.append(max((scatter[i] + scatter[j]) / _dist(cents[i], cents[j]) for j in cents if j != i))
    return sum(worst) / len(worst)


def oracle_calinski_harabasz(x, labels):
    x = [list(map(float, r)) for r in x]
    n, k = len(x), len(set(labels))
    mean = [sum(col) / n for col in zip(*x)]
    cents = _centroids(x, labels)
    between = sum(sum(1 for l in labels if l == c) * _dist(cents[c], mean) ** 2 for c in cents)
    within = sum(_dist(r, cents[l]) ** 2 for r, l in zip(x, labels))
    return between * (n - k) / (within * (k - 1))


def brute_force_min_inertia(x, k):
    """Exact minimum within-cluster sum of squares over all partitions into exactly k blocks.

    Enumerates restricted growth strings, pruning a branch once its partial cost
    already exceeds the best complete partition (adding points never lowers a cost).
    """
    x = np.asarray(x, float)
    n = len(x)
    best = [math.inf]

    def cost(sums, sqs, counts):
        return sum(sq - (s @ s) / c for s, sq, c in zip(sums, sqs, counts) if c)

    def rec(i, used, sums, sqs, counts):
        partial = cost(sums, sqs, counts)
        if partial >= best[0]:
            return
        if n - i < k - used:
            return
        if i == n:
            best[0] = partial
            return
        for c in range(min(used + 1, k)):
            sums[c] = sums[c] + x[i]
            sqs[c] += x[i] @ x[i]
            counts[c] += 1
            rec(i + 1, max(used, c + 1), sums, sqs, counts)
            sums[c] = sums[c] - x[i]
            sqs[c] -= x[i] @ x[i]
            counts[c] -= 1

    rec(0, 0, [np.zeros(x.shape[1]) for _ in range(k)], [0.0] * k, [0] * k)
    return best[0]


def four_blobs(seed=0, per_blob=25, side=10.0, std=0.1):
    rng = np.random.default_rng(seed)
    corners = np.array([[0, 0], [side, 0], [0, side], [side, side]], float)
    x = np.concatenate([c + rng.normal(0, std, (per_blob, 2)) for c in corners])
    return x, np.repeat(np.arange(4), per_blob)


def random_clustering_instance(rng):
    n = int(rng.integers(6, 61))
    d = int(rng.integers(1, 9))
    k = int(rng.integers(2, 5))
    x = rng.normal(size=(n, d)) + rng.integers(0, 3, (n, 1)) * 2.0
    labels = rng.integers(0, k, n)
    labels[:2] = [0, 1]  # at least two clusters
    true = rng.integers(0, k, n)
    return x, labels, true


# ------------------------------------------------------------ acceptance bookkeeping

ACCEPTANCE = {}


class criterion:
    """Context manager recording one pass/fail line per acceptance criterion."""

    def __init__(self, number, title):
        self.number, self.title = number, title

    def __enter__(self):
        import time
        self.t0 = time.perf_counter()
        self.detail = ""
        return self

    def __exit__(self, exc_type, exc, tb):
        import time
        status = "PASS" if exc_type is None else "FAIL"
        secs = time.perf_counter() - self.t0
        line = f"criterion {self.number:>2} {status}  {self.title} ({secs:.1f}s)"
        if self.detail:
            line += f"  [{self.detail}]"
        if exc_type is not None and exc is not None:
            line += f"  {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE[self.number] = line
        print(line)
        return False
