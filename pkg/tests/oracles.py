"""Independent reference computations shared by unit and acceptance tests."""

import itertools
import math

import numpy as np
from scipy import integrate


def beta_posterior_mean_quadrature(alpha, counts):
    """E[theta_0] under Dirichlet(alpha + counts) for K=2, by direct integration."""
    a = float(alpha[0] + counts[0])
    b = float(alpha[1] + counts[1])
    mode = min(max((a - 1) / (a + b - 2), 1e-9), 1 - 1e-9) if a + b > 2 else 0.5
    shift = (a - 1) * math.log(mode) + (b - 1) * math.log1p(-mode)

    def dens(t):
        if t <= 0.0 or t >= 1.0:
            return 0.0
        return math.exp((a - 1) * math.log(t) + (b - 1) * math.log1p(-t) - shift)

    opts = dict(epsabs=0.0, epsrel=1e-12, limit=200, points=[mode])
    z = integrate.quad(dens, 0.0, 1.0, **opts)[0]
    m = integrate.quad(lambda t: t * dens(t), 0.0, 1.0, **opts)[0]
    return np.array([m / z, 1.0 - m / z])


def dirichlet_mc_mean(alpha, counts, n, rng):
    """Monte-Carlo posterior mean and its per-coordinate standard error."""
    draws = rng.dirichlet(np.asarray(alpha) + np.asarray(counts), size=n)
    return draws.mean(0), draws.std(0, ddof=1) / math.sqrt(n)


def recall_def(ranked, truth, k):
    return sum(1 for i in ranked[:k] if i in truth) / len(truth)


def precision_def(ranked, truth, k):
    return sum(1 for i in ranked[:k] if i in truth) / k


def ndcg_def(ranked, truth, k):
    dcg = sum((1.0 if ranked[j] in truth else 0.0) / math.log2(j + 2) for j in range(min(k, len(ranked))))
    return dcg / sum(1.0 / math.log2(j + 2) for j in range(k))


def ap_def(ranked, truth, k):
    total, hits = 0.0, 0
    for j in range(min(k, len(ranked))):
        if ranked[j] in truth:
            hits += 1
            total += hits / (j + 1)
    return total / len(truth)


def permutation_cases(max_items=6):
    """(ranked list, truth set) over every ordering of up to ``max_items`` items."""
    for n in range(1, max_items + 1):
        for perm in itertools.permutations(range(n)):
            for mask in range(1, 2 ** n, max(1, (2 ** n) // 5)):
                truth = {i for i in range(n) if (mask >> i) & 1}
                yield list(perm), truth
