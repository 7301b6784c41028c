"""Independent reference computations used by the tests.

Nothing here imports the package's solvers; the values either come from
brute force or were produced once with mpmath and frozen.
"""

import math

import numpy as np
from scipy.optimize import root

# mpmath, 30 digits
I0E_AT_1 = 0.465759607593640436501901529563
KERNEL_L1_T1_A1 = 0.0932390333047333803748791760114
# 10**6-point scan of beta - (1 - m_2(beta)) on (0, 1), refined by mpmath
MODEL2_K2_U1 = 0.46557123187676802665673122522
# dense 600x600 grid search over (p, q), refined by mpmath findroot
MODEL3_L1_M2_K3_U15 = (0.340473343829757785695312916559, 0.887938208581865266165699978278)


def bessel_series(n, x, terms=60):
    """exp(-x) I_n(x) from the defining power series."""
    term = math.exp(-x) * (x / 2) ** n / math.factorial(n)
    total = 0.0
    for m in range(terms):
        total += term
        term *= (x / 2) ** 2 / ((m + 1) * (m + 1 + n))
    return total


def poisson(mean, n):
    if mean == 0:
        return 1.0 if n == 0 else 0.0
    return math.exp(n * math.log(mean) - mean - math.lgamma(n + 1))


def skellam_kernel(tau, dA, lam, nmax=200):
    """P(Y - X = 0) - P(Y - X = 1) by summing Poisson products."""
    p0 = sum(poisson(dA, n) * poisson(lam * tau, n) for n in range(nmax))
    p1 = sum(poisson(dA, n + 1) * poisson(lam * tau, n) for n in range(nmax))
    return p0 - p1


def model3_terms(p, q, K):
    pi = np.zeros((K + 1, K + 1))
    for j in range(K + 1):
        for k in range(K + 1 - j):
            pi[j, k] = p ** j / math.factorial(j) * q ** k
    return pi / pi.sum()


def model3_system(p, q, lam, mu, K, U):
    pi = model3_terms(p, q, K)
    busy = 1.0 - pi[:, 0].sum()
    j, k = np.indices(pi.shape)
    return np.array([p - lam / mu * busy, ((j + k) * pi).sum() - U])


def model3_grid_search(lam, mu, K, U, n=200):
    """Coarse grid search on the residual norm followed by a local root solve."""
    P = np.linspace(1e-3, 1.2 * lam / mu, n)
    Q = np.linspace(1e-3, max(4.0, 4 * U), n)
    best, arg = math.inf, None
    for p in P:
        for q in Q:
            r = model3_system(p, q, lam, mu, K, U)
            v = r @ r
            if v < best:
                best, arg = v, (p, q)
    sol = root(lambda z: model3_system(z[0], z[1], lam, mu, K, U), arg, tol=1e-14)
    return tuple(sol.x)


def model1_pi(lam, mu, U, J, K):
    """Poisson x Geometric product on a J x K box using the quadratic root directly."""
    rho = lam / mu
    s = U + rho + 1
    beta = (s - math.sqrt(s * s - 4 * rho * U)) / (2 * rho)
    pj = np.array([poisson(rho * beta, j) for j in range(J + 1)])
    pk = (1 - beta) * beta ** np.arange(K + 1)
    return np.outer(pj, pk), beta
