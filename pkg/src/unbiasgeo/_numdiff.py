"""Central finite differences with per-coordinate step h * max(1, |x_i|)."""

import numpy as np


def steps(x, h):
    return h * np.maximum(1.0, np.abs(np.asarray(x, dtype=float)))


def gradient(f, x, h):
    x = np.asarray(x, dtype=float)
    hs = steps(x, h)
    g = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = hs[i]
        g[i] = (f(x + e) - f(x - e)) / (2 * hs[i])
    return g


def hessian(f, x, h):
    x = np.asarray(x, dtype=float)
    d = x.size
    hs = steps(x, h)
    f0 = f(x)
    H = np.empty((d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = hs[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / hs[i] ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = hs[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4 * hs[i] * hs[j])
    return H


def jacobian(F, x, h):
    """Rows index outputs, columns index inputs."""
    x = np.asarray(x, dtype=float)
    hs = steps(x, h)
    cols = []
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = hs[i]
        cols.append((np.asarray(F(x + e)) - np.asarray(F(x - e))) / (2 * hs[i]))
    return np.stack(cols, axis=-1)


def score_derivatives(logpdf, xi, X, h1, h2):
    """Per-sample first and second parameter derivatives of ``logpdf(xi, X)``.

    Returns arrays of shape (N, d) and (N, d, d).
    """
    xi = np.asarray(xi, dtype=float)
    d = xi.size
    s1 = steps(xi, h1)
    s2 = steps(xi, h2)
    f0 = logpdf(xi, X)
    N = f0.shape[0]
    D1 = np.empty((N, d))
    D2 = np.empty((N, d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = s1[i]
        D1[:, i] = (logpdf(xi + e, X) - logpdf(xi - e, X)) / (2 * s1[i])
        ei = np.zeros(d)
        ei[i] = s2[i]
        D2[:, i, i] = (logpdf(xi + ei, X) - 2 * f0 + logpdf(xi - ei, X)) / s2[i] ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = s2[j]
            D2[:, i, j] = D2[:, j, i] = (
                logpdf(xi + ei + ej, X)
                - logpdf(xi + ei - ej, X)
                - logpdf(xi - ei + ej, X)
                + logpdf(xi - ei - ej, X)
            ) / (4 * s2[i] * s2[j])
    return D1, D2


def jacobian5(F, x, h):
    """Fourth-order central differences; same layout as `jacobian`."""
    x = np.asarray(x, dtype=float)
    hs = steps(x, h)
    cols = []
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = hs[i]
        fp1, fm1 = np.asarray(F(x + e)), np.asarray(F(x - e))
        fp2, fm2 = np.asarray(F(x + 2 * e)), np.asarray(F(x - 2 * e))
        cols.append((8 * (fp1 - fm1) - (fp2 - fm2)) / (12 * hs[i]))
    return np.stack(cols, axis=-1)
