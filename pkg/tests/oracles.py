"""Independent reference computations used only by the tests.

None of these touch the package's numerical paths: they are scalar loops,
textbook Jacobi rotations, or dense materializations.
"""

import math

import numpy as np


def matmul_loops(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def jacobi_eigenvalues(S, tol=1e-14, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations."""
    A = np.array(S, dtype=float)
    n = A.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(sum(A[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * max(1.0, math.sqrt(float(np.sum(A * A)))):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
    return np.sort(np.diag(A))[::-1]


def singular_values_by_jacobi(a):
    a = np.asarray(a, dtype=float)
    ev = jacobi_eigenvalues(a.T @ a)
    r = min(a.shape)
    return np.sqrt(np.clip(ev[:r], 0.0, None))


def dense_projection(pi, counts):
    pi = np.asarray(pi)
    P = np.zeros((pi.shape[0], len(counts)))
    for t, q in enumerate(pi):
        P[t, q] = 1.0 / math.sqrt(counts[q])
    return P


def silu_scalar(x):
    return x / (1.0 + math.exp(-x))


def expert_loop(A, bases, alpha_row, K, activation, residual=None):
    """Scalar-loop evaluation of A @ phi(sum_j alpha_j align(B_j, K)) (+ residual)."""
    p = A.shape[0]
    d = bases[0].shape[1]
    M = [[0.0] * d for _ in range(K)]
    for j, B in enumerate(bases):
        for r in range(min(K, B.shape[0])):
            for c in range(d):
                M[r][c] += alpha_row[j] * B[r, c]
    phi = silu_scalar if activation == "silu" else (lambda v: v)
    out = np.zeros((p, d))
    for i in range(p):
        for c in range(d):
            s = 0.0
            for r in range(K):
                s += A[i, r] * phi(M[r][c])
            out[i, c] = s + (0.0 if residual is None else residual[i, c])
    return out


def moe_forward_loop(up, gate, down, router, top_k, x, renormalize=False):
    """Scalar-loop evaluation of a top-k SwiGLU mixture on one token."""
    n, p, d = up.shape
    logits = [sum(router[e, c] * x[c] for c in range(d)) for e in range(n)]
    mx = max(logits)
    ex = [math.exp(v - mx) for v in logits]
    total = sum(ex)
    probs = [v / total for v in ex]
    # selection by descending probability, lower index first on ties
    chosen = sorted(range(n), key=lambda e: (-probs[e], e))[:top_k]
    norm = sum(probs[e] for e in chosen) if renormalize else 1.0
    y = [0.0] * d
    for e in chosen:
        h = []
        for r in range(p):
            u = sum(up[e, r, c] * x[c] for c in range(d))
            g = sum(gate[e, r, c] * x[c] for c in range(d))
            h.append(u * silu_scalar(g))
        for c in range(d):
            y[c] += probs[e] / norm * sum(down[e, c, r] * h[r] for r in range(p))
    return np.array(y)
