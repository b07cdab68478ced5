"""The zeroth-order hypergradient on a problem with a known answer.

On the quadratic bi-level problem
    inner: w*(a) = argmin_w 0.5||w - A a||^2
    outer: F(a)  = 0.5||w*(a) - b||^2 + 0.5||a||^2
the exact hypergradient is A^T(A a - b) + a.  The search engine never
gets this luxury -- it only gets function evaluations -- so it uses the
two-point estimator g = ((F(a + mu u) - F(a)) / mu) u with Gaussian u.
This demo shows the estimator's mean converging to the oracle.

Run: python3 demos/02_zo_estimator.py
"""

import numpy as np

from sparsenas.search import (exact_hypergradient_quadratic,
                              zo_gradient_estimate)

rng = np.random.default_rng(0)
a_mat = rng.standard_normal((4, 3))
b_vec = rng.standard_normal(4)
alpha = rng.standard_normal(3)
w_star = a_mat @ alpha


def fhat(a):
    # one exact inner gradient step from w* (unit Hessian, lr=1)
    w = w_star - (w_star - a_mat @ a)
    return 0.5 * np.sum((w - b_vec) ** 2) + 0.5 * np.sum(a ** 2)


exact = exact_hypergradient_quadratic(a_mat, b_vec, alpha)
print("exact hypergradient:", np.round(exact, 4))
print()
print(f"{'directions':>10} {'rel. L2 error':>14}")
for n in (1, 10, 100, 1000, 10_000):
    est = zo_gradient_estimate(fhat, alpha, mu=1e-4,
                               rng=np.random.default_rng(42), directions=n)
    rel = np.linalg.norm(est - exact) / np.linalg.norm(exact)
    print(f"{n:>10} {rel:>14.4f}")

print()
print("One direction is a noisy but unbiased draw; averaging shrinks the")
print("error like 1/sqrt(n).  The search uses one draw per architecture")
print("update and lets the optimizer average over time instead.")
