"""The redundancy-reduction objective on toy embedding batches.

Shows the cross-correlation matrix and the loss decomposition for three
situations: perfectly aligned decorrelated branches (loss 0), aligned but
redundant dimensions, and misaligned branches.

    python demos/02_objective_geometry.py
"""

import numpy as np

from street2vec.objective import center, correlation_summary, loss_gradient


def describe(title, z_a, z_b, lam=0.005):
    summary = correlation_summary(z_a, z_b, lam)
    print(f"\n--- {title}")
    print(f"invariance {summary.invariance:.4f}  redundancy {summary.redundancy:.4f}"
          f"  loss {summary.loss:.4f}  mean|offdiag| {summary.offdiag_mean_abs:.4f}")
    with np.printoptions(precision=2, suppress=True):
        print(summary.matrix)


def main():
    rng = np.random.default_rng(0)
    n, d = 64, 4

    # 1. ideal: same decorrelated content on both branches
    base = rng.normal(size=(n, d))
    base = center(base)
    base, _ = np.linalg.qr(base)  # orthogonal columns = decorrelated
    describe("identical decorrelated branches (the optimum)", base, base)

    # 2. redundant: two dimensions carry the same signal
    redundant = base.copy()
    redundant[:, 3] = redundant[:, 2] * 0.95 + 0.05 * rng.normal(size=n)
    describe("aligned branches with duplicated dimensions", redundant, redundant)

    # 3. misaligned: branch B mixes in independent noise
    noisy = 0.4 * base + 0.6 * center(rng.normal(size=(n, d)))
    describe("weakly aligned branches (nuisance dominates)", base, noisy)

    # gradients pull the noisy branch back toward alignment
    g_a, g_b = loss_gradient(base, noisy)
    print(f"\ngradient norms: branch A {np.linalg.norm(g_a):.3f}, branch B {np.linalg.norm(g_b):.3f}")
    print("(the objective is what training minimizes over encoder parameters)")


if __name__ == "__main__":
    main()
