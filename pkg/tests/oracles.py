"""Independent reference computations used by several test modules."""

import numpy as np

FD_EPS = 1e-5
# entries whose true size is below this are compared on an absolute scale
REL_FLOOR = 1e-6


def central_differences(f, params, eps=FD_EPS):
    """Numerical gradient of scalar ``f()`` w.r.t. each array in ``params``.

    The arrays are perturbed in place and restored.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = f()
            flat[i] = old - eps
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=REL_FLOOR):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


def brute_force_kmeans_inertia(z, centroids):
    return sum(min(float(np.sum((row - c) ** 2)) for c in centroids) for row in z)


def random_ftl_instance(rng, seed):
    """Small random two-party setup with at most 200 parameters in total."""
    from fedxfer.ftl import HyperParams, PartyA, PartyB
    from fedxfer.nn import init_model

    k = int(rng.integers(2, 5))
    dims_a = [int(rng.integers(2, 6)), int(rng.integers(2, 7)), k]
    dims_b = [int(rng.integers(2, 6)), int(rng.integers(2, 7)), k]
    act = str(rng.choice(["tanh", "identity"]))
    n_a, n_b = int(rng.integers(4, 9)), int(rng.integers(4, 9))
    m = int(rng.integers(1, min(n_a, n_b) + 1))
    model_a = init_model(dims_a, act, seed=seed)
    model_b = init_model(dims_b, act, seed=seed + 1)
    for b in model_a.biases + model_b.biases:
        b[:] = rng.normal(scale=0.2, size=b.shape)
    y = rng.choice([-1, 1], size=n_a)
    a = PartyA(model_a, rng.uniform(0, 1, size=(n_a, dims_a[0])), y, rng.choice(n_a, m, replace=False))
    b = PartyB(model_b, rng.uniform(0, 1, size=(n_b, dims_b[0])), rng.choice(n_b, m, replace=False))
    hyper = HyperParams(
        gamma=float(rng.uniform(0, 2)),
        lam=float(rng.uniform(0, 0.5)),
        alignment=str(rng.choice(["squared_distance", "negative_inner_product"])),
    )
    return a, b, hyper


def exchange(a, b, hyper):
    """One latent exchange plus both gradient computations, no channel."""
    z_ov, y_ov, phi = a.compute_latents()
    zb = b.compute_latents()
    a.receive(zb)
    b.receive(z_ov, y_ov, phi)
    ga, la = a.gradients(hyper)
    gb, lb = b.gradients(hyper)
    return ga, gb, la, lb


def joint_fd_error(a, b, hyper):
    """Max relative error of both parties' protocol gradients vs finite differences."""
    from fedxfer.ftl import joint_objective

    ga, gb, _, _ = exchange(a, b, hyper)

    def objective():
        return joint_objective(a.model, b.model, a.x, a.y, a.overlap, b.x, b.overlap, hyper).total

    params = a.model.parameters() + b.model.parameters()
    numeric = central_differences(objective, params)
    return max_relative_error(ga.parameters() + gb.parameters(), numeric), sum(p.size for p in params)
