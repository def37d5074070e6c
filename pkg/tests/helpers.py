import numpy as np


def fit_nonprivate(model, X, y, steps=200, lr=0.5, seed=0):
    """Full-batch gradient descent; a non-private baseline for dataset sanity checks."""
    theta = model.init_params(np.random.default_rng(seed))
    for _ in range(steps):
        theta = theta - lr * model.per_example_grads(theta, X, y)[1].mean(axis=0)
    return theta
