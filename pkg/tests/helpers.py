"""Shared test data builders."""

import numpy as np


def synthetic_images(n, seed=0, size=32, classes=10):
    """Class-dependent uint8 images so tiny nets have something to learn."""
    r = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    base = r.integers(0, 256, size=(classes, 3, size, size))
    noise = r.integers(-40, 41, size=(n, 3, size, size))
    return np.clip(base[labels] + noise, 0, 255).astype(np.uint8), labels
