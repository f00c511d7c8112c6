"""Shared fixtures; single-threaded BLAS is pinned before numpy loads."""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from fdaseg.phantom import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def depth2_phantom():
    return generate_phantom(PhantomSpec(shape=(32, 32, 32), depth=2, seed=11))


@pytest.fixture(scope="session")
def depth3_phantom():
    return generate_phantom(PhantomSpec(shape=(32, 32, 32), depth=3, seed=5))


def flood_fill_components(mask: np.ndarray, connectivity: int = 26):
    """Brute-force BFS labeling, independent of scipy; returns label volume."""
    if connectivity == 6:
        offs = [(dz, dy, dx) for dz, dy, dx in
                [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]]
    elif connectivity == 18:
        offs = [(dz, dy, dx)
                for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                if (dz, dy, dx) != (0, 0, 0) and abs(dz) + abs(dy) + abs(dx) <= 2]
    else:
        offs = [(dz, dy, dx)
                for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                if (dz, dy, dx) != (0, 0, 0)]
    m = np.asarray(mask) != 0
    labels = np.zeros(m.shape, dtype=np.int32)
    next_label = 0
    for start in map(tuple, np.argwhere(m)):
        if labels[start]:
            continue
        next_label += 1
        stack = [start]
        labels[start] = next_label
        while stack:
            z, y, x = stack.pop()
            for dz, dy, dx in offs:
                nb = (z + dz, y + dy, x + dx)
                if (0 <= nb[0] < m.shape[0] and 0 <= nb[1] < m.shape[1]
                        and 0 <= nb[2] < m.shape[2] and m[nb] and not labels[nb]):
                    labels[nb] = next_label
                    stack.append(nb)
    return labels, next_label
