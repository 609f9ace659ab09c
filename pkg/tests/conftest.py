import itertools

import numpy as np
import pytest
import torch


def brute_signed_distance(mask):
    """O(n^2) signed distance: min Euclidean distance to any opposite-class voxel."""
    m = np.asarray(mask).astype(bool)
    coords = np.argwhere(np.ones_like(m))
    labels = m.reshape(-1)
    out = np.empty(labels.size)
    for i, (c, lab) in enumerate(zip(coords, labels)):
        other = coords[labels != lab]
        d = np.sqrt(((other - c) ** 2).sum(axis=1)).min()
        out[i] = d if lab else -d
    return out.reshape(m.shape)


def brute_boundary(mask):
    m = np.asarray(mask).astype(bool)
    out = np.zeros_like(m)
    for idx in itertools.product(*(range(s) for s in m.shape)):
        if not m[idx]:
            continue
        for axis in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                if not 0 <= nb[axis] < m.shape[axis] or not m[tuple(nb)]:
                    out[idx] = True
    return out


def brute_surface_distances(pred, gt, spacing):
    bp = np.argwhere(brute_boundary(pred)) * np.asarray(spacing)
    bg = np.argwhere(brute_boundary(gt)) * np.asarray(spacing)
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    return np.concatenate([d.min(axis=1), d.min(axis=0)])


def random_mask(rng, shape, p=None):
    while True:
        m = (rng.random(shape) < (p if p is not None else rng.uniform(0.1, 0.9))).astype(np.uint8)
        if 0 < m.sum() < m.size:
            return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
