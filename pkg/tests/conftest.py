"""Shared fixtures and independent oracle helpers.

Oracles here are written from scratch (plain numpy/torch loops) so tests
compare the library against a second implementation, not against itself.
"""

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def make_gen(seed):
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def rand(shape, seed, dtype=torch.float64, lo=0.0, hi=1.0):
    gen = make_gen(seed)
    return lo + (hi - lo) * torch.rand(shape, generator=gen, dtype=dtype)


def fd_gradients(fn, param, coords, eps=1e-6):
    """Central finite differences of scalar fn() w.r.t. param at coords.

    Mutates param in place and restores it; fn must re-read param.
    """
    flat = param.detach().reshape(-1)
    out = []
    for i in coords:
        orig = float(flat[i])
        step = eps * max(1.0, abs(orig))
        flat[i] = orig + step
        hi = float(fn().detach())
        flat[i] = orig - step
        lo = float(fn().detach())
        flat[i] = orig
        out.append((hi - lo) / (2.0 * step))
    return out


def check_gradients(fn, params, rel_tol, n_coords=8, seed=0, eps=1e-6):
    """Compare autograd of scalar fn() against central differences.

    Coordinates whose analytic and numeric gradients are both tiny
    relative to the largest gradient are skipped (relative error is
    meaningless at zero). Returns the worst relative error seen.
    """
    rng = np.random.default_rng(seed)
    value = fn()
    grads = torch.autograd.grad(value, params, allow_unused=True)
    worst = 0.0
    checked = 0
    for p, g in zip(params, grads):
        if g is None:
            continue
        gflat = g.detach().reshape(-1)
        n = gflat.numel()
        coords = rng.choice(n, size=min(n_coords, n), replace=False)
        fd = fd_gradients(fn, p, coords, eps=eps)
        gmax = float(gflat.abs().max())
        for i, fdi in zip(coords, fd):
            an = float(gflat[i])
            scale = max(abs(an), abs(fdi))
            if scale < 1e-7 * max(gmax, 1e-12):
                continue
            rel = abs(an - fdi) / scale
            worst = max(worst, rel)
            checked += 1
            assert rel < rel_tol, (
                "gradient mismatch at flat index %d: analytic %r vs fd %r "
                "(rel %.3g, tol %.3g)" % (i, an, fdi, rel, rel_tol))
    assert checked > 0, "no gradient coordinates were comparable"
    return worst


def oracle_interp(field, coords):
    """Independent clamped multilinear interpolation oracle.

    field: (*spatial) array-like; coords: (ndim, *out_spatial) absolute
    positions. Positions clamp to the voxel box (edge-value extension),
    matching the package convention but implemented separately in numpy.
    """
    import itertools
    f = np.asarray(field, dtype=np.float64)
    c = np.asarray(coords, dtype=np.float64)
    ndim = c.shape[0]
    out_shape = c.shape[1:]
    pos = [np.clip(c[d].ravel(), 0.0, f.shape[d] - 1.0) for d in range(ndim)]
    lo = [np.clip(np.floor(p).astype(int), 0, f.shape[d] - 2)
          for d, p in enumerate(pos)]
    frac = [p - l for p, l in zip(pos, lo)]
    acc = np.zeros(pos[0].size, dtype=np.float64)
    for corner in itertools.product((0, 1), repeat=ndim):
        idx = tuple(lo[d] + corner[d] for d in range(ndim))
        w = np.ones_like(acc)
        for d in range(ndim):
            w = w * (frac[d] if corner[d] else 1.0 - frac[d])
        acc += w * f[idx]
    return torch.from_numpy(acc.reshape(out_shape))


def oracle_warp(image, disp):
    """Warp oracle built on oracle_interp."""
    disp = np.asarray(disp, dtype=np.float64)
    ndim = disp.shape[0]
    spatial = disp.shape[1:]
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64)
                                  for n in spatial], indexing="ij"))
    return oracle_interp(image, grid + disp)


def euler_flow(velocity, steps=1024):
    """Flow of a stationary velocity via explicit Euler; oracle only.

    phi_{t+dt}(x) = phi_t(x) + dt * v(x + phi_t(x)), phi_0 = 0.
    """
    v = np.asarray(velocity, dtype=np.float64)
    ndim = v.shape[0]
    spatial = v.shape[1:]
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64)
                                  for n in spatial], indexing="ij"))
    phi = np.zeros_like(v)
    dt = 1.0 / steps
    for _ in range(steps):
        pos = grid + phi
        inc = np.stack([np.asarray(oracle_interp(v[d], pos))
                        for d in range(ndim)])
        phi = phi + dt * inc
    return torch.from_numpy(phi)


def smooth_velocity(shape, seed, magnitude, sigma=None):
    """Band-limited random velocity with max vector norm = magnitude.

    Default bandwidth min(shape)/3 keeps the composition interpolation
    error of scaling-and-squaring well under the Euler-oracle tolerance;
    rougher fields hit that method's spatial error floor.
    """
    from scipy.ndimage import gaussian_filter
    if sigma is None:
        sigma = min(shape) / 3.0
    rng = np.random.default_rng(seed)
    comps = [gaussian_filter(rng.standard_normal(shape), sigma=sigma)
             for _ in range(len(shape))]
    v = np.stack(comps)
    norm = np.sqrt((v * v).sum(axis=0)).max()
    if norm > 0:
        v = v * (magnitude / norm)
    return torch.from_numpy(v)


@pytest.fixture
def tiny_dataset():
    """3 train / 2 val / 2 test pairs at 24^2, 3 labels; session-fast."""
    from autoreg.config import SynthSpec
    from autoreg.data import Dataset
    from autoreg.synth import generate_splits
    spec = SynthSpec(ndim=2, shape=(24, 24), n_train=3, n_val=2, n_test=2,
                     num_labels=3, amplitude=2.0, smooth_sigma=4.0)
    splits = generate_splits(spec, seed=11)
    return Dataset(ndim=2, num_labels=3, train=splits["train"],
                   val=splits["val"], test=splits["test"],
                   manifest={"spec": "tiny"})
