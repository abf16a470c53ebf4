"""Synthetic pair generator with ground-truth deformations and labels.

Anatomy stand-in: a smooth scalar field (radial ramp plus filtered noise)
cut at fixed quantiles yields nested blob-like regions; per-region base
intensities plus blur plus noise give the image. Targets are produced by
warping the source with a random fold-free stationary velocity field.
"""

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from . import fields
from .data import Pair
from .exceptions import DataError
from .seeding import derive_rng, derive_seed

_MAX_RETRIES = 20
_MULTIMODAL_K = 6.0


def synth_base(spec, seed):
    """One (image, labels) draw; pure function of (spec, seed)."""
    rng = derive_rng(seed, "base")
    shape = tuple(spec.shape)
    axes = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")
    radius = np.sqrt(sum(a * a for a in axes))
    # Two noise octaves: the coarse one shapes the regions, the fine one
    # roughens their boundaries so modest deformations actually move tissue
    # across region borders (keeps the pre-registration Dice midrange).
    coarse = gaussian_filter(rng.standard_normal(shape),
                             sigma=min(shape) * 0.12)
    fine = gaussian_filter(rng.standard_normal(shape),
                           sigma=min(shape) * 0.045)
    noise = coarse / max(coarse.std(), 1e-12) \
        + 0.8 * fine / max(fine.std(), 1e-12)
    height = radius + 0.7 * noise

    nlab = spec.num_labels
    labels = np.zeros(shape, dtype=np.int32)
    if nlab > 1:
        # Innermost region = highest label; outer band (largest height) = 0.
        fractions = np.full(nlab, (1.0 - 0.30) / (nlab - 1))
        fractions[0] = 0.30
        cuts = np.quantile(height, np.cumsum(fractions[::-1])[:-1])
        for cut in cuts:
            labels += (height < cut).astype(np.int32)

    intensities = 0.2 + 0.8 * rng.permutation(nlab) / max(nlab - 1, 1)
    image = intensities[labels]
    image = gaussian_filter(image, sigma=0.7)
    image = image + rng.normal(0.0, spec.noise_sigma, size=shape)
    return image.astype(np.float64), labels


def _random_velocity(spec, rng):
    shape = tuple(spec.shape)
    comps = []
    for _ in range(spec.ndim):
        white = rng.standard_normal(shape)
        comps.append(gaussian_filter(white, sigma=spec.smooth_sigma))
    v = np.stack(comps, axis=0)
    mag = np.sqrt((v * v).sum(axis=0)).max()
    if mag > 0:
        v = v * (spec.amplitude / mag)
    return v


def contrast_remap(image):
    """Monotone decreasing nonlinear lookup; breaks affine intensity relation."""
    lo, hi = image.min(), image.max()
    x = np.clip((image - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    k = _MULTIMODAL_K
    return (np.exp(-k * x) - np.exp(-k)) / (1.0 - np.exp(-k))


def synth_pair(spec, seed, pair_id, squaring_steps=7):
    """Draw a registration pair with ground-truth displacement.

    The velocity is resampled (bounded retries) until the integrated field
    is fold-free, so every emitted ground truth is invertible.
    """
    rng = derive_rng(seed, "pair")
    image, labels = synth_base(spec, seed)

    disp = None
    if spec.amplitude == 0:
        disp = np.zeros((spec.ndim,) + tuple(spec.shape))
    else:
        for _ in range(_MAX_RETRIES):
            v = _random_velocity(spec, rng)
            candidate = fields.integrate_svf(
                torch.from_numpy(v), steps=squaring_steps)
            if fields.count_folds(candidate) == 0:
                disp = candidate.numpy()
                break
        if disp is None:
            raise DataError(
                "could not draw a fold-free deformation for %s after %d tries"
                % (pair_id, _MAX_RETRIES))

    disp_t = torch.from_numpy(disp)
    warped = fields.warp(torch.from_numpy(image), disp_t).numpy()
    if spec.multimodal:
        warped = contrast_remap(warped)
    target = warped + rng.normal(0.0, spec.noise_sigma, size=warped.shape)
    target_labels = fields.warp_nearest(
        torch.from_numpy(labels.astype(np.int64)), disp_t).numpy().astype(np.int32)

    return Pair(
        pair_id=pair_id,
        source=image,
        target=target,
        source_labels=labels,
        target_labels=target_labels,
        gt_disp=disp,
    )


def generate_splits(spec, seed, counts=None):
    """All three splits as {split: [Pair]}; deterministic in (spec, seed)."""
    counts = counts or {"train": spec.n_train, "val": spec.n_val,
                        "test": spec.n_test}
    splits = {}
    for split, count in counts.items():
        pairs = []
        for i in range(count):
            pair_seed = derive_seed(seed, split, i)
            pairs.append(synth_pair(spec, pair_seed, "%s%03d" % (split[0], i)))
        splits[split] = pairs
    return splits

