"""Differentiable objectives and evaluation metrics.

Sign conventions: lncc_loss lives in [-1, 0] (more negative = more similar),
mind_loss and diffusion_loss are >= 0, soft_dice_loss in [0, ~1]. The guard
constant DELTA = 1e-5 is shared by every denominator in this module.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import ContractError

DELTA = 1e-5

_CONV = {2: F.conv2d, 3: F.conv3d}
_PAD_MODE = "replicate"


def _check_pair(a, b, op):
    if a.shape != b.shape:
        raise ContractError("%s: shape mismatch %s vs %s"
                            % (op, tuple(a.shape), tuple(b.shape)))


def _axis_kernel(ndim, axis, taps, dtype, device):
    shape = [1, 1] + [1] * ndim
    shape[2 + axis] = len(taps)
    return torch.tensor(taps, dtype=dtype, device=device).reshape(shape)


def _separable_filter(stack, taps_per_axis, padding_mode):
    # stack: (C, *spatial); one grouped 1-d conv per axis.
    ndim = stack.dim() - 1
    conv = _CONV[ndim]
    x = stack.unsqueeze(0)
    for axis, taps in enumerate(taps_per_axis):
        if taps is None:
            continue
        k = len(taps)
        r = k // 2
        kernel = _axis_kernel(ndim, axis, taps, x.dtype, x.device)
        kernel = kernel.expand(x.shape[1], 1, *kernel.shape[2:]).contiguous()
        pad = [0] * (2 * ndim)
        # F.pad lists pairs from the last axis backwards.
        pad[2 * (ndim - 1 - axis)] = r
        pad[2 * (ndim - 1 - axis) + 1] = r
        if padding_mode == "zero":
            xp = F.pad(x, pad)
        else:
            xp = F.pad(x, pad, mode=_PAD_MODE)
        x = conv(xp, kernel, groups=x.shape[1])
    return x.squeeze(0)


def lncc_loss(a, b, window):
    """Negative mean squared local correlation over border-cropped windows.

    Every voxel is scored; its window^d cube is clipped at the domain edge,
    so border voxels use smaller windows. Returns a value in [-1, 0].
    """
    _check_pair(a, b, "lncc_loss")
    if window < 3 or window % 2 == 0:
        raise ContractError("window must be odd and >= 3, got %d" % window)
    ndim = a.dim()
    if ndim not in (2, 3):
        raise ContractError("lncc_loss expects a 2d/3d scalar field")
    ones = torch.ones_like(a)
    stack = torch.stack([ones, a, b, a * a, b * b, a * b], dim=0)
    taps = [[1.0] * window] * ndim
    sums = _separable_filter(stack, taps, padding_mode="zero")
    n, sa, sb, saa, sbb, sab = sums
    cross = sab - sa * sb / n
    var_a = (saa - sa * sa / n).clamp_min(0)
    var_b = (sbb - sb * sb / n).clamp_min(0)
    cc2 = cross * cross / (var_a * var_b + DELTA)
    return -cc2.mean()


_GAUSS_SIGMA = 0.5


def _gauss_taps(sigma, radius, dtype):
    xs = torch.arange(-radius, radius + 1, dtype=dtype)
    w = torch.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return (w / w.sum()).tolist()


def _shift(img, axis, step):
    # img(x + step*e_axis) with edge replication.
    ndim = img.dim()
    pad = [0] * (2 * ndim)
    slot = 2 * (ndim - 1 - axis)
    if step > 0:
        pad[slot + 1] = step
    else:
        pad[slot] = -step
    xp = F.pad(img.unsqueeze(0).unsqueeze(0), pad, mode=_PAD_MODE)[0, 0]
    sl = [slice(None)] * ndim
    n = img.shape[axis]
    sl[axis] = slice(step, step + n) if step > 0 else slice(0, n)
    return xp[tuple(sl)]


def mind_descriptor(image, sigma=_GAUSS_SIGMA, radius=1):
    """Per-voxel self-similarity descriptor, one component per axis offset.

    The image is standardized (zero mean, unit variance) first, which keeps
    the descriptor exactly invariant to positive affine intensity changes.
    For each unit offset r (+1/-1 along each axis) the Gaussian-weighted
    patch SSD D(x, r) is computed (patch radius 1); with V(x) the offset
    mean of D plus DELTA, the component is exp(-D/V), then each voxel is
    scaled so its largest component is 1. Output: (2*ndim, *spatial).
    """
    ndim = image.dim()
    if ndim not in (2, 3):
        raise ContractError("mind_descriptor expects a 2d/3d scalar field")
    if min(image.shape) < 5:
        raise ContractError("mind_descriptor needs shape >= 5 per axis")
    std, mean = torch.std_mean(image, correction=0)
    img = (image - mean) / std.clamp_min(1e-30)

    taps = _gauss_taps(sigma, radius, img.dtype)
    dists = []
    for axis in range(ndim):
        for step in (1, -1):
            diff = img - _shift(img, axis, step)
            d = _separable_filter((diff * diff).unsqueeze(0),
                                  [taps] * ndim, padding_mode=_PAD_MODE)
            dists.append(d[0])
    d_stack = torch.stack(dists, dim=0)
    v = d_stack.mean(dim=0) + DELTA
    desc = torch.exp(-d_stack / v)
    return desc / desc.amax(dim=0, keepdim=True)


def mind_loss(a, b, sigma=_GAUSS_SIGMA):
    """Mean absolute difference between the two images' MIND descriptors."""
    _check_pair(a, b, "mind_loss")
    return (mind_descriptor(a, sigma) - mind_descriptor(b, sigma)).abs().mean()


def diffusion_loss(field):
    """Smoothness penalty: squared forward differences of a vector field.

    Summed over (component, axis) pairs of the per-position mean, so a unit
    slope along one axis contributes exactly 1.
    """
    if field.dim() not in (3, 4) or field.shape[0] != field.dim() - 1:
        raise ContractError("diffusion_loss expects (ndim, *spatial), got %s"
                            % (tuple(field.shape),))
    ndim = field.shape[0]
    total = field.new_zeros(())
    for comp in range(ndim):
        for axis in range(ndim):
            d = field[comp].diff(dim=axis)
            total = total + (d * d).mean()
    return total


def sim_loss(warped, target, lambda1, window, mind_sigma=_GAUSS_SIGMA):
    """Unified similarity: lambda1 * lncc + (1 - lambda1) * mind.

    Endpoint weights skip the unused branch entirely, so lambda1 == 1 is
    exactly the NCC loss (and legal on images too small for MIND).
    """
    lam = lambda1 if torch.is_tensor(lambda1) else torch.as_tensor(
        lambda1, dtype=warped.dtype)
    lam_val = float(lam.detach())
    if not 0.0 <= lam_val <= 1.0:
        raise ContractError("lambda1 must lie in [0, 1], got %r" % lam_val)
    need_ncc = not (lam_val == 0.0 and not lam.requires_grad)
    need_mind = not (lam_val == 1.0 and not lam.requires_grad)
    ncc = lncc_loss(warped, target, window) if need_ncc else warped.new_zeros(())
    mind = mind_loss(warped, target, mind_sigma) if need_mind \
        else warped.new_zeros(())
    return lam * ncc + (1.0 - lam) * mind


@dataclass
class LossBreakdown:
    sim_full: torch.Tensor
    sim_half: torch.Tensor
    sim_quarter: torch.Tensor
    smooth: torch.Tensor
    total: torch.Tensor


def reg_loss(pyramid, velocities, lam, windows=(9, 5, 3),
             mind_sigma=_GAUSS_SIGMA):
    """Multi-scale registration loss.

    pyramid: three (warped, target) pairs at full, half, quarter resolution.
    velocities: iterable of predicted velocity fields; their diffusion
    penalties are summed into the smoothness term.
    lam: tensor (4,) = (lambda1, lambda2, lambda3, lambda4).
    total = sim_full + lambda2*smooth + lambda3*sim_half + lambda4*sim_quarter
    """
    if len(pyramid) != 3:
        raise ContractError("reg_loss needs (full, half, quarter) pairs")
    lam1 = lam[0]
    sims = [sim_loss(w, t, lam1, win, mind_sigma)
            for (w, t), win in zip(pyramid, windows)]
    smooth = sum(diffusion_loss(v) for v in velocities)
    total = sims[0] + lam[1] * smooth + lam[2] * sims[1] + lam[3] * sims[2]
    return LossBreakdown(sims[0], sims[1], sims[2], smooth, total)


def soft_dice_loss(warped_onehot, target_onehot):
    """1 - mean soft Dice over foreground label channels.

    Inputs are (labels, *spatial); warped_onehot may be fractional (a
    linearly warped one-hot mask), target_onehot is crisp.
    """
    if warped_onehot.shape != target_onehot.shape:
        raise ContractError("soft_dice_loss: label stacks differ, %s vs %s"
                            % (tuple(warped_onehot.shape), tuple(target_onehot.shape)))
    n_lab = warped_onehot.shape[0]
    p = warped_onehot.reshape(n_lab, -1)
    q = target_onehot.reshape(n_lab, -1)
    inter = (p * q).sum(dim=1)
    dice = (2.0 * inter) / (p.sum(dim=1) + q.sum(dim=1) + DELTA)
    return 1.0 - dice.mean()


def one_hot(labels, num_labels, dtype=torch.float64):
    """Foreground one-hot stack (num_labels - 1, *spatial); label 0 omitted."""
    chans = [(labels == k).to(dtype) for k in range(1, num_labels)]
    if not chans:
        raise ContractError("one_hot needs at least one foreground label")
    return torch.stack(chans, dim=0)


def dice_score(pred, truth, num_labels=None):
    """Hard Dice per foreground label plus the mean.

    Labels absent from both fields score 1.0 (empty agreement). Returns
    (per-label dict, mean).
    """
    if pred.shape != truth.shape:
        raise ContractError("dice_score: shape mismatch")
    if num_labels is None:
        num_labels = int(max(pred.max().item(), truth.max().item())) + 1
    scores = {}
    for k in range(1, num_labels):
        pk = pred == k
        tk = truth == k
        denom = int(pk.sum()) + int(tk.sum())
        if denom == 0:
            scores[k] = 1.0
        else:
            scores[k] = 2.0 * int((pk & tk).sum()) / denom
    mean = sum(scores.values()) / len(scores) if scores else 1.0
    return scores, mean


def pearson_ncc(a, b):
    """Global signed correlation coefficient; 0.0 for a constant input."""
    _check_pair(a, b, "pearson_ncc")
    am = a - a.mean()
    bm = b - b.mean()
    denom = am.square().sum().sqrt() * bm.square().sum().sqrt()
    if float(denom) == 0.0:
        return 0.0
    return float((am * bm).sum() / denom)


def ncc_windows_for(base_window=9):
    """Per-scale NCC windows: full, half, quarter (halved and made odd)."""
    half = max(3, base_window // 2 + (1 - (base_window // 2) % 2))
    quarter = max(3, half // 2 + (1 - (half // 2) % 2))
    return (base_window, half, quarter)
