"""Dense field operations: sampling, warping, composition, SVF integration.

Conventions used throughout the package:
  scalar field  tensor of shape (*spatial)
  vector field  tensor of shape (ndim, *spatial), components in voxel units,
                component d displaces along spatial axis d
  label field   integer tensor of shape (*spatial)

All sampling is multilinear with positions clamped to the valid voxel box,
which matches a constant (edge-value) extension of the field. ndim is 2 or 3.
"""

import itertools

import torch

from .exceptions import ContractError

DEFAULT_DTYPE = torch.float64


def _spatial_ndim(coords):
    ndim = int(coords.shape[0])
    if ndim not in (2, 3) or coords.dim() != ndim + 1:
        raise ContractError(
            "coords must have shape (ndim, *spatial) with ndim in (2, 3), "
            "got %s" % (tuple(coords.shape),))
    return ndim


def identity_grid(spatial, dtype=DEFAULT_DTYPE, device=None):
    """Voxel-index grid of shape (ndim, *spatial)."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in spatial]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)


def sample_linear(field, coords):
    """Sample `field` at absolute voxel positions `coords`.

    field:  (*spatial) or (channels, *spatial)
    coords: (ndim, *out_spatial)
    returns a tensor shaped like `field` with spatial dims replaced by
    out_spatial. Differentiable with respect to both arguments.
    """
    ndim = _spatial_ndim(coords)
    if field.dim() == ndim:
        return sample_linear(field.unsqueeze(0), coords).squeeze(0)
    if field.dim() != ndim + 1:
        raise ContractError(
            "field rank %d incompatible with %dd coords" % (field.dim(), ndim))
    spatial = field.shape[1:]
    out_spatial = coords.shape[1:]
    flat = field.reshape(field.shape[0], -1)

    # Row-major strides of the input spatial grid.
    strides = [1] * ndim
    for d in range(ndim - 2, -1, -1):
        strides[d] = strides[d + 1] * spatial[d + 1]

    los, fracs = [], []
    for d in range(ndim):
        n = spatial[d]
        pos = coords[d].clamp(0, n - 1)
        lo = pos.detach().floor().long().clamp_(0, max(n - 2, 0))
        los.append(lo)
        fracs.append(pos - lo)

    out = None
    for corner in itertools.product((0, 1), repeat=ndim):
        idx = 0
        weight = None
        for d in range(ndim):
            comp = los[d]
            if corner[d]:
                comp = (comp + 1).clamp(max=spatial[d] - 1)
            idx = idx + comp * strides[d]
            w = fracs[d] if corner[d] else 1.0 - fracs[d]
            weight = w if weight is None else weight * w
        vals = flat[:, idx.reshape(-1)]
        term = vals * weight.reshape(1, -1)
        out = term if out is None else out + term
    return out.reshape(field.shape[0], *out_spatial)


def warp(image, disp):
    """Warp an image by a displacement field: out(x) = image(x + disp(x))."""
    ndim = _spatial_ndim(disp)
    if image.shape[-ndim:] != disp.shape[1:]:
        raise ContractError("image %s and displacement %s spatial shapes differ"
                            % (tuple(image.shape), tuple(disp.shape)))
    grid = identity_grid(disp.shape[1:], dtype=disp.dtype, device=disp.device)
    return sample_linear(image, grid + disp)


def warp_nearest(labels, disp):
    """Warp an integer label map with nearest-neighbour lookup."""
    ndim = _spatial_ndim(disp)
    spatial = labels.shape[-ndim:]
    if spatial != disp.shape[1:]:
        raise ContractError("labels %s and displacement %s spatial shapes differ"
                            % (tuple(labels.shape), tuple(disp.shape)))
    grid = identity_grid(spatial, dtype=disp.dtype, device=disp.device)
    idx = 0
    strides = [1] * ndim
    for d in range(ndim - 2, -1, -1):
        strides[d] = strides[d + 1] * spatial[d + 1]
    for d in range(ndim):
        pos = (grid[d] + disp[d]).round().long().clamp_(0, spatial[d] - 1)
        idx = idx + pos * strides[d]
    lead = labels.shape[:-ndim]
    flat = labels.reshape(*lead, -1)
    out = flat[..., idx.reshape(-1)]
    return out.reshape(*lead, *spatial)


def compose(outer, inner):
    """Displacement of the map x -> outer(inner(x)).

    Both arguments are displacement fields on the same grid. The result w
    satisfies x + w(x) = (x + inner(x)) + outer(x + inner(x)).
    """
    if outer.shape != inner.shape:
        raise ContractError("compose needs matching shapes, got %s and %s"
                            % (tuple(outer.shape), tuple(inner.shape)))
    grid = identity_grid(inner.shape[1:], dtype=inner.dtype, device=inner.device)
    return inner + sample_linear(outer, grid + inner)


def integrate_svf(velocity, steps=7):
    """Exponentiate a stationary velocity field by scaling and squaring.

    The field is divided by 2**steps and self-composed `steps` times,
    approximating the time-1 flow of dx/dt = v(x).
    """
    if steps < 0:
        raise ContractError("steps must be >= 0")
    _spatial_ndim(velocity)
    disp = velocity * (2.0 ** -steps)
    for _ in range(steps):
        disp = compose(disp, disp)
    return disp


def _resize(field, factor, ndim):
    # Pixel-center alignment: output voxel i samples input at
    # (i + 0.5) / factor - 0.5, so factor 2 followed by 0.5 is near-identity.
    spatial = field.shape[-ndim:]
    out_spatial = [max(1, int(round(n * factor))) for n in spatial]
    scale = [spatial[d] / out_spatial[d] for d in range(ndim)]
    axes = [
        (torch.arange(out_spatial[d], dtype=field.dtype, device=field.device) + 0.5)
        * scale[d] - 0.5
        for d in range(ndim)
    ]
    coords = torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)
    return sample_linear(field, coords)


def resize_scalar(field, factor, ndim=None):
    """Resize a scalar field or a (channels, *spatial) feature stack."""
    if ndim is None:
        ndim = field.dim()
        if ndim not in (2, 3):
            raise ContractError("pass ndim explicitly for channelled input")
    return _resize(field, factor, ndim)


def resize_field(disp, factor):
    """Resize a displacement or velocity field and rescale its components.

    Components are multiplied by `factor` so the field keeps displacing the
    same physical fraction of the volume on the new grid.
    """
    ndim = _spatial_ndim(disp)
    return _resize(disp, factor, ndim) * factor


def jacobian_determinant(disp):
    """Per-voxel determinant of the Jacobian of x -> x + disp(x).

    Derivatives use central differences in the interior and one-sided
    differences on the boundary.
    """
    ndim = _spatial_ndim(disp)
    axes = tuple(range(ndim))
    grads = []
    for d in range(ndim):
        gd = torch.gradient(disp[d], dim=axes)
        grads.append(gd)
    if ndim == 2:
        j00 = 1.0 + grads[0][0]
        j01 = grads[0][1]
        j10 = grads[1][0]
        j11 = 1.0 + grads[1][1]
        return j00 * j11 - j01 * j10
    j = [[grads[i][k] + (1.0 if i == k else 0.0) for k in range(3)] for i in range(3)]
    return (j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
            - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]))


def count_folds(disp):
    """Number of voxels where the deformation folds (det J <= 0)."""
    return int((jacobian_determinant(disp) <= 0).sum().item())
