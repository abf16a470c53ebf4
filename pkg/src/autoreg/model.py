"""Two-scale registration backbone built from searched cells.

Wiring: source and target each pass feature cell 1 (full resolution, output
subsampled to 1/2) and feature cell 2 (1/2, output subsampled to 1/4); the
two streams share architecture weights but not parameters. The coarse
deformation cell reads the concatenated 1/4 features and emits a velocity
at 1/2 via a trailing x2 resize; after integrating and warping the source
1/2 features, the fine deformation cell emits a residual velocity at 1/2.
The half-resolution field is composed and only upsampled to full resolution
for the final warp.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import fields
from .exceptions import ContractError
from .ops import CATALOG, Cell, MixedOp, _CONV

CELL_NAMES = ("F1", "F2", "Dc", "Df")


def derive_architecture(alpha):
    """Argmax op index per (scale, edge); ties resolve to the lowest index."""
    if not torch.isfinite(alpha).all():
        raise ContractError("architecture logits must be finite")
    return alpha.argmax(dim=-1).tolist()


def mix_weights(alpha, discrete=False, catalog_size=None):
    """Edge weight rows for a (scales, edges, ops) logit tensor.

    Relaxed mode returns softmax tensors (differentiable); discrete mode
    returns one-hot float lists so unused branches are skipped.
    """
    if discrete:
        n = catalog_size or alpha.shape[-1]
        rows = derive_architecture(alpha)
        return [[[1.0 if i == choice else 0.0 for i in range(n)]
                 for choice in scale_row] for scale_row in rows]
    probs = torch.softmax(alpha, dim=-1)
    return [[probs[s, e] for e in range(alpha.shape[1])]
            for s in range(alpha.shape[0])]


def _subsample(x, ndim):
    for size in x.shape[-ndim:]:
        if size % 2:
            raise ContractError("stride-2 subsampling needs even shape, got %s"
                                % (tuple(x.shape[-ndim:]),))
    if ndim == 2:
        return x[..., ::2, ::2]
    return x[..., ::2, ::2, ::2]


@dataclass
class BackboneOutput:
    v_coarse: torch.Tensor
    v_fine: torch.Tensor
    phi_full: torch.Tensor
    phi_half: torch.Tensor
    phi_quarter: torch.Tensor
    pyramid: list  # [(warped, target)] at full, half, quarter

    @property
    def velocities(self):
        return (self.v_coarse, self.v_fine)


class DeformCell(nn.Module):
    """Deformation cell: concat features, 3 mixed ops, 1x..x1 velocity head."""

    def __init__(self, catalog, ch, ndim, upsample):
        super().__init__()
        self.cell = Cell(catalog, 2 * ch, ch, ndim)
        self.head_weight = nn.Parameter(torch.zeros(ndim, ch, *(1,) * ndim))
        self.head_bias = nn.Parameter(torch.zeros(ndim))
        self.ndim = ndim
        self.upsample = upsample

    def forward(self, feat_a, feat_b, edge_weights):
        if feat_a.shape != feat_b.shape:
            raise ContractError("deformation cell feature shapes differ: %s vs %s"
                                % (tuple(feat_a.shape), tuple(feat_b.shape)))
        x = torch.cat([feat_a, feat_b], dim=1)
        x = self.cell(x, edge_weights)
        v = _CONV[self.ndim](x, self.head_weight, self.head_bias).squeeze(0)
        if self.upsample:
            v = fields.resize_field(v, 2)
        return v


class RegNet(nn.Module):
    """The full backbone; architecture weights are passed at call time."""

    def __init__(self, ndim, channels=16, catalog=CATALOG, dtype=torch.float64):
        super().__init__()
        if ndim not in (2, 3):
            raise ContractError("ndim must be 2 or 3")
        self.ndim = ndim
        self.channels = channels
        self.catalog = tuple(catalog)
        # Stream-specific weights, shared architecture: s/t pairs per scale.
        self.f1_s = Cell(self.catalog, 1, channels, ndim)
        self.f1_t = Cell(self.catalog, 1, channels, ndim)
        self.f2_s = Cell(self.catalog, channels, channels, ndim)
        self.f2_t = Cell(self.catalog, channels, channels, ndim)
        self.d_coarse = DeformCell(self.catalog, channels, ndim, upsample=True)
        self.d_fine = DeformCell(self.catalog, channels, ndim, upsample=False)
        self.to(dtype)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def reset_parameters(self, seed):
        gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
        for module in self.modules():
            if hasattr(module, "reset"):
                module.reset(gen)
        with torch.no_grad():
            for dc in (self.d_coarse, self.d_fine):
                dc.head_weight.zero_()
                dc.head_bias.zero_()

    def freeze_op(self, op_index):
        """Zero every candidate op at `op_index` and exclude it from training."""
        for module in self.modules():
            if isinstance(module, MixedOp):
                op = module.ops[op_index]
                for p in op.parameters():
                    with torch.no_grad():
                        p.zero_()
                    p.requires_grad_(False)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, source, target, mix_f, mix_d, squaring_steps=7):
        """Run the backbone.

        source, target: (*spatial) scalar fields, spatial sizes divisible by 4.
        mix_f, mix_d: per-cell edge weight rows (see mix_weights).
        """
        nd = self.ndim
        if source.shape != target.shape:
            raise ContractError("source/target shapes differ")
        for size in source.shape:
            if size % 4:
                raise ContractError("backbone needs shapes divisible by 4, got %s"
                                    % (tuple(source.shape),))
        s = source.reshape(1, 1, *source.shape)
        t = target.reshape(1, 1, *target.shape)

        fs_half = _subsample(self.f1_s(s, mix_f[0]), nd)
        ft_half = _subsample(self.f1_t(t, mix_f[0]), nd)
        fs_quarter = _subsample(self.f2_s(fs_half, mix_f[1]), nd)
        ft_quarter = _subsample(self.f2_t(ft_half, mix_f[1]), nd)

        v_c = self.d_coarse(fs_quarter, ft_quarter, mix_d[0])
        phi_c = fields.integrate_svf(v_c, squaring_steps)

        warped_fs = fields.warp(fs_half.squeeze(0), phi_c).unsqueeze(0)
        v_f = self.d_fine(warped_fs, ft_half, mix_d[1])
        phi_half = fields.compose(phi_c, fields.integrate_svf(v_f, squaring_steps))

        phi_full = fields.resize_field(phi_half, 2)
        phi_quarter = fields.resize_field(phi_c, 0.5)

        s_half = fields.resize_scalar(source, 0.5, nd)
        s_quarter = fields.resize_scalar(source, 0.25, nd)
        t_half = fields.resize_scalar(target, 0.5, nd)
        t_quarter = fields.resize_scalar(target, 0.25, nd)
        pyramid = [
            (fields.warp(source, phi_full), target),
            (fields.warp(s_half, phi_half), t_half),
            (fields.warp(s_quarter, phi_quarter), t_quarter),
        ]
        return BackboneOutput(v_c, v_f, phi_full, phi_half, phi_quarter, pyramid)
