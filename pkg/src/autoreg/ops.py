"""Candidate convolution operators and the relaxed mixed operation.

The catalog order is part of the contract (ties in architecture derivation
resolve to the lowest index):

  idx name   kernel dilation separable
  0   CONV1  1      1        no
  1   CONV3  3      1        no
  2   CONV5  5      1        no
  3   SEP3   3      1        yes
  4   SEP5   5      1        yes
  5   DIL3   3      2        no
  6   DIL5   5      2        no
  7   DIL7   7      2        no

Feature tensors are (1, C, *spatial) throughout this module.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ContractError

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class OpSpec:
    name: str
    kernel: int
    dilation: int
    separable: bool


CATALOG = (
    OpSpec("CONV1", 1, 1, False),
    OpSpec("CONV3", 3, 1, False),
    OpSpec("CONV5", 5, 1, False),
    OpSpec("SEP3", 3, 1, True),
    OpSpec("SEP5", 5, 1, True),
    OpSpec("DIL3", 3, 2, False),
    OpSpec("DIL5", 5, 2, False),
    OpSpec("DIL7", 7, 2, False),
)

_CONV = {2: F.conv2d, 3: F.conv3d}


def _init_uniform(weight, gen):
    fan_in = 1
    for n in weight.shape[1:]:
        fan_in *= n
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=gen)


class CandidateOp(nn.Module):
    """One catalog operator: conv (same padding) followed by LeakyReLU."""

    def __init__(self, spec, in_ch, out_ch, ndim):
        super().__init__()
        self.spec = spec
        self.ndim = ndim
        k = (spec.kernel,) * ndim
        if spec.separable:
            self.depth_weight = nn.Parameter(torch.empty(in_ch, 1, *k))
            self.depth_bias = nn.Parameter(torch.zeros(in_ch))
            self.point_weight = nn.Parameter(torch.empty(out_ch, in_ch, *(1,) * ndim))
            self.point_bias = nn.Parameter(torch.zeros(out_ch))
        else:
            self.weight = nn.Parameter(torch.empty(out_ch, in_ch, *k))
            self.bias = nn.Parameter(torch.zeros(out_ch))
        self.in_ch = in_ch
        self.pad = spec.dilation * (spec.kernel - 1) // 2

    def reset(self, gen):
        with torch.no_grad():
            if self.spec.separable:
                _init_uniform(self.depth_weight, gen)
                self.depth_bias.zero_()
                _init_uniform(self.point_weight, gen)
                self.point_bias.zero_()
            else:
                _init_uniform(self.weight, gen)
                self.bias.zero_()

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise ContractError("op %s expects %d channels, got %d"
                                % (self.spec.name, self.in_ch, x.shape[1]))
        conv = _CONV[self.ndim]
        if self.spec.separable:
            y = conv(x, self.depth_weight, self.depth_bias,
                     padding=self.pad, dilation=self.spec.dilation,
                     groups=self.in_ch)
            y = conv(y, self.point_weight, self.point_bias)
        else:
            y = conv(x, self.weight, self.bias,
                     padding=self.pad, dilation=self.spec.dilation)
        return F.leaky_relu(y, LEAKY_SLOPE)


class MixedOp(nn.Module):
    """Softmax-weighted sum over the candidate ops of one edge.

    forward takes the edge weights explicitly: a tensor keeps every branch
    (relaxed search), a plain list of floats skips zero entries (discrete
    networks never pay for unused branches).
    """

    def __init__(self, catalog, in_ch, out_ch, ndim):
        super().__init__()
        self.ops = nn.ModuleList(
            CandidateOp(spec, in_ch, out_ch, ndim) for spec in catalog)

    def forward(self, x, weights):
        if torch.is_tensor(weights):
            out = None
            for w, op in zip(weights, self.ops):
                term = w * op(x)
                out = term if out is None else out + term
            return out
        out = None
        for w, op in zip(weights, self.ops):
            if w == 0.0:
                continue
            term = op(x) if w == 1.0 else w * op(x)
            out = term if out is None else out + term
        if out is None:
            raise ContractError("mixed op weights are all zero")
        return out


class Cell(nn.Module):
    """A chain of three mixed ops (path graph, no skip edges)."""

    N_EDGES = 3

    def __init__(self, catalog, in_ch, ch, ndim):
        super().__init__()
        plans = [(in_ch, ch), (ch, ch), (ch, ch)]
        self.edges = nn.ModuleList(
            MixedOp(catalog, a, b, ndim) for a, b in plans)

    def forward(self, x, edge_weights):
        if len(edge_weights) != self.N_EDGES:
            raise ContractError("cell expects %d edge weight rows, got %d"
                                % (self.N_EDGES, len(edge_weights)))
        for edge, w in zip(self.edges, edge_weights):
            x = edge(x, w)
        return x
