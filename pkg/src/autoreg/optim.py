"""Minimal in-package optimizers.

Written out explicitly (textbook adaptive-moment update) so the full
optimizer state serializes into the checkpoint's ARVF tensor files and
resume is bit-exact; a library optimizer would force an opaque pickle
into the documented checkpoint format.
"""

import torch


class PlainSGD:
    """p <- p - lr * g. Stateless."""

    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def step(self, grads):
        with torch.no_grad():
            for p, g in zip(self.params, grads):
                p.sub_(self.lr * g)

    def state_tensors(self, prefix):
        return {}

    def load_state(self, prefix, tensors, state):
        pass

    def export_state(self):
        return {}


class AdaptiveMoment:
    """Adam with bias correction; beta and eps fixed at the usual values."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def step(self, grads):
        self.step_count += 1
        b1, b2 = self.BETA1, self.BETA2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        with torch.no_grad():
            for p, g, m, v in zip(self.params, grads, self.m, self.v):
                m.mul_(b1).add_(g, alpha=1.0 - b1)
                v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
                p.sub_(self.lr * (m / bc1) / ((v / bc2).sqrt() + self.EPS))

    def state_tensors(self, prefix):
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out["%s.m.%d" % (prefix, i)] = m.detach().cpu().numpy()
            out["%s.v.%d" % (prefix, i)] = v.detach().cpu().numpy()
        return out

    def load_state(self, prefix, tensors, state):
        self.step_count = int(state["step_count"])
        for i in range(len(self.params)):
            self.m[i] = torch.from_numpy(
                tensors["%s.m.%d" % (prefix, i)].copy()).to(self.m[i].dtype)
            self.v[i] = torch.from_numpy(
                tensors["%s.v.%d" % (prefix, i)].copy()).to(self.v[i].dtype)

    def export_state(self):
        return {"step_count": self.step_count}


def make_optimizer(kind, params, lr):
    if kind == "adam":
        return AdaptiveMoment(params, lr)
    if kind == "sgd":
        return PlainSGD(params, lr)
    raise ValueError("unknown optimizer kind %r" % kind)
