"""Three-stage bilevel search over architecture logits and loss weights.

Stage order: feature-cell logits alpha_F (deformation cells mixed
uniformly), then deformation-cell logits alpha_D (feature cells frozen to
their derived ops), then the loss-weight vector lambda (both cell types
discrete, weights warm-started). Each outer update uses a one-step
unrolled hypergradient whose second-order term is a central finite
difference of training-loss gradients around the current weights.

After the three stages the pipeline trains weights only, then weights and
lambda jointly, for fixed epoch counts.

Every random draw derives from (seed, phase, epoch) hashes, so checkpoint
resume reproduces the uninterrupted run bit for bit.
"""

import logging
import os
from dataclasses import dataclass

import torch

from . import fields, io, losses
from .config import config_to_dict
from .exceptions import ConfigError, ContractError, DataError, NumericalError
from .model import RegNet, derive_architecture, mix_weights
from .ops import CATALOG
from .optim import make_optimizer
from .seeding import derive_perm, derive_seed

log = logging.getLogger("autoreg.search")

PHASES = ("feature", "deform", "warm", "hyper", "post_weights", "post_joint")
# Stages with a stability rule; the rest run for a fixed epoch count.
CONVERGING = ("feature", "deform", "hyper")
THETA_PHASES = ("feature", "deform", "hyper", "post_joint")


def _grads(loss, params):
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g
            for p, g in zip(params, grads)]


def hypergradient(thetas, omegas, train_loss_fn, val_loss_fn, lr_inner, eps,
                  strict_v_term=False, eps_guard=True):
    """Gradient of the one-step-unrolled validation objective w.r.t. thetas.

    Computes the virtual step omega' = omega - lr_inner * dL_tr/domega, the
    direct term dL_val(omega')/dtheta, and the second-order term as a
    central finite difference of dL_tr/dtheta at omega +- eps_eff * g where
    g = dL_val(omega')/domega'. With eps_guard the step is shrunk to
    eps / (1 + max|g|). strict_v_term drops the lr_inner factor from the
    finite-difference term (the printed update rule rather than the exact
    unrolled derivative).

    Returns (theta_grads, val_loss_value). Weights are restored exactly:
    the perturbations start from a saved copy of the original omega, so
    the caller sees bit-identical parameters afterwards.
    """
    if eps <= 0 or lr_inner < 0:
        raise ContractError("hypergradient needs eps > 0 and lr_inner >= 0")
    omegas = list(omegas)
    thetas = list(thetas)

    g_tr = _grads(train_loss_fn(), omegas)
    backup = [p.detach().clone() for p in omegas]
    with torch.no_grad():
        for p, g in zip(omegas, g_tr):
            p.sub_(lr_inner * g)

    val_loss = val_loss_fn()
    if not torch.isfinite(val_loss):
        raise NumericalError("validation loss is not finite during hypergradient")
    joint = _grads(val_loss, omegas + thetas)
    g_val = joint[:len(omegas)]
    direct = joint[len(omegas):]

    g_inf = max((float(g.abs().max()) for g in g_val), default=0.0)
    eps_eff = eps / (1.0 + g_inf) if eps_guard else eps

    with torch.no_grad():
        for p, b, g in zip(omegas, backup, g_val):
            p.copy_(b)
            p.add_(eps_eff * g)
    g_plus = _grads(train_loss_fn(), thetas)
    with torch.no_grad():
        for p, g in zip(omegas, g_val):
            p.sub_(2.0 * eps_eff * g)
    g_minus = _grads(train_loss_fn(), thetas)
    with torch.no_grad():
        for p, b in zip(omegas, backup):
            p.copy_(b)

    scale = 1.0 if strict_v_term else lr_inner
    out = [d - scale * (gp - gm) / (2.0 * eps_eff)
           for d, gp, gm in zip(direct, g_plus, g_minus)]
    return out, float(val_loss.detach())


def unrolled_weights(omegas, train_loss_fn, lr_inner):
    """One plain gradient step on the training loss (the virtual update)."""
    omegas = list(omegas)
    g = _grads(train_loss_fn(), omegas)
    with torch.no_grad():
        for p, gi in zip(omegas, g):
            p.sub_(lr_inner * gi)


def stability_check(history, window, lambda_tol=None):
    """True when the last `window` epochs were stable.

    history holds per-epoch derived architectures (alpha stages) or lambda
    vectors (lambda_tol set). Alpha stages need `window` identical
    snapshots; the lambda stage needs every per-epoch max component change
    across the window below lambda_tol.
    """
    if window < 1:
        raise ContractError("stability window must be >= 1")
    if lambda_tol is None:
        if len(history) < window:
            return False
        last = history[-1]
        return all(h == last for h in history[-window:])
    if len(history) < window + 1:
        return False
    recent = history[-(window + 1):]
    for prev, cur in zip(recent, recent[1:]):
        if max(abs(a - b) for a, b in zip(prev, cur)) >= lambda_tol:
            return False
    return True


@dataclass
class _TensorPair:
    pair_id: str
    s: torch.Tensor
    t: torch.Tensor
    s_onehot: torch.Tensor = None
    t_onehot: torch.Tensor = None


@dataclass
class SearchResult:
    model: RegNet
    alpha_f: torch.Tensor
    alpha_d: torch.Tensor
    lam: torch.Tensor
    derived: dict
    converged: dict
    catalog_names: list
    out_dir: str = None
    halted: bool = False

    def discrete_mixes(self):
        n = len(self.catalog_names)
        return (mix_weights(self.alpha_f, discrete=True, catalog_size=n),
                mix_weights(self.alpha_d, discrete=True, catalog_size=n))


class SearchDriver:
    """Owns all mutable search state; one driver per pipeline run."""

    def __init__(self, dataset, cfg, seed, dtype="float64", out_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.out_dir = out_dir
        self.dtype = torch.float64 if dtype == "float64" else torch.float32
        self.dtype_name = dtype
        self.ndim = dataset.ndim
        self.num_labels = dataset.num_labels
        self.catalog = tuple(CATALOG[i] for i in cfg.op_subset) if cfg.op_subset \
            else CATALOG
        self.windows = losses.ncc_windows_for(cfg.ncc_window)

        self.train_pairs = [self._prep(p, with_labels=False) for p in dataset.train]
        self.val_pairs = [self._prep(p, with_labels=True) for p in dataset.val]
        if not self.train_pairs or not self.val_pairs:
            raise DataError("search needs non-empty train and val splits")

        self.model = RegNet(self.ndim, cfg.channels, self.catalog, self.dtype)
        n_ops = len(self.catalog)
        self.alpha_f = torch.zeros(2, 3, n_ops, dtype=self.dtype)
        self.alpha_d = torch.zeros(2, 3, n_ops, dtype=self.dtype)
        self.lam = torch.tensor(cfg.lambda_init, dtype=self.dtype)

        self.phase_idx = 0
        self.epoch = 0
        self.global_epoch = 0
        self.converged = {}
        self.arch_history = []
        self.lambda_history = []
        self.alpha_rows = []
        self.lambda_rows = []
        self.loss_rows = []
        self.omega_opt = None
        self.lambda_opt = None
        self.alpha_opt = None

    # -- data preparation ---------------------------------------------------

    def _prep(self, pair, with_labels):
        s, t = pair.tensors(self.dtype)
        tp = _TensorPair(pair.pair_id, s, t)
        if with_labels:
            if pair.source_labels is None or pair.target_labels is None:
                raise DataError("validation pair %s lacks labels (required "
                                "for the hyper stage)" % pair.pair_id)
            sl, tl = pair.label_tensors()
            tp.s_onehot = losses.one_hot(sl, self.num_labels, self.dtype)
            tp.t_onehot = losses.one_hot(tl, self.num_labels, self.dtype)
        return tp

    # -- phase plumbing -------------------------------------------------------

    def _phase_limit(self, phase):
        cfg = self.cfg
        return {"feature": cfg.max_epochs_feature,
                "deform": cfg.max_epochs_deform,
                "warm": cfg.warm_epochs,
                "hyper": cfg.max_epochs_hyper,
                "post_weights": cfg.post_weight_epochs,
                "post_joint": cfg.post_joint_epochs}[phase]

    def _reset_omega(self, tag):
        self.model.reset_parameters(derive_seed(self.seed, "omega", tag))
        self._apply_freeze()

    def _apply_freeze(self):
        if self.cfg.freeze_op >= 0:
            self.model.freeze_op(self.cfg.freeze_op)

    def _fresh_optimizers(self, phase):
        cfg = self.cfg
        self.omega_opt = make_optimizer(
            cfg.opt_omega, self.model.trainable_parameters(), cfg.lr_omega)
        self.lambda_opt = None
        self.alpha_opt = None
        if phase == "feature":
            self.alpha_opt = make_optimizer(cfg.opt_alpha, [self.alpha_f],
                                            cfg.lr_alpha)
        elif phase == "deform":
            self.alpha_opt = make_optimizer(cfg.opt_alpha, [self.alpha_d],
                                            cfg.lr_alpha)
        elif phase in ("hyper", "post_joint"):
            self.lambda_opt = make_optimizer(cfg.opt_lambda, [self.lam],
                                             cfg.lr_lambda)

    def _enter_phase(self, phase):
        self.alpha_f.requires_grad_(phase == "feature")
        self.alpha_d.requires_grad_(phase == "deform")
        self.lam.requires_grad_(phase in ("hyper", "post_joint"))
        if phase in ("feature", "deform", "warm"):
            self._reset_omega(phase)
        self._fresh_optimizers(phase)
        self.arch_history = []
        self.lambda_history = []
        log.info("entering phase %s", phase)

    # -- loss closures --------------------------------------------------------

    def _mix_factories(self, phase):
        n = len(self.catalog)
        if phase == "feature":
            mix_f = lambda: mix_weights(self.alpha_f)
            mix_d = lambda: mix_weights(self.alpha_d.detach())
        elif phase == "deform":
            fixed_f = mix_weights(self.alpha_f, discrete=True, catalog_size=n)
            mix_f = lambda: fixed_f
            mix_d = lambda: mix_weights(self.alpha_d)
        else:
            fixed_f = mix_weights(self.alpha_f, discrete=True, catalog_size=n)
            fixed_d = mix_weights(self.alpha_d, discrete=True, catalog_size=n)
            mix_f = lambda: fixed_f
            mix_d = lambda: fixed_d
        return mix_f, mix_d

    def _forward(self, pair, mix_f, mix_d):
        return self.model(pair.s, pair.t, mix_f(), mix_d(),
                          self.cfg.squaring_steps)

    def _reg_total(self, pair, mix_f, mix_d):
        out = self._forward(pair, mix_f, mix_d)
        breakdown = losses.reg_loss(out.pyramid, out.velocities, self.lam,
                                    self.windows,
                                    mind_sigma=self.cfg.mind_sigma)
        return breakdown.total

    def _seg_val_loss(self, pair, mix_f, mix_d, info):
        out = self._forward(pair, mix_f, mix_d)
        warped = fields.warp(pair.s_onehot, out.phi_full)
        seg = losses.soft_dice_loss(warped, pair.t_onehot)
        info["seg"] = float(seg.detach())
        penalty = self.cfg.lambda_l2 * (self.lam * self.lam).sum()
        return seg + penalty

    # -- epoch body -------------------------------------------------------

    def _theta_setup(self, phase):
        if phase == "feature":
            return [self.alpha_f], self.alpha_opt, self.cfg.lr_alpha
        if phase == "deform":
            return [self.alpha_d], self.alpha_opt, self.cfg.lr_alpha
        if phase in ("hyper", "post_joint"):
            return [self.lam], self.lambda_opt, self.cfg.lr_lambda
        return None, None, None

    def _project_lambda(self):
        with torch.no_grad():
            self.lam[0].clamp_(0.0, 1.0)
            self.lam[1:].clamp_(min=0.0)

    def _run_epoch(self, phase):
        cfg = self.cfg
        n_tr = len(self.train_pairs)
        n_val = len(self.val_pairs)
        tperm = derive_perm(n_tr, self.seed, phase, self.epoch, "train")
        hperm = derive_perm(n_tr, self.seed, phase, self.epoch, "hyper")
        vperm = derive_perm(n_val, self.seed, phase, self.epoch, "val")
        mix_f, mix_d = self._mix_factories(phase)
        thetas, theta_opt, lr_theta = self._theta_setup(phase)
        use_theta = phase in THETA_PHASES
        hyper_outer = phase in ("hyper", "post_joint")

        omega = self.model.trainable_parameters()
        train_losses = []
        val_reg = []
        val_seg = []

        for j in range(n_tr):
            if use_theta and j < n_val:
                vp = self.val_pairs[int(vperm[j])]
                hp = self.train_pairs[int(hperm[j])]
                info = {}
                if hyper_outer:
                    val_fn = lambda: self._seg_val_loss(vp, mix_f, mix_d, info)
                else:
                    val_fn = lambda: self._reg_total(vp, mix_f, mix_d)
                tr_fn = lambda: self._reg_total(hp, mix_f, mix_d)
                grads, vloss = hypergradient(
                    thetas, omega, tr_fn, val_fn,
                    lr_inner=cfg.lr_omega, eps=lr_theta,
                    strict_v_term=cfg.strict_v_term,
                    eps_guard=cfg.eps_gradient_guard)
                theta_opt.step(grads)
                if hyper_outer:
                    self._project_lambda()
                    val_seg.append(info["seg"])
                else:
                    val_reg.append(vloss)

            tp = self.train_pairs[int(tperm[j])]
            loss = self._reg_total(tp, mix_f, mix_d)
            if not torch.isfinite(loss):
                raise NumericalError(
                    "training loss not finite (phase %s, epoch %d, pair %s)"
                    % (phase, self.global_epoch, tp.pair_id))
            self.omega_opt.step(_grads(loss, omega))
            train_losses.append(float(loss.detach()))

        self._log_epoch(phase, train_losses, val_reg, val_seg)
        return self._stability(phase)

    def _log_epoch(self, phase, train_losses, val_reg, val_seg):
        ep = self.global_epoch
        mean = lambda xs: sum(xs) / len(xs) if xs else ""
        cells = (("F1", self.alpha_f, 0), ("F2", self.alpha_f, 1),
                 ("Dc", self.alpha_d, 0), ("Df", self.alpha_d, 1))
        for name, alpha, scale in cells:
            probs = torch.softmax(alpha.detach()[scale], dim=-1)
            for edge in range(probs.shape[0]):
                self.alpha_rows.append([phase, ep, name, edge] +
                                       [float(w) for w in probs[edge]])
        lam = [float(x) for x in self.lam.detach()]
        self.lambda_rows.append([phase, ep] + lam + [mean(val_seg)])
        self.loss_rows.append([phase, ep, mean(train_losses),
                               mean(val_reg), mean(val_seg)])
        log.info("phase %-12s epoch %4d train %.6g", phase, ep,
                 sum(train_losses) / len(train_losses))

    def _stability(self, phase):
        cfg = self.cfg
        if phase in ("feature", "deform"):
            alpha = self.alpha_f if phase == "feature" else self.alpha_d
            self.arch_history.append(derive_architecture(alpha.detach()))
            return stability_check(self.arch_history, cfg.stability_window)
        if phase == "hyper":
            self.lambda_history.append([float(x) for x in self.lam.detach()])
            return stability_check(self.lambda_history, cfg.stability_window,
                                   lambda_tol=cfg.lambda_stability_tol)
        return False

    # -- driving ----------------------------------------------------------

    def run(self, epoch_callback=None):
        """Execute the remaining phases. epoch_callback(phase, global_epoch,
        driver) returning False halts after that epoch's checkpoint is on
        disk; resume later from the checkpoint directory."""
        while self.phase_idx < len(PHASES):
            phase = PHASES[self.phase_idx]
            limit = self._phase_limit(phase)
            if self.epoch == 0:
                self._enter_phase(phase)
            elif self.omega_opt is None:
                raise ContractError("mid-phase state without optimizers; "
                                    "resume via load_checkpoint")
            while self.epoch < limit:
                stable = self._run_epoch(phase)
                self.epoch += 1
                self.global_epoch += 1
                budget_out = self.epoch >= limit
                stage_done = budget_out or (stable and phase in CONVERGING)
                if stage_done:
                    # A tie between stability and the epoch budget counts
                    # as non-converged.
                    if phase in CONVERGING:
                        self.converged[phase] = not budget_out
                    self.phase_idx += 1
                    self.epoch = 0
                halt = epoch_callback is not None and not epoch_callback(
                    phase, self.global_epoch, self)
                cadence = max(1, self.cfg.checkpoint_every)
                if self.out_dir is not None and (
                        stage_done or halt
                        or self.global_epoch % cadence == 0):
                    self.save_checkpoint()
                if halt:
                    return self._result(halted=True)
                if stage_done:
                    break
            else:
                # Zero-length phase: an empty converging stage exits on its
                # budget, hence unconverged.
                if limit == 0 and phase in CONVERGING:
                    self.converged[phase] = False
                self.phase_idx += 1
                self.epoch = 0
        return self._result(halted=False)

    def _result(self, halted):
        names = [spec.name for spec in self.catalog]
        derived = {
            "F": [[names[i] for i in row]
                  for row in derive_architecture(self.alpha_f.detach())],
            "D": [[names[i] for i in row]
                  for row in derive_architecture(self.alpha_d.detach())],
        }
        result = SearchResult(
            model=self.model, alpha_f=self.alpha_f.detach(),
            alpha_d=self.alpha_d.detach(), lam=self.lam.detach(),
            derived=derived, converged=dict(self.converged),
            catalog_names=names, out_dir=self.out_dir, halted=halted)
        if self.out_dir is not None and not halted:
            self._write_report(result)
            self.save_checkpoint()
        return result

    # -- reporting --------------------------------------------------------

    def _write_report(self, result):
        os.makedirs(self.out_dir, exist_ok=True)
        names = result.catalog_names
        _write_csv(os.path.join(self.out_dir, "alpha_trace.csv"),
                   ["phase", "epoch", "cell", "edge"] + list(names),
                   self.alpha_rows)
        _write_csv(os.path.join(self.out_dir, "lambda_trace.csv"),
                   ["phase", "epoch", "lambda1", "lambda2", "lambda3",
                    "lambda4", "seg_val"],
                   self.lambda_rows)
        _write_csv(os.path.join(self.out_dir, "loss_curves.csv"),
                   ["phase", "epoch", "train_reg", "val_reg", "val_seg"],
                   self.loss_rows)
        arch = {
            "catalog": names,
            "derived": result.derived,
            "lambda": [float(x) for x in self.lam.detach()],
            "converged": result.converged,
            "alpha_softmax": {
                "F": _edge_matrix(self.alpha_f),
                "D": _edge_matrix(self.alpha_d),
            },
        }
        io.dump_json(os.path.join(self.out_dir, "derived_arch.json"), arch)
        flag = os.path.join(self.out_dir, "non_converged.flag")
        missing = [s for s in CONVERGING if not result.converged.get(s, False)]
        if missing:
            with open(flag, "w") as fh:
                fh.write("stages stopped by their epoch budget: %s\n"
                         % ",".join(missing))
        elif os.path.exists(flag):
            os.remove(flag)

    # -- checkpointing ------------------------------------------------------

    def save_checkpoint(self, ckpt_dir=None):
        ckpt_dir = ckpt_dir or os.path.join(self.out_dir, "checkpoint")
        tensors = {}
        for i, p in enumerate(self.model.parameters()):
            tensors["omega.%d" % i] = p.detach().cpu().numpy()
        tensors["alpha_f"] = self.alpha_f.detach().cpu().numpy()
        tensors["alpha_d"] = self.alpha_d.detach().cpu().numpy()
        tensors["lam"] = self.lam.detach().cpu().numpy()
        opt_state = {}
        if self.omega_opt is not None:
            tensors.update(self.omega_opt.state_tensors("opt_omega"))
            opt_state["omega"] = self.omega_opt.export_state()
        if self.lambda_opt is not None:
            tensors.update(self.lambda_opt.state_tensors("opt_lambda"))
            opt_state["lambda"] = self.lambda_opt.export_state()
        state = {
            "kind": "search",
            "phase_idx": self.phase_idx,
            "epoch": self.epoch,
            "global_epoch": self.global_epoch,
            "converged": self.converged,
            "arch_history": self.arch_history,
            "lambda_history": self.lambda_history,
            "alpha_rows": self.alpha_rows,
            "lambda_rows": self.lambda_rows,
            "loss_rows": self.loss_rows,
            "optimizers": opt_state,
            "seed": self.seed,
            "dtype": self.dtype_name,
            "ndim": self.ndim,
            "num_labels": self.num_labels,
            "catalog": [s.name for s in self.catalog],
            "config": config_to_dict(self.cfg),
        }
        io.save_checkpoint(ckpt_dir, tensors, state)

    def load_checkpoint(self, ckpt_dir):
        tensors, state = io.load_checkpoint(ckpt_dir)
        if state.get("kind") != "search":
            raise DataError("%s is not a search checkpoint" % ckpt_dir)
        mine = config_to_dict(self.cfg)
        echo = state["config"]
        if echo != mine:
            diff = sorted(k for k in mine if echo.get(k) != mine[k])
            raise ConfigError("checkpoint config mismatch on: %s"
                              % ", ".join(diff))
        self.phase_idx = state["phase_idx"]
        self.epoch = state["epoch"]
        self.global_epoch = state["global_epoch"]
        self.converged = dict(state["converged"])
        self.arch_history = state["arch_history"]
        self.lambda_history = state["lambda_history"]
        self.alpha_rows = state["alpha_rows"]
        self.lambda_rows = state["lambda_rows"]
        self.loss_rows = state["loss_rows"]
        with torch.no_grad():
            for i, p in enumerate(self.model.parameters()):
                p.copy_(torch.from_numpy(tensors["omega.%d" % i].copy()))
            self.alpha_f.copy_(torch.from_numpy(tensors["alpha_f"].copy()))
            self.alpha_d.copy_(torch.from_numpy(tensors["alpha_d"].copy()))
            self.lam.copy_(torch.from_numpy(tensors["lam"].copy()))
        self._apply_freeze()
        if self.epoch > 0:
            phase = PHASES[self.phase_idx]
            self.alpha_f.requires_grad_(phase == "feature")
            self.alpha_d.requires_grad_(phase == "deform")
            self.lam.requires_grad_(phase in ("hyper", "post_joint"))
            self._fresh_optimizers(phase)
            opt_state = state["optimizers"]
            if "omega" in opt_state:
                self.omega_opt.load_state("opt_omega", tensors,
                                          opt_state["omega"])
            if "lambda" in opt_state and self.lambda_opt is not None:
                self.lambda_opt.load_state("opt_lambda", tensors,
                                           opt_state["lambda"])


def _format_cell(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_cell(x) for x in row))
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _edge_matrix(alpha):
    """Rows = ops, columns = the 6 edges in scale-major order, plus the
    argmax row index for each column."""
    probs = torch.softmax(alpha.detach(), dim=-1)
    cols = [probs[s, e] for s in range(probs.shape[0])
            for e in range(probs.shape[1])]
    n_ops = probs.shape[-1]
    weights = [[float(col[o]) for col in cols] for o in range(n_ops)]
    argmax = [int(col.argmax()) for col in cols]
    return {"weights": weights, "argmax_per_edge": argmax}


def run_search(dataset, cfg, seed, dtype="float64", out_dir=None,
               resume=None, epoch_callback=None):
    """Run (or resume) the full search pipeline; returns a SearchResult."""
    driver = SearchDriver(dataset, cfg, seed, dtype=dtype, out_dir=out_dir)
    if resume is not None:
        driver.load_checkpoint(resume)
    return driver.run(epoch_callback=epoch_callback)
