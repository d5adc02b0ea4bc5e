"""Constrained training of the predictor with two regularizers.

The loss is cross-entropy plus beta1 * (feature-invariance penalty under
variation resampling) plus beta2 * (energy band penalty separating training
inputs from screened latent-mixture pseudo-outliers). The betas are dual
variables, raised by projected gradient ascent against their margins after
every primal Adam step.

Randomness is split into named streams (init / batches / augmentation /
pseudo generation), so disabling one subsystem cannot shift another's draws.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import gda as gda_mod
from . import gmodel as gm
from . import numcore as nc
from .datagen import TrainView, iterate_minibatches

INVARIANCE_SPACES = ("feature", "output")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = components or {}


@dataclass
class TrainConfig:
    eta_p: float = 1e-3          # primal learning rate
    eta_dg: float = 0.01         # dual rate for the invariance constraint
    eta_ood: float = 0.01        # dual rate for the energy constraint
    gamma1: float = 0.1          # invariance margin
    gamma2: float = 1.0          # energy-penalty margin
    m_in: float = -7.0
    m_out: float = -1.0
    temperature: float = 1.0
    xi: float | None = None      # explicit screen threshold; wins over the quantile
    xi_quantile: float = 0.005
    mixup_alpha: float = 1.0
    batch_size: int = 64
    max_epochs: int = 30
    tol: float = 1e-4            # relative epoch-loss change for early stop
    seed: int = 0
    invariance_space: str = "feature"
    hidden: int = 32
    feature_dim: int = 8
    disable_rdg: bool = False    # ablation: pin beta1 at 0, skip the term
    disable_rood: bool = False   # ablation: pin beta2 at 0, skip generation

    def validate(self):
        if self.m_in >= self.m_out:
            raise ValueError(f"m_in must be below m_out, got {self.m_in} >= {self.m_out}")
        if self.gamma1 <= 0 or self.gamma2 <= 0:
            raise ValueError("margins gamma1, gamma2 must be positive")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.eta_dg <= 0 or self.eta_ood <= 0 or self.eta_p <= 0:
            raise ValueError("learning rates must be positive")
        if self.invariance_space not in INVARIANCE_SPACES:
            raise ValueError(
                f"invariance_space must be one of {INVARIANCE_SPACES}, got {self.invariance_space}")
        if self.mixup_alpha <= 0:
            raise ValueError(f"mixup_alpha must be positive, got {self.mixup_alpha}")


@dataclass
class Predictor:
    """Featurizer (one tanh hidden layer) plus a linear class head."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wc: np.ndarray
    bc: np.ndarray
    class_ids: tuple

    @property
    def feature_dim(self):
        return self.w2.shape[1]

    @property
    def n_classes(self):
        return self.wc.shape[1]

    def features(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.tanh(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def logits(self, x) -> np.ndarray:
        return self.features(x) @ self.wc + self.bc


class _TensorPredictor:
    """The same network held as autodiff tensors during training."""

    NAMES = ("w1", "b1", "w2", "b2", "wc", "bc")

    def __init__(self, rng, d_x, hidden, feature_dim, n_classes):
        def w(fan_in, fan_out):
            return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

        self.w1 = nc.Tensor(w(d_x, hidden), requires_grad=True)
        self.b1 = nc.Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = nc.Tensor(w(hidden, feature_dim), requires_grad=True)
        self.b2 = nc.Tensor(np.zeros(feature_dim), requires_grad=True)
        self.wc = nc.Tensor(w(feature_dim, n_classes), requires_grad=True)
        self.bc = nc.Tensor(np.zeros(n_classes), requires_grad=True)

    @property
    def params(self):
        return [getattr(self, n) for n in self.NAMES]

    def features(self, x: nc.Tensor) -> nc.Tensor:
        h = nc.tanh(nc.add_bias(nc.matmul(x, self.w1), self.b1))
        return nc.add_bias(nc.matmul(h, self.w2), self.b2)

    def logits(self, feats: nc.Tensor) -> nc.Tensor:
        return nc.add_bias(nc.matmul(feats, self.wc), self.bc)

    def freeze(self, class_ids) -> Predictor:
        return Predictor(*[getattr(self, n).data.copy() for n in self.NAMES],
                         class_ids=tuple(class_ids))


@dataclass
class TrainState:
    predictor: Predictor
    beta1: float
    beta2: float
    adam: nc.AdamState
    epoch: int
    step: int
    components: dict = field(default_factory=dict)
    xi: float = 0.0


@dataclass
class PseudoOodBatch:
    """Decoded latent mixtures that passed the density screen."""

    x: np.ndarray

    @property
    def count(self):
        return self.x.shape[0]


# ---------------------------------------------------------------------------
# pieces of the objective

def energy(logits, temperature: float) -> nc.Tensor:
    """Negative temperature-scaled log-sum-exp of a logit vector."""
    logits = logits if isinstance(logits, nc.Tensor) else nc.Tensor(logits)
    return nc.mul_scalar(nc.logsumexp(logits, temperature), -1.0)


def energy_values(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Per-row energies of a logit matrix (plain numpy, shares the lse kernel)."""
    return -nc.logsumexp_rows_np(np.atleast_2d(logits), temperature)


def r_dg(x_batch, tpred: _TensorPredictor, gparams: gm.TransformParams, rng,
         invariance_space: str = "feature") -> nc.Tensor:
    """Mean distance between an input's representation and its resampled twin.

    The twin is produced by the frozen transformation model, entering the graph
    as a constant: gradients reach only the predictor.
    """
    x_batch = np.atleast_2d(x_batch)
    if x_batch.shape[0] == 0:
        raise ValueError("r_dg of an empty batch")
    aug = gm.data_aug(gparams, x_batch, rng)
    fa = tpred.features(nc.Tensor(x_batch))
    fb = tpred.features(nc.Tensor(aug))
    if invariance_space == "output":
        fa, fb = nc.softmax_rows(tpred.logits(fa)), nc.softmax_rows(tpred.logits(fb))
    return nc.mean_all(nc.l2_rows(fa, fb))


def mixup_semantic(s1, s2, rng, alpha: float = 1.0) -> np.ndarray:
    """Random independent Beta(alpha, alpha) scalings of two semantic codes."""
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    if s1.shape != s2.shape:
        raise ValueError(f"mixup_semantic: shape mismatch {s1.shape} vs {s2.shape}")
    lam1, lam2 = rng.beta(alpha, alpha, 2)
    return lam1 * s1 + lam2 * s2


def generate_pseudo_oods(x_batch, y_batch, partner_semantics, partner_labels,
                         gparams: gm.TransformParams, gda_model, xi: float, rng,
                         alpha: float = 1.0) -> PseudoOodBatch:
    """Mix each batch member's semantic code with a different-label partner.

    Partners are drawn uniformly from the whole training view. Mixtures whose
    per-class density stays below xi are decoded with a fresh standard-normal
    variation code; the rest are dropped.
    """
    labels = np.asarray(partner_labels)
    if np.unique(labels).size < 2:
        raise ValueError("pseudo-OOD generation needs at least two classes")
    s_batch = gm.encode_semantic(gparams, np.atleast_2d(x_batch))
    accepted = []
    for i, y in enumerate(np.asarray(y_batch)):
        candidates = np.flatnonzero(labels != y)
        j = candidates[int(rng.integers(candidates.size))]
        mixed = mixup_semantic(s_batch[i], partner_semantics[j], rng, alpha)
        if gda_mod.screen(gda_model, mixed, xi):
            v = rng.standard_normal(gparams.variation_dim)
            accepted.append(gm.decode(gparams, mixed[None, :], v[None, :])[0])
    x = np.stack(accepted) if accepted else np.zeros((0, gparams.input_dim))
    return PseudoOodBatch(x=x)


def r_ood(ind_energies, ood_energies, m_in: float, m_out: float) -> nc.Tensor:
    """Squared hinge penalties pushing training energies below m_in and
    pseudo-outlier energies above m_out. Empty pseudo side contributes 0."""
    if m_in >= m_out:
        raise ValueError(f"m_in must be below m_out, got {m_in} >= {m_out}")
    ind = ind_energies if isinstance(ind_energies, nc.Tensor) else nc.Tensor(ind_energies)
    term = nc.mean_all(nc.square(nc.relu(nc.add_scalar(ind, -m_in))))
    if ood_energies is not None:
        ood = ood_energies if isinstance(ood_energies, nc.Tensor) else nc.Tensor(ood_energies)
        if ood.data.size > 0:
            hinge = nc.relu(nc.add_scalar(nc.mul_scalar(ood, -1.0), m_out))
            term = nc.add(term, nc.mean_all(nc.square(hinge)))
    return term


def total_loss(ce, rdg_value, rood_value, beta1: float, beta2: float):
    """Recombine components; the betas are constants for the primal gradient."""
    loss = ce
    if rdg_value is not None and beta1 > 0.0:
        loss = nc.add(loss, nc.mul_scalar(rdg_value, beta1))
    if rood_value is not None and beta2 > 0.0:
        loss = nc.add(loss, nc.mul_scalar(rood_value, beta2))
    return loss


def dual_update(beta1, beta2, r_dg_value, r_ood_value, cfg: TrainConfig):
    """Projected gradient ascent on the dual variables.

    A regularizer that was not measured this step (value None) leaves its
    multiplier untouched.
    """
    if r_dg_value is not None:
        beta1 = max(0.0, beta1 + cfg.eta_dg * (r_dg_value - cfg.gamma1))
    if r_ood_value is not None:
        beta2 = max(0.0, beta2 + cfg.eta_ood * (r_ood_value - cfg.gamma2))
    return beta1, beta2


# ---------------------------------------------------------------------------
# the training loop

def train(view: TrainView, gparams: gm.TransformParams, cfg: TrainConfig):
    """Run the full constrained training loop on a training view.

    Returns (TrainState, log) where log is a list of per-step row dicts.
    """
    cfg.validate()
    if len(view) == 0:
        raise ValueError("training view is empty")
    n_classes = len(view.class_ids)

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, batch_ss, aug_ss, pseudo_ss = ss.spawn(4)
    aug_rng = np.random.Generator(np.random.PCG64(aug_ss))
    pseudo_rng = np.random.Generator(np.random.PCG64(pseudo_ss))

    tpred = _TensorPredictor(np.random.Generator(np.random.PCG64(init_ss)),
                             view.x.shape[1], cfg.hidden, cfg.feature_dim, n_classes)
    adam = nc.adam_init(tpred.params, lr=cfg.eta_p)

    # The screen model is fitted once, on the frozen semantic codes.
    view_semantics = gm.encode_semantic(gparams, view.x)
    gda_model = gda_mod.fit(zip(view_semantics, view.y.tolist()))
    xi = cfg.xi if cfg.xi is not None else \
        gda_mod.threshold_from_quantile(gda_model, view_semantics, cfg.xi_quantile)

    beta1, beta2 = 0.0, 0.0
    log = []
    step = 0
    prev_epoch_loss = None
    last_components = {}
    for epoch in range(cfg.max_epochs):
        epoch_rng = np.random.Generator(np.random.PCG64(batch_ss.spawn(1)[0]))
        epoch_loss = 0.0
        epoch_steps = 0
        for xb, yb in iterate_minibatches(view, cfg.batch_size, epoch_rng):
            feats = tpred.features(nc.Tensor(xb))
            logits = tpred.logits(feats)
            ce = nc.cross_entropy(logits, yb)

            rdg_t = rdg_val = None
            if not cfg.disable_rdg:
                rdg_t = r_dg(xb, tpred, gparams, aug_rng, cfg.invariance_space)
                rdg_val = rdg_t.item()

            rood_t = rood_val = None
            accept_rate = 0.0
            if not cfg.disable_rood:
                pseudo = generate_pseudo_oods(xb, yb, view_semantics, view.y,
                                              gparams, gda_model, xi, pseudo_rng,
                                              cfg.mixup_alpha)
                accept_rate = pseudo.count / xb.shape[0]
                if pseudo.count > 0:
                    ind_e = nc.mul_scalar(nc.logsumexp_rows(logits, cfg.temperature), -1.0)
                    ood_logits = tpred.logits(tpred.features(nc.Tensor(pseudo.x)))
                    ood_e = nc.mul_scalar(nc.logsumexp_rows(ood_logits, cfg.temperature), -1.0)
                    rood_t = r_ood(ind_e, ood_e, cfg.m_in, cfg.m_out)
                    rood_val = rood_t.item()

            loss = total_loss(ce, rdg_t, rood_t, beta1, beta2)
            components = {"loss": loss.item(), "l_ce": ce.item(),
                          "r_dg": rdg_val if rdg_val is not None else 0.0,
                          "r_ood": rood_val if rood_val is not None else 0.0}
            if not np.isfinite(components["loss"]):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: {components}",
                    components)

            nc.backward(loss)
            nc.adam_step(tpred.params, [p.grad for p in tpred.params], adam)
            for p in tpred.params:
                p.zero_grad()

            if not cfg.disable_rdg or not cfg.disable_rood:
                beta1, beta2 = dual_update(
                    beta1, beta2,
                    rdg_val if not cfg.disable_rdg else None,
                    rood_val if not cfg.disable_rood else None, cfg)
            assert beta1 >= 0.0 and beta2 >= 0.0

            log.append({"epoch": epoch, "step": step, **components,
                        "beta1": beta1, "beta2": beta2,
                        "pseudo_accept_rate": accept_rate})
            last_components = components
            epoch_loss += components["loss"]
            epoch_steps += 1
            step += 1

        epoch_mean = epoch_loss / epoch_steps
        if prev_epoch_loss is not None:
            rel = abs(epoch_mean - prev_epoch_loss) / max(abs(prev_epoch_loss), 1e-12)
            if rel < cfg.tol:
                break
        prev_epoch_loss = epoch_mean

    state = TrainState(predictor=tpred.freeze(view.class_ids), beta1=beta1, beta2=beta2,
                       adam=adam, epoch=epoch, step=step,
                       components=last_components, xi=xi)
    return state, log


LOG_COLUMNS = ("epoch", "step", "loss", "l_ce", "r_dg", "r_ood",
               "beta1", "beta2", "pseudo_accept_rate")


def write_log_csv(log, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in log:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


def ablation_config(cfg: TrainConfig, ablation: str) -> TrainConfig:
    """Materialize a named ablation as a config variant."""
    if ablation == "full":
        return cfg
    if ablation == "no-rood":
        return replace(cfg, disable_rood=True)
    if ablation == "erm":
        return replace(cfg, disable_rdg=True, disable_rood=True)
    if ablation == "output-space":
        return replace(cfg, invariance_space="output")
    raise ValueError(f"unknown ablation {ablation!r}")
