"""The transformation model: semantic/variation encoders plus a decoder.

Trained as a deterministic autoencoder whose variation code is moment-matched
to a standard normal, with an auxiliary linear class head pushing label
information into the semantic code. Once trained it is frozen: downstream
training only calls the numpy forward passes below, so no gradient can reach
these weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .datagen import iterate_minibatches


class GTrainingDiverged(RuntimeError):
    pass


@dataclass
class GTrainConfig:
    semantic_dim: int
    variation_dim: int
    input_dim: int
    n_classes: int
    hidden: int = 64
    epochs: int = 60
    learning_rate: float = 5e-3
    batch_size: int = 64
    w_rec: float = 1.0
    w_prior: float = 0.1
    w_cls: float = 0.5
    w_rex: float = 0.0
    w_dom: float = 0.3
    w_xcov: float = 1.0
    w_cycle: float = 1.0
    cycle_v_scale: float = 1.25
    v_noise: float = 0.1
    instability_noise: float = 1.0
    instability_z: float = 3.0
    seed: int = 0

    def validate(self):
        if self.w_rec <= 0:
            raise ValueError(f"w_rec must be positive, got {self.w_rec}")
        if min(self.w_prior, self.w_cls, self.w_cycle, self.w_dom, self.w_xcov,
               self.w_rex) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.v_noise < 0 or self.cycle_v_scale <= 0 or self.instability_noise < 0:
            raise ValueError("v_noise must be nonnegative and cycle_v_scale positive")
        if self.epochs < 1 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("epochs, learning_rate and batch_size must be positive")


@dataclass
class TransformParams:
    """Frozen weights of the two encoders and the decoder (plus the aux head)."""

    semantic_dim: int
    variation_dim: int
    input_dim: int
    hidden: int
    arrays: dict = field(default_factory=dict)

    _NETS = ("sem", "var", "dec")

    def layer(self, name):
        return self.arrays[name]


def _layer_names(net):
    return [f"{net}_w1", f"{net}_b1", f"{net}_w2", f"{net}_b2", f"{net}_w3", f"{net}_b3"]


def _init_mlp(rng, d_in, hidden, d_out):
    def w(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    return [w(d_in, hidden), np.zeros(hidden),
            w(hidden, hidden), np.zeros(hidden),
            w(hidden, d_out), np.zeros(d_out)]


def _mlp_np(arrays, names, x):
    w1, b1, w2, b2, w3, b3 = (arrays[n] for n in names)
    h1 = np.tanh(x @ w1 + b1)
    h2 = np.tanh(h1 @ w2 + b2)
    return h2 @ w3 + b3


def _mlp_t(tensors, names, x):
    w1, b1, w2, b2, w3, b3 = (tensors[n] for n in names)
    h1 = nc.tanh(nc.add_bias(nc.matmul(x, w1), b1))
    h2 = nc.tanh(nc.add_bias(nc.matmul(h1, w2), b2))
    return nc.add_bias(nc.matmul(h2, w3), b3)


def _check_input(params, x, dim, what):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != dim:
        raise ValueError(f"{what} expects dim {dim}, got {x.shape[1]}")
    return x


def encode_semantic(params: TransformParams, x) -> np.ndarray:
    x = _check_input(params, x, params.input_dim, "encode_semantic")
    return _mlp_np(params.arrays, _layer_names("sem"), x)


def encode_variation(params: TransformParams, x) -> np.ndarray:
    x = _check_input(params, x, params.input_dim, "encode_variation")
    return _mlp_np(params.arrays, _layer_names("var"), x)


def decode(params: TransformParams, s, v) -> np.ndarray:
    s = _check_input(params, s, params.semantic_dim, "decode (semantic)")
    v = _check_input(params, v, params.variation_dim, "decode (variation)")
    if s.shape[0] != v.shape[0]:
        raise ValueError(f"decode: batch mismatch {s.shape[0]} vs {v.shape[0]}")
    return _mlp_np(params.arrays, _layer_names("dec"), np.concatenate([s, v], axis=1))


def reconstruct(params: TransformParams, x) -> np.ndarray:
    return decode(params, encode_semantic(params, x), encode_variation(params, x))


def data_aug(params: TransformParams, x, rng) -> np.ndarray:
    """Re-decode the semantic code with a fresh standard-normal variation code.

    Labels are untouched by construction: the caller keeps its own y.
    """
    x = _check_input(params, x, params.input_dim, "data_aug")
    s = encode_semantic(params, x)
    v_new = rng.standard_normal((x.shape[0], params.variation_dim))
    return decode(params, s, v_new)


def relative_reconstruction_error(params: TransformParams, x) -> float:
    """Reconstruction MSE normalized by the input variance around its mean."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    err = float(np.mean((x - reconstruct(params, x)) ** 2))
    var = float(np.mean((x - x.mean(axis=0)) ** 2))
    return err / var


# ---------------------------------------------------------------------------
# probes for disentanglement quality

def linear_probe_accuracy(features, labels, heldout_fraction=0.25, seed=0) -> float:
    """Accuracy of a one-hot least-squares probe on a held-out split."""
    z = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(z))
    n_hold = max(1, int(len(z) * heldout_fraction))
    hold, fitidx = order[:n_hold], order[n_hold:]
    onehot = (y[fitidx, None] == classes[None, :]).astype(np.float64)
    design = np.column_stack([z[fitidx], np.ones(len(fitidx))])
    coef, *_ = np.linalg.lstsq(design, onehot, rcond=None)
    pred = classes[np.argmax(np.column_stack([z[hold], np.ones(n_hold)]) @ coef, axis=1)]
    return float(np.mean(pred == y[hold]))


def r_squared(features, targets) -> float:
    """Mean per-dimension R^2 of a linear regression from features to targets."""
    z = np.asarray(features, dtype=np.float64)
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if t.shape[0] != z.shape[0]:
        t = t.T
    design = np.column_stack([z, np.ones(len(z))])
    coef, *_ = np.linalg.lstsq(design, t, rcond=None)
    resid = t - design @ coef
    ss_res = np.sum(resid ** 2, axis=0)
    ss_tot = np.sum((t - t.mean(axis=0)) ** 2, axis=0)
    return float(np.mean(1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0)))


# ---------------------------------------------------------------------------
# training

def unstable_coordinates(x, y, domain, z_cut=3.0):
    """Flag input coordinates whose class correlation shifts across domains.

    For every coordinate and class, compare corr(x_j, 1[y=c]) between training
    domains; a coordinate whose maximal spread is a robust outlier against the
    other coordinates is treated as unstable (variation, not semantics).
    Returns a boolean mask over coordinates.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    domain = np.asarray(domain)
    domains = np.unique(domain)
    classes = np.unique(y)
    if domains.size < 2:
        return np.zeros(x.shape[1], dtype=bool)
    spread = np.zeros(x.shape[1])
    for c in classes:
        corrs = []
        for e in domains:
            rows = domain == e
            xc = x[rows]
            ind = (y[rows] == c).astype(np.float64)
            if ind.std() == 0:
                continue
            xs = (xc - xc.mean(axis=0)) / np.where(xc.std(axis=0) > 0, xc.std(axis=0), 1.0)
            corrs.append(xs.T @ ((ind - ind.mean()) / ind.std()) / len(ind))
        if len(corrs) >= 2:
            corrs = np.stack(corrs)
            spread = np.maximum(spread, corrs.max(axis=0) - corrs.min(axis=0))
    med = np.median(spread)
    mad = np.median(np.abs(spread - med))
    scale = 1.4826 * mad if mad > 0 else (spread.std() if spread.std() > 0 else 1.0)
    return (spread - med) / scale > z_cut


def train_g(view, cfg: GTrainConfig):
    """Train the transformation model on a training view.

    Returns (TransformParams, history) where history holds per-epoch means of
    each loss component.
    """
    cfg.validate()
    if len(view) == 0:
        raise ValueError("training view is empty")
    if view.x.shape[1] != cfg.input_dim:
        raise ValueError(f"view input dim {view.x.shape[1]} != config {cfg.input_dim}")

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, batch_ss, noise_ss = ss.spawn(3)
    init_rng = np.random.Generator(np.random.PCG64(init_ss))
    noise_rng = np.random.Generator(np.random.PCG64(noise_ss))

    tensors = {}
    for net, d_out in (("sem", cfg.semantic_dim), ("var", cfg.variation_dim),
                       ("dec", cfg.input_dim)):
        d_in = cfg.input_dim if net != "dec" else cfg.semantic_dim + cfg.variation_dim
        for name, arr in zip(_layer_names(net), _init_mlp(init_rng, d_in, cfg.hidden, d_out)):
            tensors[name] = nc.Tensor(arr, requires_grad=True)
    tensors["cls_w"] = nc.Tensor(
        init_rng.standard_normal((cfg.semantic_dim, cfg.n_classes)) / np.sqrt(cfg.semantic_dim),
        requires_grad=True)
    tensors["cls_b"] = nc.Tensor(np.zeros(cfg.n_classes), requires_grad=True)
    domain_ids = sorted(set(view.domain.tolist()))
    dom_index = np.array([domain_ids.index(e) for e in view.domain])
    tensors["dom_w"] = nc.Tensor(
        init_rng.standard_normal((cfg.variation_dim, len(domain_ids))) / np.sqrt(cfg.variation_dim),
        requires_grad=True)
    tensors["dom_b"] = nc.Tensor(np.zeros(len(domain_ids)), requires_grad=True)
    skip = []
    if cfg.w_cls == 0:
        skip.append("cls_")
    if cfg.w_dom == 0 or len(domain_ids) < 2:
        skip.append("dom_")
    params_list = [t for name, t in tensors.items()
                   if not any(name.startswith(s) for s in skip)]
    adam = nc.adam_init(params_list, lr=cfg.learning_rate)
    eye = nc.Tensor(np.eye(cfg.variation_dim))

    unstable = np.zeros(cfg.input_dim, dtype=bool)
    if cfg.instability_noise > 0:
        unstable = unstable_coordinates(view.x, view.y, view.domain, cfg.instability_z)
    noise_scale = cfg.instability_noise * unstable.astype(np.float64)

    history = []
    for epoch in range(cfg.epochs):
        epoch_rng = np.random.Generator(np.random.PCG64(batch_ss.spawn(1)[0]))
        sums = {"rec": 0.0, "prior": 0.0, "cls": 0.0, "cycle": 0.0, "total": 0.0}
        n_steps = 0
        order = epoch_rng.permutation(len(view))
        for start in range(0, len(view), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb, db = view.x[idx], view.y[idx], dom_index[idx]
            m = xb.shape[0]
            xb_t = nc.Tensor(xb)
            # The semantic encoder sees unstable coordinates only through noise,
            # so their content cannot route through s; reconstruction must pull
            # it from v instead.
            if unstable.any():
                xb_sem = nc.Tensor(xb + noise_scale * noise_rng.standard_normal(xb.shape))
            else:
                xb_sem = xb_t
            s = _mlp_t(tensors, _layer_names("sem"), xb_sem)
            v = _mlp_t(tensors, _layer_names("var"), xb_t)
            # Noise on the variation channel keeps semantics off it: content the
            # decoder must reproduce exactly has to come through s.
            v_dec = v if cfg.v_noise == 0 else nc.add(
                v, nc.Tensor(cfg.v_noise * noise_rng.standard_normal(v.data.shape)))
            xhat = _mlp_t(tensors, _layer_names("dec"), nc.concat_cols(s, v_dec))
            rec = nc.mse(xhat, xb_t)

            mu = nc.batch_mean(v)
            prior = nc.sum_all(nc.square(mu))
            if m > 1:
                centered = nc.add_bias(v, nc.mul_scalar(mu, -1.0))
                cov = nc.mul_scalar(nc.matmul(nc.transpose(centered), centered), 1.0 / (m - 1))
                prior = nc.add(prior, nc.sum_all(nc.square(nc.sub(cov, eye))))

            loss = nc.mul_scalar(rec, cfg.w_rec)
            if cfg.w_prior > 0:
                loss = nc.add(loss, nc.mul_scalar(prior, cfg.w_prior))
            cls_val = 0.0
            if cfg.w_cls > 0:
                logits = nc.add_bias(nc.matmul(s, tensors["cls_w"]), tensors["cls_b"])
                cls = nc.cross_entropy(logits, yb)
                loss = nc.add(loss, nc.mul_scalar(cls, cfg.w_cls))
                cls_val = cls.item()
                if cfg.w_rex > 0:
                    # Variance of the head's per-domain risks. Domain-unstable
                    # shortcuts (spuriously label-correlated content) raise it;
                    # stable semantics do not, so only semantics can profitably
                    # enter the semantic code through the head.
                    per_dom = [nc.cross_entropy(nc.gather_rows(logits, rows), yb[rows])
                               for rows in (np.flatnonzero(db == i)
                                            for i in range(len(domain_ids)))
                               if rows.size > 1]
                    if len(per_dom) > 1:
                        mean_ce = nc.mul_scalar(per_dom[0], 0.0)
                        for ce_e in per_dom:
                            mean_ce = nc.add(mean_ce, nc.mul_scalar(ce_e, 1.0 / len(per_dom)))
                        rex = nc.mul_scalar(per_dom[0], 0.0)
                        for ce_e in per_dom:
                            rex = nc.add(rex, nc.square(nc.sub(ce_e, mean_ce)))
                        loss = nc.add(loss, nc.mul_scalar(rex, cfg.w_rex))
            if cfg.w_dom > 0 and len(domain_ids) >= 2:
                # Domain identity is variation content: anchor it on v.
                dlogits = nc.add_bias(nc.matmul(v, tensors["dom_w"]), tensors["dom_b"])
                loss = nc.add(loss, nc.mul_scalar(nc.cross_entropy(dlogits, db), cfg.w_dom))
            if cfg.w_xcov > 0 and m > 1:
                # No shared content between the codes: each signal must pick a side.
                mu_s = nc.batch_mean(s)
                s_c = nc.add_bias(s, nc.mul_scalar(mu_s, -1.0))
                v_c = nc.add_bias(v, nc.mul_scalar(nc.batch_mean(v), -1.0))
                xcov = nc.mul_scalar(nc.matmul(nc.transpose(s_c), v_c), 1.0 / (m - 1))
                loss = nc.add(loss, nc.mul_scalar(nc.sum_all(nc.square(xcov)), cfg.w_xcov))
            cyc_val = 0.0
            if cfg.w_cycle > 0:
                # Decode with a prior-sampled variation code, re-encode, and
                # require both codes to survive. This pins each factor to the
                # encoder the decoder reads it from, and trains the exact
                # generation path used at augmentation time, so the semantic
                # encoder stays reliable on variations beyond the training
                # domains.
                v_prior = cfg.cycle_v_scale * noise_rng.standard_normal(v.data.shape)
                x_swap = _mlp_t(tensors, _layer_names("dec"),
                                nc.concat_cols(s, nc.Tensor(v_prior)))
                s_back = _mlp_t(tensors, _layer_names("sem"), x_swap)
                v_back = _mlp_t(tensors, _layer_names("var"), x_swap)
                cyc = nc.add(nc.mse(s_back, nc.Tensor(s.data)),
                             nc.mse(v_back, nc.Tensor(v_prior)))
                loss = nc.add(loss, nc.mul_scalar(cyc, cfg.w_cycle))
                cyc_val = cyc.item()

            if not np.isfinite(loss.item()):
                raise GTrainingDiverged(
                    f"loss became non-finite at epoch {epoch}: rec={rec.item():.4g} "
                    f"prior={prior.item():.4g} cls={cls_val:.4g} cycle={cyc_val:.4g}")
            nc.backward(loss)
            nc.adam_step(params_list, [p.grad for p in params_list], adam)
            for p in params_list:
                p.zero_grad()
            sums["rec"] += rec.item()
            sums["prior"] += prior.item()
            sums["cls"] += cls_val
            sums["cycle"] += cyc_val
            sums["total"] += loss.item()
            n_steps += 1
        history.append({"epoch": epoch, **{k: s / n_steps for k, s in sums.items()}})

    params = TransformParams(semantic_dim=cfg.semantic_dim, variation_dim=cfg.variation_dim,
                             input_dim=cfg.input_dim, hidden=cfg.hidden,
                             arrays={name: t.data.copy() for name, t in tensors.items()})
    return params, history
