"""CLOTH training: component losses, the alternating D / (C, T, G) loop, evaluation.

The losses are written twice over: output-level functions take network
outputs (probabilities) and return the value plus gradients w.r.t. those
outputs; the model-level ``loss_*`` wrappers run the networks and backprop
into parameters, which is what the gradient checks exercise.
"""
import copy
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import nn
from .data import batch_iter, split_holdout
from .errors import ConfigError, DataError, TrainingError
from .hmm import cahomm_loss, check_order
from .numerics import SeededStream, clamp_mask, clamped_log, entropy
from .ot import Marginals, free_marginal_optimum, round_to_marginals, row_argmin_plan, sinkhorn, transport_cost

METRIC_COLUMNS = ("iter", "L_C", "L_D", "L_t", "L_ent", "L_HMM", "W_est", "src_acc", "tgt_acc", "wall_ms")

# ablation rows: which loss groups are on, as (adversarial, transport, entropy, hmm)
ABLATION_ROWS = {
    1: (False, False, False, False),
    2: (True, False, False, False),
    3: (True, True, False, False),
    4: (True, True, True, False),
    5: (True, True, False, True),
    6: (True, False, True, True),
    7: (True, True, True, True),
}


@dataclass
class TrainConfig:
    seed: int
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.01
    q: int = 3
    lr: float = 1e-4
    batch_size: int = 128
    iters: int = 3000
    adversarial: bool = True
    g_hidden: list = field(default_factory=lambda: [32])
    latent_dim: int = 16
    head_hidden: list = field(default_factory=list)
    d_hidden: list = field(default_factory=lambda: [32])
    activation: str = "relu"
    keep_g: float = 0.8
    keep_c: float = 0.8
    keep_t: float = 0.8
    keep_d: float = 0.8
    dropout_adapted: bool = False
    polyak_rho: float = 0.998
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clamp_floor: float = 1e-12
    hmm_scale: object = None  # None -> 1 / latent_dim
    share_ct: bool = False
    binary_discriminator: bool = False
    sinkhorn_mode: bool = False
    sinkhorn_eps: float = 0.1
    sinkhorn_iters: int = 200
    log_interval: int = 100
    w_smoothing: float = 0.99
    val_fraction: float = 0.1
    select_best: bool = False
    log_wall_time: bool = True

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        for name in ("alpha", "beta", "gamma"):
            need(getattr(self, name) >= 0, name, "must be nonnegative")
        try:
            check_order(self.q)
        except ValueError as e:
            raise ConfigError("q", str(e)) from None
        need(self.lr > 0, "lr", "must be positive")
        need(self.batch_size >= 2, "batch_size", "must be at least 2")
        need(self.iters >= 0, "iters", "must be nonnegative")
        need(self.latent_dim >= 1, "latent_dim", "must be positive")
        for name in ("keep_g", "keep_c", "keep_t", "keep_d"):
            need(0 < getattr(self, name) <= 1, name, "must lie in (0, 1]")
        need(0 <= self.polyak_rho < 1, "polyak_rho", "must lie in [0, 1)")
        need(0 < self.clamp_floor < 1, "clamp_floor", "must lie in (0, 1)")
        need(self.hmm_scale is None or self.hmm_scale > 0, "hmm_scale", "must be positive or null")
        need(self.log_interval >= 1, "log_interval", "must be positive")
        need(0 <= self.w_smoothing < 1, "w_smoothing", "must lie in [0, 1)")
        need(0 <= self.val_fraction < 1, "val_fraction", "must lie in [0, 1)")
        need(self.sinkhorn_eps > 0, "sinkhorn_eps", "must be positive")
        need(self.activation in nn.ACTIVATIONS, "activation", f"must be one of {nn.ACTIVATIONS}")
        if self.binary_discriminator:
            need(self.alpha == 0 and not self.sinkhorn_mode, "binary_discriminator",
                 "a two-output discriminator defines no class costs; set alpha=0 and sinkhorn_mode=false")
        return self

    @property
    def scale(self):
        return 1.0 / self.latent_dim if self.hmm_scale is None else float(self.hmm_scale)

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def apply_ablation(config, row):
    """Copy of ``config`` with the loss groups of ablation row ``row`` (1-7) switched on."""
    if row not in ABLATION_ROWS:
        raise ConfigError("row", f"ablation row must be one of {sorted(ABLATION_ROWS)}")
    adv, t, ent, h = ABLATION_ROWS[row]
    return dataclasses.replace(
        config,
        adversarial=adv,
        alpha=config.alpha if t else 0.0,
        beta=config.beta if ent else 0.0,
        gamma=config.gamma if h else 0.0,
    )


# ------------------------------------------------------------------ model

@dataclass
class Net:
    spec: nn.MlpSpec
    params: nn.MlpParams
    adam: nn.AdamState
    shadow: nn.PolyakShadow

    @classmethod
    def create(cls, spec, stream, config):
        params = nn.init_params(spec, stream)
        adam = nn.AdamState.for_params(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
        return cls(spec, params, adam, nn.PolyakShadow.of(params, config.polyak_rho))

    def run(self, x, mode="eval", stream=None, shadow=False):
        params = self.shadow.params if shadow else self.params
        return nn.forward(params, self.spec, x, mode, stream)


class ClothModel:
    """Feature extractor G and the three heads C, T, D (T may alias C)."""

    NAMES = ("G", "C", "T", "D")

    def __init__(self, nets, num_classes):
        self.nets = nets
        self.num_classes = num_classes
        g_out = nets["G"].spec.n_out
        for k in ("C", "T", "D"):
            if nets[k].spec.n_in != g_out:
                raise ConfigError(k, f"input width {nets[k].spec.n_in} != latent width {g_out}")

    @classmethod
    def build(cls, config, input_dim, num_classes, stream=None):
        stream = stream or SeededStream(config.seed)
        init = stream.child("nn", "init")
        p = config.latent_dim
        act = config.activation
        g = nn.MlpSpec([input_dim, *config.g_hidden, p], act, "linear", config.keep_g, config.dropout_adapted)
        c = nn.MlpSpec([p, *config.head_hidden, num_classes], act, "softmax", config.keep_c)
        t = nn.MlpSpec([p, *config.head_hidden, num_classes], act, "softmax", config.keep_t)
        d_out = 2 if config.binary_discriminator else num_classes + 1
        d = nn.MlpSpec([p, *config.d_hidden, d_out], act, "softmax", config.keep_d)
        nets = {
            "G": Net.create(g, init.child("G"), config),
            "C": Net.create(c, init.child("C"), config),
            "D": Net.create(d, init.child("D"), config),
        }
        nets["T"] = nets["C"] if config.share_ct else Net.create(t, init.child("T"), config)
        return cls(nets, num_classes)

    @property
    def shares_ct(self):
        return self.nets["T"] is self.nets["C"]

    def unique_names(self):
        return ("G", "C", "D") if self.shares_ct else self.NAMES

    def copy(self):
        nets = {k: copy.deepcopy(self.nets[k]) for k in ("G", "C", "D")}
        nets["T"] = nets["C"] if self.shares_ct else copy.deepcopy(self.nets["T"])
        return ClothModel(nets, self.num_classes)

    def latent(self, x, shadow=True):
        return self.nets["G"].run(x, shadow=shadow)[0]

    def predict_proba(self, x, shadow=True):
        return self.nets["C"].run(self.latent(x, shadow), shadow=shadow)[0]


# ----------------------------------------------------- output-level losses

def disc_loss_outputs(d_src, ys, d_tgt, num_classes, floor=1e-12):
    """Discriminator loss on D outputs. The last column is the 'target' output."""
    n_s, n_t = len(d_src), len(d_tgt)
    last = d_src.shape[1] - 1
    g_src = np.zeros_like(d_src)
    g_tgt = np.zeros_like(d_tgt)
    p_t = d_tgt[:, last]
    val = -np.mean(clamped_log(p_t, floor))
    g_tgt[:, last] = -clamp_mask(p_t, floor) / (n_t * np.clip(p_t, floor, 1.0))
    src_mass = 1.0 - d_src[:, last]
    val -= np.mean(clamped_log(src_mass, floor))
    g_src[:, last] = clamp_mask(src_mass, floor) / (n_s * np.clip(src_mass, floor, 1.0))
    if last == num_classes:  # multi-class D also classifies source rows
        rows = np.arange(n_s)
        p_y = d_src[rows, ys]
        val -= np.mean(clamped_log(p_y, floor))
        g_src[rows, ys] -= clamp_mask(p_y, floor) / (n_s * np.clip(p_y, floor, 1.0))
    return float(val), g_src, g_tgt


def transport_loss_outputs(t_src, ys, t_tgt, d_tgt, num_classes, floor=1e-12):
    """Amortised transport loss. Returns (value, target term, g_t_src, g_t_tgt, g_d_tgt)."""
    n_s, n_t = len(t_src), len(t_tgt)
    d_cls = d_tgt[:, :num_classes]
    cost = -clamped_log(d_cls, floor)
    target_term = float(np.sum(t_tgt * cost) / n_t)
    g_t_tgt = cost / n_t
    g_d_tgt = np.zeros_like(d_tgt)
    g_d_tgt[:, :num_classes] = -t_tgt * clamp_mask(d_cls, floor) / (n_t * np.clip(d_cls, floor, 1.0))
    rows = np.arange(n_s)
    p_y = t_src[rows, ys]
    source_term = float(-np.mean(clamped_log(p_y, floor)))
    g_t_src = np.zeros_like(t_src)
    g_t_src[rows, ys] = -clamp_mask(p_y, floor) / (n_s * np.clip(p_y, floor, 1.0))
    return target_term + source_term, target_term, g_t_src, g_t_tgt, g_d_tgt


def entropy_loss_outputs(t_tgt, floor=1e-12):
    """Mean per-row entropy minus entropy of the mean row."""
    n = len(t_tgt)
    mean = t_tgt.mean(axis=0)
    val = float(np.mean(entropy(t_tgt)) - entropy(mean))
    # dH/dp = -(log p + 1); the +1 terms cancel between the two parts
    grad = (clamped_log(mean, floor)[None, :] - clamped_log(t_tgt, floor)) / n
    return val, grad


def adversarial_loss_outputs(d_src, d_tgt, floor=1e-12):
    """-mean_src log D_last + mean_tgt log D_last (generator side, D frozen)."""
    last = d_src.shape[1] - 1
    n_s, n_t = len(d_src), len(d_tgt)
    ps, pt = d_src[:, last], d_tgt[:, last]
    val = float(-np.mean(clamped_log(ps, floor)) + np.mean(clamped_log(pt, floor)))
    g_src = np.zeros_like(d_src)
    g_tgt = np.zeros_like(d_tgt)
    g_src[:, last] = -clamp_mask(ps, floor) / (n_s * np.clip(ps, floor, 1.0))
    g_tgt[:, last] = clamp_mask(pt, floor) / (n_t * np.clip(pt, floor, 1.0))
    return val, g_src, g_tgt


def classifier_loss_outputs(c_src, ys, floor=1e-12):
    n = len(c_src)
    rows = np.arange(n)
    p_y = c_src[rows, ys]
    g = np.zeros_like(c_src)
    g[rows, ys] = -clamp_mask(p_y, floor) / (n * np.clip(p_y, floor, 1.0))
    return float(-np.mean(clamped_log(p_y, floor))), g


def sinkhorn_loss_outputs(d_all, num_classes, epsilon, max_iter, floor=1e-12):
    """Minibatch entropic OT to uniform class masses; gradient by the envelope theorem."""
    n = len(d_all)
    d_cls = d_all[:, :num_classes]
    cost = -clamped_log(d_cls, floor)
    marg = Marginals(np.full(n, 1.0 / n), np.full(num_classes, 1.0 / num_classes))
    plan = sinkhorn(cost, marg, epsilon, max_iter, tol=1e-9).plan
    g = np.zeros_like(d_all)
    g[:, :num_classes] = -plan * clamp_mask(d_cls, floor) / np.clip(d_cls, floor, 1.0)
    return transport_cost(plan, cost), g


# ------------------------------------------------------ model-level losses

def _check_labels(ys, num_classes):
    ys = np.asarray(ys, dtype=np.int64)
    if ys.size and (ys.min() < 0 or ys.max() >= num_classes):
        raise DataError(f"source label outside [1, {num_classes}]")
    return ys


def _latents(model, xs, xt, mode="eval", stream=None):
    x = np.concatenate([xs, xt], axis=0)
    z, cache = model.nets["G"].run(x, mode, stream)
    return z, cache, len(xs)


def _backprop(model, caches, out_grads, dz, gcache):
    """Backprop per-head output gradients, accumulate latent grads, finish through G."""
    grads = {}
    for name, g_out in out_grads.items():
        net = model.nets[name]
        gp, gz = nn.backward(net.params, net.spec, caches[name], g_out)
        dz = dz + gz
        key = "C" if (name == "T" and model.shares_ct) else name
        if key in grads:
            for a, b in zip(grads[key].arrays(), gp.arrays()):
                a += b
        else:
            grads[key] = gp
    g = model.nets["G"]
    grads["G"], _ = nn.backward(g.params, g.spec, gcache, dz)
    return grads


def loss_discriminator(model, xs, ys, xt, floor=1e-12):
    """L^D and its gradients for D only (G is held fixed)."""
    ys = _check_labels(ys, model.num_classes)
    z, _, n_s = _latents(model, xs, xt)
    d = model.nets["D"]
    out, cache = d.run(z)
    val, g_s, g_t = disc_loss_outputs(out[:n_s], ys, out[n_s:], model.num_classes, floor)
    if not np.isfinite(val):
        raise TrainingError("non-finite discriminator loss")
    gp, _ = nn.backward(d.params, d.spec, cache, np.concatenate([g_s, g_t]))
    return val, gp


def _head_forward(model, names, z):
    outs, caches = {}, {}
    for name in names:
        outs[name], caches[name] = model.nets[name].run(z)
    return outs, caches


def loss_transport(model, xs, ys, xt, floor=1e-12):
    """L^t with gradients for T and G; the cost path through D reaches G but not D's weights."""
    ys = _check_labels(ys, model.num_classes)
    z, gcache, n_s = _latents(model, xs, xt)
    outs, caches = _head_forward(model, ("T", "D"), z)
    t, d = outs["T"], outs["D"]
    val, _, g_ts, g_tt, g_dt = transport_loss_outputs(t[:n_s], ys, t[n_s:], d[n_s:], model.num_classes, floor)
    if not np.isfinite(val):
        raise TrainingError("non-finite transport loss")
    g_d = np.concatenate([np.zeros_like(d[:n_s]), g_dt])
    grads = _backprop(model, caches, {"T": np.concatenate([g_ts, g_tt]), "D": g_d},
                      np.zeros_like(z), gcache)
    grads.pop("D")
    return val, grads


def loss_entropy(model, xt, floor=1e-12):
    if len(xt) < 2:
        raise DataError("the entropy loss needs at least two target rows")
    z, gcache = model.nets["G"].run(xt)
    outs, caches = _head_forward(model, ("T",), z)
    val, g = entropy_loss_outputs(outs["T"], floor)
    return val, _backprop(model, caches, {"T": g}, np.zeros_like(z), gcache)


def loss_generator_adversarial(model, xs, xt, floor=1e-12):
    z, gcache, n_s = _latents(model, xs, xt)
    outs, caches = _head_forward(model, ("D",), z)
    d = outs["D"]
    val, g_s, g_t = adversarial_loss_outputs(d[:n_s], d[n_s:], floor)
    grads = _backprop(model, caches, {"D": np.concatenate([g_s, g_t])}, np.zeros_like(z), gcache)
    grads.pop("D")
    return val, grads


def loss_classifier(model, xs, ys, floor=1e-12):
    ys = _check_labels(ys, model.num_classes)
    z, gcache = model.nets["G"].run(xs)
    outs, caches = _head_forward(model, ("C",), z)
    val, g = classifier_loss_outputs(outs["C"], ys, floor)
    return val, _backprop(model, caches, {"C": g}, np.zeros_like(z), gcache)


def loss_hmm(model, xs, ys, xt, q, scale):
    """Class-aware moment matching with gradients for T and G."""
    ys = _check_labels(ys, model.num_classes)
    z, gcache, n_s = _latents(model, xs, xt)
    outs, caches = _head_forward(model, ("T",), z[n_s:])
    res = cahomm_loss(z[:n_s], ys, z[n_s:], outs["T"], q, scale)
    dz = np.concatenate([res.grad_source, res.grad_target])
    t_net = model.nets["T"]
    gp, gz = nn.backward(t_net.params, t_net.spec, caches["T"], res.grad_t_probs)
    dz[n_s:] += gz
    g = model.nets["G"]
    grads = {"G": nn.backward(g.params, g.spec, gcache, dz)[0], "T": gp}
    return res.loss, grads


# ------------------------------------------------------------- evaluation

class EvalResult(NamedTuple):
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray  # confusion[true, predicted]


def accuracy_report(pred, labels, num_classes):
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    totals = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(totals > 0, np.diag(conf) / np.maximum(totals, 1), np.nan)
    acc = float(np.mean(pred == labels)) if len(labels) else float("nan")
    return EvalResult(acc, per_class, conf)


def evaluate(model, dataset, shadow=True):
    """Accuracy of argmax C(G(x)) (Polyak shadow by default); ties go to the lowest class."""
    labels = dataset.evaluation_labels()
    if len(dataset) == 0:
        return accuracy_report(np.zeros(0, dtype=np.int64), labels, model.num_classes)
    pred = np.argmax(model.predict_proba(dataset.features, shadow), axis=1)
    return accuracy_report(pred, labels, model.num_classes)


# ---------------------------------------------------------------- training

class MetricsLog:
    """Collects metric rows and optionally streams them to a CSV file."""

    def __init__(self, path=None):
        self.rows = []
        self.path = path
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._fh.write(",".join(METRIC_COLUMNS) + "\n")

    def __call__(self, row):
        self.rows.append(row)
        if self._fh is not None:
            self._fh.write(format_metrics_row(row) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)


def format_metrics_row(row):
    parts = [str(int(row["iter"]))]
    for col in METRIC_COLUMNS[1:-1]:
        parts.append(repr(float(row[col])))
    parts.append(f"{row['wall_ms']:.3f}")
    return ",".join(parts)


@dataclass
class _Sums:
    n: int = 0
    values: dict = field(default_factory=dict)

    def add(self, **kw):
        self.n += 1
        for k, v in kw.items():
            self.values[k] = self.values.get(k, 0.0) + v

    def mean(self, key):
        return self.values.get(key, 0.0) / max(self.n, 1)


def _needs_discriminator(config):
    return config.adversarial or config.alpha > 0 or config.sinkhorn_mode


def _all_finite(grads):
    return all(np.all(np.isfinite(a)) for g in grads.values() for a in g.arrays())


def discriminator_step(model, config, xs, ys, xt, drop):
    z, _, n_s = _latents(model, xs, xt, "train", drop)
    d = model.nets["D"]
    out, cache = d.run(z, "train", drop)
    val, g_s, g_t = disc_loss_outputs(out[:n_s], ys, out[n_s:], model.num_classes, config.clamp_floor)
    gp, _ = nn.backward(d.params, d.spec, cache, np.concatenate([g_s, g_t]))
    if not np.isfinite(val) or not _all_finite({"D": gp}):
        raise TrainingError("non-finite discriminator loss or gradient")
    nn.adam_polyak_step(d.params, gp, d.adam, d.shadow, config.lr)
    return val


def generator_step(model, config, xs, ys, xt, drop):
    """One update of C, T and G on the weighted sum of their losses. Returns loss values."""
    m = model.num_classes
    floor = config.clamp_floor
    z, gcache, n_s = _latents(model, xs, xt, "train", drop)
    zs, zt = z[:n_s], z[n_s:]
    c_out, c_cache = model.nets["C"].run(zs, "train", drop)
    t_out, t_cache = model.nets["T"].run(z, "train", drop)
    t_src, t_tgt = t_out[:n_s], t_out[n_s:]
    use_d = _needs_discriminator(config)
    if use_d:
        d_out, d_cache = model.nets["D"].run(z, "eval")

    vals = {}
    g_c = np.zeros_like(c_out)
    g_t = np.zeros_like(t_out)
    g_d = np.zeros_like(d_out) if use_d else None
    dz = np.zeros_like(z)

    vals["L_C"], g = classifier_loss_outputs(c_out, ys, floor)
    g_c += g

    if config.adversarial:
        v, gs, gt = adversarial_loss_outputs(d_out[:n_s], d_out[n_s:], floor)
        vals["L_G"] = v
        g_d[:n_s] += gs
        g_d[n_s:] += gt

    if config.sinkhorn_mode:
        v, g = sinkhorn_loss_outputs(d_out, m, config.sinkhorn_eps, config.sinkhorn_iters, floor)
        vals["L_t"], vals["W"] = v, v
        if config.alpha > 0:
            g_d += config.alpha * g
    elif use_d and not config.binary_discriminator:
        v, w, g_ts, g_tt, g_dt = transport_loss_outputs(t_src, ys, t_tgt, d_out[n_s:], m, floor)
        vals["L_t"], vals["W"] = v, w
        if config.alpha > 0:
            g_t[:n_s] += config.alpha * g_ts
            g_t[n_s:] += config.alpha * g_tt
            g_d[n_s:] += config.alpha * g_dt
    else:
        vals["L_t"] = vals["W"] = float("nan")
    has_transport = config.sinkhorn_mode or (use_d and not config.binary_discriminator)

    vals["L_ent"], g = entropy_loss_outputs(t_tgt, floor)
    if config.beta > 0 and not config.sinkhorn_mode:
        g_t[n_s:] += config.beta * g

    res = cahomm_loss(zs, ys, zt, t_tgt, config.q, config.scale)
    vals["L_HMM"] = res.loss
    if config.gamma > 0:
        dz[:n_s] += config.gamma * res.grad_source
        dz[n_s:] += config.gamma * res.grad_target
        g_t[n_s:] += config.gamma * res.grad_t_probs

    for k, v in vals.items():
        if k in ("L_t", "W") and not has_transport:
            continue
        if not np.isfinite(v):
            raise TrainingError(f"non-finite {k}")

    grads = {}
    for name, out_cache, g_out, rows in (("C", c_cache, g_c, slice(0, n_s)), ("T", t_cache, g_t, slice(None))):
        net = model.nets[name]
        gp, gz = nn.backward(net.params, net.spec, out_cache, g_out)
        dz[rows] += gz
        key = "C" if name == "T" and model.shares_ct else name
        if key in grads:
            for a, b in zip(grads[key].arrays(), gp.arrays()):
                a += b
        else:
            grads[key] = gp
    if use_d:
        d = model.nets["D"]
        _, gz = nn.backward(d.params, d.spec, d_cache, g_d)
        dz += gz
    g = model.nets["G"]
    grads["G"], _ = nn.backward(g.params, g.spec, gcache, dz)
    if not _all_finite(grads):
        raise TrainingError("non-finite gradient in the C/T/G step")
    for name, gp in grads.items():
        net = model.nets[name]
        nn.adam_polyak_step(net.params, gp, net.adam, net.shadow, config.lr)
    return vals


def train(config, source, target, sink=None, model=None):
    """Alternate discriminator and C/T/G updates for ``config.iters`` iterations.

    Every ``log_interval`` iterations a metrics row (interval-mean losses,
    smoothed transport estimate, accuracies of the Polyak-averaged model) is
    passed to ``sink``. A non-finite loss raises :class:`TrainingError`
    carrying the last good model as ``checkpoint``.
    """
    config.validate()
    if source.num_classes != target.num_classes:
        raise DataError("source and target disagree on the number of classes")
    root = SeededStream(config.seed)
    src_train, src_val = split_holdout(source, config.val_fraction, root.child("data", "holdout"))
    if model is None:
        model = ClothModel.build(config, source.dim, source.num_classes, root)
    ys_all = src_train.training_labels()
    xs_all, xt_all = src_train.features, target.features
    b = config.batch_size
    if b > len(src_train) or b > len(target):
        raise ConfigError("batch_size", f"{b} exceeds the source ({len(src_train)}) or target ({len(target)}) size")
    batches = {k: batch_iter(len(src_train) if k.endswith("src") else len(target), b,
                             root.child("data", "batches", k), drop_last=True)
               for k in ("d_src", "d_tgt", "g_src", "g_tgt")}
    drop = root.child("nn", "dropout")
    use_d = _needs_discriminator(config)

    sums = _Sums()
    w_est = None
    best = (-1.0, None)
    start = time.perf_counter()
    for it in range(1, config.iters + 1):
        try:
            l_d = float("nan")
            if use_d:
                i_s, i_t = next(batches["d_src"]), next(batches["d_tgt"])
                l_d = discriminator_step(model, config, xs_all[i_s], ys_all[i_s], xt_all[i_t], drop)
            i_s, i_t = next(batches["g_src"]), next(batches["g_tgt"])
            vals = generator_step(model, config, xs_all[i_s], ys_all[i_s], xt_all[i_t], drop)
        except TrainingError as e:
            # updates are only applied after their gradients pass the finiteness check
            raise TrainingError(f"iteration {it}: {e}", it, model.copy()) from e
        w = vals["W"]
        if np.isfinite(w):
            w_est = w if w_est is None else config.w_smoothing * w_est + (1.0 - config.w_smoothing) * w
        sums.add(L_C=vals["L_C"], L_D=l_d, L_t=vals["L_t"], L_ent=vals["L_ent"], L_HMM=vals["L_HMM"])
        if it % config.log_interval == 0 or it == config.iters:
            src_acc = evaluate(model, src_val if src_val is not None else src_train).accuracy
            tgt_acc = evaluate(model, target).accuracy if target.has_labels else float("nan")
            wall = (time.perf_counter() - start) * 1000.0 if config.log_wall_time else 0.0
            row = {"iter": it, "L_C": sums.mean("L_C"), "L_D": sums.mean("L_D"), "L_t": sums.mean("L_t"),
                   "L_ent": sums.mean("L_ent"), "L_HMM": sums.mean("L_HMM"),
                   "W_est": w_est if w_est is not None else float("nan"),
                   "src_acc": src_acc, "tgt_acc": tgt_acc, "wall_ms": wall}
            sums = _Sums()
            if sink is not None:
                sink(row)
            if config.select_best and src_acc >= best[0]:
                best = (src_acc, model.copy())
    if config.select_best and best[1] is not None:
        model = best[1]
    return model


# ------------------------------------------------- amortisation vs exact OT

def amortized_objective(t_probs, cost):
    """(1/N) sum_i sum_m T_m(x_i) c_im."""
    return float(np.sum(t_probs * cost) / len(cost))


def compare_amortized_vs_exact(model, features, epsilon=0.1, small_epsilon=1e-3, max_iter=2000,
                               tol=1e-6, gap=0.1, shadow=True, floor=1e-12):
    """Amortised transport of a frozen model against exact and entropic OT on the same costs."""
    if model.nets["D"].spec.n_out != model.num_classes + 1:
        raise ConfigError("binary_discriminator", "comparison needs the multi-class discriminator")
    z = model.latent(features, shadow)
    t = model.nets["T"].run(z, shadow=shadow)[0]
    d = model.nets["D"].run(z, shadow=shadow)[0]
    cost = -clamped_log(d[:, :model.num_classes], floor)
    return compare_plans(t, cost, epsilon, small_epsilon, max_iter, tol, gap)


def compare_plans(t_probs, cost, epsilon=0.1, small_epsilon=1e-3, max_iter=2000, tol=1e-6, gap=0.1):
    n = len(cost)
    amortized = amortized_objective(t_probs, cost)
    exact = free_marginal_optimum(cost, 1.0 / n)
    _, exact_pi = row_argmin_plan(cost, 1.0 / n)
    pi = t_probs.sum(axis=0) / n
    pi = pi / pi.sum()
    marg = Marginals(np.full(n, 1.0 / n), pi)
    sk = sinkhorn(cost, marg, epsilon, max_iter, tol)
    sk_small = sinkhorn(cost, marg, small_epsilon, max_iter, tol)
    # costs of exactly feasible plans, so both are upper bounds on OT at the induced masses
    plan, plan_small = round_to_marginals(sk.plan, marg), round_to_marginals(sk_small.plan, marg)
    agree = np.argmax(t_probs, axis=1) == np.argmin(cost, axis=1)
    srt = np.sort(cost, axis=1)
    clear = (srt[:, 1] - srt[:, 0]) > gap if cost.shape[1] > 1 else np.ones(n, dtype=bool)
    return {
        "n_rows": n,
        "amortized": amortized,
        "exact_free_pi": exact,
        "sinkhorn": transport_cost(plan, cost),
        "sinkhorn_epsilon": epsilon,
        "sinkhorn_iterations": sk.iterations,
        "sinkhorn_violation": sk.violation,
        "sinkhorn_small": transport_cost(plan_small, cost),
        "sinkhorn_small_epsilon": small_epsilon,
        "sinkhorn_small_violation": sk_small.violation,
        "ratio_amortized_exact": amortized / exact if exact > 0 else float("inf"),
        "ratio_amortized_sinkhorn": amortized / transport_cost(plan, cost),
        "argmax_agreement": float(np.mean(agree)),
        "argmax_agreement_clear": float(np.mean(agree[clear])) if clear.any() else float("nan"),
        "n_clear": int(clear.sum()),
        "induced_pi": pi.tolist(),
        "exact_pi": exact_pi.tolist(),
    }


def fixed_cost_instance(n=64, num_classes=4, dim=8, seed=0):
    """Random features (standard normal) and costs (uniform on [0, 1]) for amortisation checks."""
    gen = SeededStream(seed, ("data", "fixed_cost")).generator
    return gen.normal(size=(n, dim)), gen.uniform(size=(n, num_classes))


def amortize_fixed_cost(features, cost, hidden=(64,), lr=1e-2, iters=3000, seed=0, rho=0.998,
                        smoothing=0.3, anneal_fraction=2 / 3, trace_every=0):
    """Fit a transport network to fixed features and costs by minimising the amortised objective.

    Uses the same MLP and Adam machinery as training. A softmax head fed a
    linear objective has vanishing gradients at every vertex, so rows can
    lock onto a wrong column early. To avoid that, ``smoothing * mean_i H(T_i)``
    is subtracted from the objective with a weight that decays linearly to
    zero over the first ``anneal_fraction`` of the iterations; the remaining
    iterations optimise the plain objective. Returns the trained network and,
    if ``trace_every`` > 0, a list of (iteration, plain objective).
    """
    features = np.asarray(features, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    cfg = TrainConfig(seed=seed, lr=lr, polyak_rho=rho)
    spec = nn.MlpSpec([features.shape[1], *hidden, m], "tanh", "softmax")
    net = Net.create(spec, SeededStream(seed, ("nn", "amortize")), cfg)
    anneal = max(1, int(anneal_fraction * iters))
    trace = []
    for it in range(1, iters + 1):
        t, cache = net.run(features)
        if trace_every and (it == 1 or it % trace_every == 0):
            trace.append((it, amortized_objective(t, cost)))
        tau = smoothing * max(0.0, 1.0 - it / anneal)
        g = cost / n
        if tau > 0:
            g = g + tau * (clamped_log(t) + 1.0) / n
        gp, _ = nn.backward(net.params, spec, cache, g)
        nn.adam_polyak_step(net.params, gp, net.adam, net.shadow, lr)
    return net, trace


# ------------------------------------------------------------ persistence

def model_to_dict(model, config=None):
    nets = {}
    for name in model.unique_names():
        net = model.nets[name]
        nets[name] = {
            "spec": net.spec.to_dict(),
            "params": nn.params_to_dict(net.params),
            "adam": nn.adam_to_dict(net.adam),
            "shadow": {"rho": net.shadow.rho, "params": nn.params_to_dict(net.shadow.params)},
        }
    return {
        "format": "cloth-model/1",
        "num_classes": model.num_classes,
        "share_ct": model.shares_ct,
        "networks": nets,
        "config": None if config is None else config.to_dict(),
        "config_hash": None if config is None else config.digest(),
    }


def model_from_dict(d):
    nets = {}
    for name, nd in d["networks"].items():
        nets[name] = Net(
            nn.MlpSpec.from_dict(nd["spec"]),
            nn.params_from_dict(nd["params"]),
            nn.adam_from_dict(nd["adam"]),
            nn.PolyakShadow(nn.params_from_dict(nd["shadow"]["params"]), nd["shadow"]["rho"]),
        )
    if d.get("share_ct"):
        nets["T"] = nets["C"]
    return ClothModel(nets, d["num_classes"])


def save_model(path, model, config=None):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, config), fh)


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
