"""Objective, AdamW, and the training loop."""

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .bundle import bundle_of, save_bundle
from .cmdr import cmdr_loss, decouple
from .data import stack
from .model import Network, NetworkConfig
from .rdr import rdr_loss

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "l_ce_fuse", "l_ce_rgb", "l_ce_t", "l_cmdr", "l_rdr", "l_total")
ENCODER_GROUPS = ("rgb_encoder", "t_encoder")
PROB_FLOOR = 1e-12


class NumericError(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message if checkpoint is None else f"{message}; last good checkpoint: {checkpoint}")
        self.checkpoint = checkpoint


# -- losses -----------------------------------------------------------------------

def _check_labels(label, k):
    label = np.asarray(label)
    bad = (label < 0) | (label >= k)
    if bad.any():
        idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(bad)), label.shape))
        raise ValueError(f"label {int(label[idx])} out of range [0, {k}) at pixel {idx}")
    return label.astype(np.int64)


def cross_entropy(p, label, axis=-3):
    """Mean over pixels of ``-log p[label]`` for probability maps (log floored at 1e-12)."""
    p = T.as_tensor(p)
    label = _check_labels(label, p.shape[axis])
    return T.mul(T.mean(T.log(T.clamp_min(T.pick(p, label, axis), PROB_FLOOR))), -1.0)


def cross_entropy_logits(logits, label, axis=-3):
    """Same loss computed from logits through a stable log-softmax."""
    logits = T.as_tensor(logits)
    label = _check_labels(label, logits.shape[axis])
    return T.mul(T.mean(T.pick(T.log_softmax(logits, axis), label, axis)), -1.0)


@dataclass(frozen=True)
class LossWeights:
    cmdr: float = 0.5
    rdr: float = 1.0
    ce: float = 1.0
    # False trains only the fused head with cross-entropy (fusion-only model).
    unimodal_ce: bool = True


@dataclass
class LossBreakdown:
    l_ce_fuse: float
    l_ce_rgb: float
    l_ce_t: float
    l_cmdr: float
    l_rdr: float
    l_total: float


def total_loss(out, label, weights=LossWeights()):
    """Weighted objective and its per-term breakdown.

    A term whose weight is 0 stays out of the graph entirely (its value is
    still logged for CE, and reported as 0.0 for the regularisers).
    """
    ce_heads = ("fuse", "rgb", "t") if weights.unimodal_ce else ("fuse",)
    ce_vals = {}
    terms = []
    for head in ("fuse", "rgb", "t"):
        if weights.ce != 0 and head in ce_heads:
            term = cross_entropy_logits(out.logits[head], label, axis=1)
            terms.append(T.mul(term, weights.ce))
            ce_vals[head] = term.item()
        else:
            with T.no_grad():
                ce_vals[head] = cross_entropy_logits(out.logits[head], label, axis=1).item()
    l_cmdr = l_rdr = 0.0
    if weights.cmdr != 0:
        targets = decouple(out.dec_feats["fuse"], out.F, out.R, out.T)
        term = cmdr_loss(targets, out.dec_feats["rgb"], out.dec_feats["t"])
        terms.append(T.mul(term, weights.cmdr))
        l_cmdr = term.item()
    if weights.rdr != 0:
        term = rdr_loss(out.p_fuse, out.p_rgb, out.p_t)
        terms.append(T.mul(term, weights.rdr))
        l_rdr = term.item()
    total = terms[0] if terms else T.Tensor(0.0)
    for term in terms[1:]:
        total = T.add(total, term)
    return total, LossBreakdown(ce_vals["fuse"], ce_vals["rgb"], ce_vals["t"], l_cmdr, l_rdr, total.item())


# -- optimiser ------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; one learning rate per parameter group.

    All parameters are repointed at views of one flat buffer, so a step is a
    handful of vector operations. Code that replaces ``p.data`` wholesale
    after construction detaches that parameter from the optimiser.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        # groups: list of (lr, [Tensor, ...])
        self.groups = [(float(lr), list(params)) for lr, params in groups]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.params = [p for _, ps in self.groups for p in ps]
        sizes = [p.data.size for p in self.params]
        self.flat = np.concatenate([p.data.ravel() for p in self.params]) if self.params else np.zeros(0)
        self.lr = np.concatenate([np.full(p.data.size, lr) for lr, ps in self.groups for p in ps]) if self.params else np.zeros(0)
        self._slices = []
        start = 0
        for p, n in zip(self.params, sizes):
            p.data = self.flat[start:start + n].reshape(p.data.shape)
            self._slices.append((start, start + n))
            start += n
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _flat_grad(self):
        g = np.zeros_like(self.flat)
        for p, (a, b) in zip(self.params, self._slices):
            if p.grad is not None:
                g[a:b] = p.grad.ravel()
        return g

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        g = self._flat_grad()
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * g * g
        update = (self.m / c1) / (np.sqrt(self.v / c2) + self.eps)
        self.flat -= self.lr * (update + self.weight_decay * self.flat)


def make_optimizer(net, cfg):
    enc = [t for g, _, t in net.named_parameters() if g in ENCODER_GROUPS]
    rest = [t for g, _, t in net.named_parameters() if g not in ENCODER_GROUPS]
    return AdamW([(cfg.lr_encoder, enc), (cfg.lr_decoder, rest)], cfg.betas, cfg.eps, cfg.weight_decay)


# -- loop ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr_encoder: float = 6e-4
    lr_decoder: float = 3.6e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)


def _finite(bd):
    return all(math.isfinite(v) for v in asdict(bd).values())


def _mean_breakdown(items):
    keys = LOG_FIELDS[1:]
    return {k: float(np.mean([getattr(b, k) for b in items])) for k in keys}


def train(corpus, net_config=None, cfg=None, on_epoch=None, checkpoint_path=None):
    """Train a three-branch network on ``corpus.train``.

    Returns ``(network, rows)`` where ``rows`` holds one dict per epoch with the
    mean loss breakdown. ``on_epoch(row, network)`` is called after each epoch.
    """
    cfg = cfg or TrainConfig()
    net_config = replace(net_config or NetworkConfig(), seed=cfg.seed)
    net = Network(net_config)
    opt = make_optimizer(net, cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    samples = corpus.train
    net_config.check_input(*samples[0].label.shape)
    rows = []
    last_good = None
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(samples))
        parts = []
        for start in range(0, len(order), cfg.batch_size):
            rgb, th, label = stack([samples[i] for i in order[start:start + cfg.batch_size]])
            out = net.forward_full(rgb, th)
            loss, bd = total_loss(out, label, cfg.weights)
            if not _finite(bd):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {start // cfg.batch_size}", last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            parts.append(bd)
        row = {"epoch": epoch, **_mean_breakdown(parts)}
        rows.append(row)
        log.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in row.items() if k != "epoch"})
        if checkpoint_path is not None:
            save_bundle(checkpoint_path, bundle_of(net))
            last_good = os.fspath(checkpoint_path)
        if on_epoch is not None:
            on_epoch(row, net)
    return net, rows


def format_float(x):
    return repr(float(x))


def write_log_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["epoch"]] + [format_float(r[k]) for k in LOG_FIELDS[1:]])
