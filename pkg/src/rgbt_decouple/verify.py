"""Property suites behind ``rgbt-seg verify``.

Each suite compares an implementation path against an independent oracle
(finite differences, scalar loops, brute-force tallies) and returns a
:class:`SuiteResult`. Failures are collected, never raised.
"""

import math
from fractions import Fraction
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cmdr import cmdr_loss, decouple, sign_consistency_gate
from .metrics import confusion_matrix, scores
from .model import GROUPS, Network, NetworkConfig, unimodal_groups
from .rdr import masked_target, onehot_mask, rdr_loss
from .sff import SffParams, exchange_gate, sff_forward
from .train import LossWeights, cross_entropy, cross_entropy_logits, total_loss

FD_STEP = 1e-5
OP_TOL = 1e-6
E2E_TOL = 1e-4
# Entry-wise relative error floors its denominator here, so gradients that are
# exactly zero (or near the finite-difference noise level) compare absolutely.
E2E_FLOOR = 1e-6
# Norm-wise floor for the per-op check; central differences carry ~1e-11 of
# rounding noise, and some inputs (a bias under a spatial softmax) have a
# gradient that is identically zero.
OP_FLOOR = 1e-8


@dataclass
class SuiteResult:
    name: str
    checks: int = 0
    failures: list = field(default_factory=list)
    seconds: float = 0.0
    worst: float = 0.0

    @property
    def passed(self):
        return self.checks > 0 and not self.failures

    def check(self, ok, message):
        self.checks += 1
        if not ok:
            self.failures.append(message)
        return ok


# -- finite differences -------------------------------------------------------------

def numeric_grad(fn, arrays, index, step=FD_STEP):
    """Central difference of scalar ``fn(arrays)`` w.r.t. every entry of ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        keep = flat[j]
        flat[j] = keep + step
        up = fn(arrays)
        flat[j] = keep - step
        down = fn(arrays)
        flat[j] = keep
        gflat[j] = (up - down) / (2 * step)
    return g


def analytic_grads(build, arrays):
    leaves = [T.parameter(a.copy()) for a in arrays]
    out = build(leaves)
    out.backward()
    return [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]


def rel_error(a, n, floor=OP_FLOOR):
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def gradcheck(build, arrays, step=FD_STEP, reference=None):
    """Worst norm-wise relative error between backprop and central differences.

    ``build(list_of_tensors) -> scalar Tensor``. Differences are taken on
    ``reference`` when given (a version of ``build`` with detached operands
    frozen at their starting values, which is what backprop differentiates).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ref = build if reference is None else reference

    def value(arrs):
        with T.no_grad():
            return ref([T.Tensor(a) for a in arrs]).item()

    ana = analytic_grads(build, arrays)
    worst = 0.0
    for i in range(len(arrays)):
        worst = max(worst, rel_error(ana[i], numeric_grad(value, arrays, i, step)))
    return worst


def _project(rng, fn):
    """Scalarise a tensor-valued op against a fixed random cotangent."""
    cache = {}

    def build(ts):
        y = fn(*ts)
        if "r" not in cache:
            cache["r"] = rng.normal(size=y.shape)
        return T.sum_(T.mul(y, T.Tensor(cache["r"])))

    return build


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


def op_cases(rng):
    """``(name, fn, inputs)`` triples covering every differentiable primitive."""
    n = lambda *s: rng.normal(size=s)
    label3 = rng.integers(0, 3, size=(2, 4, 4))
    sff_p = SffParams.init(4, rng)
    # merge.b shifts each attention logit channel uniformly, which a spatial
    # softmax cancels: its gradient is zero and is checked separately.
    sff_names = sorted(k for k in sff_p.tensors if k != "merge.b")

    def sff_case(fr, ft, *ws):
        p = SffParams(4, {**dict(zip(sff_names, ws)), "merge.b": T.Tensor(sff_p["merge.b"].data)})
        return sff_forward(fr, ft, p)[0]

    # Descriptors enter the decoupling only through a piecewise-constant gate,
    # so they are held fixed here.
    F_const, R_const, T_const = n(2, 4), n(2, 4), n(2, 4)

    # The fused operands are detached inside both regularisers, so they enter
    # as constants and only the unimodal operands are differentiated.
    f_fuse = T.Tensor(n(2, 4, 4, 4))
    p_fuse = T.softmax(T.Tensor(n(2, 3, 4, 4)), 1)

    def cmdr_case(fr, ft):
        return cmdr_loss(decouple(f_fuse, T.Tensor(F_const), T.Tensor(R_const), T.Tensor(T_const)), [fr], [ft])

    def rdr_case(a, b):
        return rdr_loss(p_fuse, T.softmax(a, 1), T.softmax(b, 1))

    return [
        ("add", T.add, [n(2, 3, 4, 5), n(2, 3)]),
        ("sub", T.sub, [n(2, 3, 4), n(2, 3, 1)]),
        ("mul", T.mul, [n(2, 3, 4, 5), n(2, 3)]),
        ("scalar_mul", lambda x: T.scalar_mul(x, -1.7), [n(3, 4)]),
        ("sigmoid", T.sigmoid, [3 * n(3, 4)]),
        ("relu", T.relu, [_away_from_zero(rng, (3, 4))]),
        ("exp", T.exp, [n(3, 4)]),
        ("log", T.log, [rng.uniform(0.2, 2.0, size=(3, 4))]),
        ("abs", T.abs_, [_away_from_zero(rng, (3, 4))]),
        ("square", T.square, [n(3, 4)]),
        ("sum", lambda x: T.sum_(x, axis=1), [n(2, 3, 4)]),
        ("mean", lambda x: T.mean(x, axis=(0, 2)), [n(2, 3, 4)]),
        ("reshape", lambda x: T.reshape(x, (4, 6)), [n(2, 3, 4)]),
        ("transpose", lambda x: T.transpose(x, (2, 0, 1)), [n(2, 3, 4)]),
        ("matmul", T.matmul, [n(3, 4), n(4, 5)]),
        ("softmax", lambda x: T.softmax(x, 1), [n(2, 3, 4, 4)]),
        ("softmax_spatial", lambda x: T.softmax(x, "spatial"), [n(2, 3, 4, 4)]),
        ("log_softmax", lambda x: T.log_softmax(x, 1), [n(2, 3, 4, 4)]),
        ("global_avg_pool", T.global_avg_pool, [n(2, 3, 4, 4)]),
        ("global_max_pool", T.global_max_pool, [n(2, 3, 4, 4)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [n(2, 2, 3, 3), n(2, 3, 3, 3)]),
        ("slice_channels", lambda x: T.slice_channels(x, 1, 3), [n(2, 4, 3, 3)]),
        ("channel_mul", T.channel_mul, [n(2, 3), n(2, 3, 4, 4)]),
        ("conv3x3", lambda x, w, b: T.conv3x3(x, w, b, 1), [n(2, 3, 5, 5), n(4, 3, 3, 3), n(4)]),
        ("conv3x3_stride2", lambda x, w, b: T.conv3x3(x, w, b, 2), [n(2, 3, 6, 6), n(4, 3, 3, 3), n(4)]),
        ("conv1x1", T.conv1x1, [n(2, 3, 4, 4), n(3, 5), n(1, 5)]),
        ("upsample2x", T.upsample2x, [n(2, 3, 3, 3)]),
        ("pixel_shuffle2x", T.pixel_shuffle2x, [n(2, 8, 3, 3)]),
        ("pick", lambda x: T.pick(x, label3, 1), [n(2, 3, 4, 4)]),
        ("clamp_min", lambda x: T.clamp_min(x, 0.0), [_away_from_zero(rng, (3, 4))]),
        ("cross_entropy", lambda x: cross_entropy(T.softmax(x, 1), label3, axis=1), [n(2, 3, 4, 4)]),
        ("cross_entropy_logits", lambda x: cross_entropy_logits(x, label3, axis=1), [n(2, 3, 4, 4)]),
        ("sff_block", sff_case, [n(2, 4, 4, 4), n(2, 4, 4, 4)] + [sff_p[k].data.copy() for k in sff_names]),
        ("cmdr_loss", cmdr_case, [n(2, 4, 4, 4), n(2, 4, 4, 4)]),
        ("rdr_loss", rdr_case, [n(2, 3, 4, 4), n(2, 3, 4, 4)]),
    ]


_SCALAR_OPS = {"cross_entropy", "cross_entropy_logits", "cmdr_loss", "rdr_loss"}


def suite_op_gradients(seed=0):
    res = SuiteResult("op-gradients")
    rng = np.random.default_rng(seed)
    for name, fn, inputs in op_cases(rng):
        build = (lambda ts, fn=fn: fn(*ts)) if name in _SCALAR_OPS else _project(rng, fn)
        err = gradcheck(build, inputs)
        res.worst = max(res.worst, err)
        res.check(err < OP_TOL, f"{name}: rel-err {err:.3g} >= {OP_TOL:g}")
    # merge.b of the fusion block receives (numerically) nothing.
    p = SffParams.init(4, rng)
    f1, f2 = T.Tensor(rng.normal(size=(2, 4, 4, 4))), T.Tensor(rng.normal(size=(2, 4, 4, 4)))
    T.sum_(T.mul(sff_forward(f1, f2, p)[0], T.Tensor(rng.normal(size=(2, 4, 4, 4))))).backward()
    gb = float(np.abs(p["merge.b"].grad).max())
    res.check(gb < 1e-12, f"merge.b gradient {gb:.3g} should vanish under the spatial softmax")
    # stop_gradient: y = sg(a) * b + a differentiates as y = a0 * b + a.
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    r = rng.normal(size=(3, 4))
    sg = lambda ts: T.sum_(T.mul(T.add(T.mul(T.stop_gradient(ts[0]), ts[1]), ts[0]), T.Tensor(r)))
    frozen = lambda ts: T.sum_(T.mul(T.add(T.mul(T.Tensor(a0), ts[1]), ts[0]), T.Tensor(r)))
    err = gradcheck(sg, [a0, b0], reference=frozen)
    res.worst = max(res.worst, err)
    res.check(err < OP_TOL, f"stop_gradient: rel-err {err:.3g} >= {OP_TOL:g}")
    return res


def e2e_setup(seed=0):
    cfg = NetworkConfig(n_classes=2, seed=seed)
    rng = np.random.default_rng([seed, 7])
    net = Network(cfg)
    rgb = rng.uniform(size=(2, 3, 8, 8))
    th = rng.uniform(size=(2, 1, 8, 8))
    label = rng.integers(0, 2, size=(2, 8, 8))
    return net, rgb, th, label


def suite_e2e_gradient(seed=0, n_params=10, weights=LossWeights()):
    """Backprop through the whole objective vs central differences on sampled entries."""
    res = SuiteResult("e2e-gradient")
    net, rgb, th, label = e2e_setup(seed)
    loss, _ = total_loss(net.forward_full(rgb, th), label, weights)
    loss.backward()
    entries = [(g, n, j) for g, n, t in net.named_parameters() for j in range(t.data.size)]
    rng = np.random.default_rng([seed, 8])
    picks = rng.choice(len(entries), size=n_params, replace=False)

    def value():
        with T.no_grad():
            return total_loss(net.forward_full(rgb, th), label, weights)[0].item()

    for k in sorted(picks):
        g, n, j = entries[k]
        t = net.params[g][n]
        a = 0.0 if t.grad is None else float(t.grad.reshape(-1)[j])
        flat = t.data.reshape(-1)
        keep = flat[j]
        flat[j] = keep + FD_STEP
        up = value()
        flat[j] = keep - FD_STEP
        down = value()
        flat[j] = keep
        num = (up - down) / (2 * FD_STEP)
        err = abs(a - num) / max(abs(a), abs(num), E2E_FLOOR)
        res.worst = max(res.worst, err)
        res.check(err < E2E_TOL, f"{g}/{n}[{j}]: analytic {a:.6g} vs numeric {num:.6g} (rel-err {err:.3g})")
    return res


# -- gates and masks ------------------------------------------------------------------

def scalar_exchange_gate(r, t):
    """``1 - 1/(1+exp(-t*r))`` one entry at a time with the math module."""
    def sig(z):
        if z >= 0:
            return 1.0 / (1.0 + math.exp(-z))
        e = math.exp(z)
        return e / (1.0 + e)

    out = np.empty(len(r))
    for i in range(len(r)):
        out[i] = 1.0 - sig(float(t[i]) * float(r[i]))
    return out


def brute_sign_gate(f, x):
    return np.array([1.0 if float(a) * float(b) > 0 else 0.0 for a, b in zip(f, x)])


def suite_gates(seed=0, n_pairs=1000):
    res = SuiteResult("gate-oracles")
    rng = np.random.default_rng([seed, 3])
    for _ in range(20):
        c = int(rng.integers(1, 64))
        r, t = rng.normal(0, 3, c), rng.normal(0, 3, c)
        got = exchange_gate(T.Tensor(r), T.Tensor(t)).data
        err = float(np.max(np.abs(got - scalar_exchange_gate(r, t))))
        res.worst = max(res.worst, err)
        res.check(err <= 1e-12, f"exchange gate off by {err:.3g} (C={c})")
    for i in range(n_pairs):
        c = int(rng.integers(1, 16))
        f, x = rng.normal(size=c), rng.normal(size=c)
        f[rng.random(c) < 0.2] = 0.0
        x[rng.random(c) < 0.2] = 0.0
        if i % 10 == 0:
            f[0] = x[0] = 0.0
        ok = np.array_equal(sign_consistency_gate(T.Tensor(f), T.Tensor(x)), brute_sign_gate(f, x))
        res.check(ok, f"sign gate mismatch on pair {i}")
    return res


def brute_argmax_onehot(p):
    """``[K,H,W]`` one-hot by scanning classes in order and keeping strictly larger values."""
    k, h, w = p.shape
    out = np.zeros_like(p)
    for i in range(h):
        for j in range(w):
            best = 0
            for c in range(1, k):
                if p[c, i, j] > p[best, i, j]:
                    best = c
            out[best, i, j] = 1.0
    return out


def random_prob_map(rng, k, h, w, levels=4):
    """Coarsely quantised probabilities, so ties show up often."""
    q = rng.integers(1, levels + 1, size=(k, h, w)).astype(np.float64)
    q[:, 0, 0] = 1.0  # an all-tied pixel
    return q / q.sum(axis=0, keepdims=True)


def suite_rdr_mask(seed=0, n_maps=100):
    res = SuiteResult("rdr-mask")
    rng = np.random.default_rng([seed, 4])
    for i in range(n_maps):
        k = int(rng.integers(2, 6))
        p = random_prob_map(rng, k, int(rng.integers(1, 7)), int(rng.integers(1, 7)))
        m = onehot_mask(T.Tensor(p))
        res.check(np.array_equal(m, brute_argmax_onehot(p)), f"mask mismatch on map {i}")
        nz = (masked_target(T.Tensor(p)).data != 0).sum(axis=0)
        res.check(int(nz.max()) <= 1, f"masked target has {int(nz.max())} nonzeros at a pixel (map {i})")
    return res


# -- metrics --------------------------------------------------------------------------

def tally_scores(label, pred, k):
    """IoU/recall per class from plain per-pixel counting (no confusion matrix)."""
    tp, fp, fn, ref = [0] * k, [0] * k, [0] * k, [0] * k
    for a, b in zip(np.asarray(label).ravel().tolist(), np.asarray(pred).ravel().tolist()):
        ref[a] += 1
        if a == b:
            tp[a] += 1
        else:
            fn[a] += 1
            fp[b] += 1
    ious = [Fraction(tp[c], tp[c] + fp[c] + fn[c]) for c in range(k) if tp[c] + fp[c] + fn[c] > 0]
    accs = [Fraction(tp[c], ref[c]) for c in range(k) if ref[c] > 0]
    return float(sum(ious) / len(ious)), float(sum(accs) / len(accs))


def suite_metrics(seed=0, n_pairs=20):
    res = SuiteResult("metric-oracle")
    cm = confusion_matrix(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2)
    iou, _, miou, _ = scores(cm)
    res.check(iou[0] == 0.5 and iou[1] == 2 / 3 and miou == 7 / 12, f"hand case IoU {iou}, mIoU {miou}")
    rng = np.random.default_rng([seed, 5])
    for i in range(n_pairs):
        k = int(rng.integers(2, 7))
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        label = rng.integers(0, k, size=shape)
        pred = rng.integers(0, k, size=shape)
        _, _, miou, macc = scores(confusion_matrix(label, pred, k))
        o_miou, o_macc = tally_scores(label, pred, k)
        res.check(miou == o_miou and macc == o_macc, f"pair {i}: ({miou}, {macc}) vs tally ({o_miou}, {o_macc})")
    return res


# -- structural properties -----------------------------------------------------------

def _grad_is_zero(t):
    return t.grad is None or not np.any(t.grad)


def _nodes(root):
    return {id(t) for t in T._toposort(root)}


def suite_stop_gradient(seed=0):
    """With the CE weight at zero, the regularisers must leave every fused-path
    parameter at exactly 0.0 and must not reach the encoders through the fused path."""
    res = SuiteResult("stop-gradient")
    cfg = NetworkConfig(seed=seed)
    rng = np.random.default_rng([seed, 6])
    net = Network(cfg)
    rgb = rng.uniform(size=(2, 3, 16, 16))
    th = rng.uniform(size=(2, 1, 16, 16))
    label = rng.integers(0, cfg.n_classes, size=(2, 16, 16))
    out = net.forward_full(rgb, th)
    loss, _ = total_loss(out, label, LossWeights(cmdr=0.5, rdr=1.0, ce=0.0))
    loss.backward()
    for g in ("sff", "fused_decoder"):
        for name, t in net.params[g].items():
            res.check(_grad_is_zero(t), f"{g}/{name} has nonzero gradient")
    reach = _nodes(loss)
    fused = [out.p_fuse, out.logits["fuse"]] + out.fused_skips + out.dec_feats["fuse"]
    fused += [d.values for d in out.F + out.R + out.T]
    res.check(not any(id(t) in reach for t in fused), "a fused-path node is reachable from the regulariser loss")
    for g in ("rgb_decoder", "t_decoder"):
        res.check(any(t.grad is not None and np.any(t.grad) for t in net.params[g].values()), f"{g} received no gradient")

    # Same objective rebuilt from the unimodal branches alone, with the fused
    # quantities entering as constants: encoder gradients must match bit for bit.
    enc_grads = {g: {n: t.grad.copy() for n, t in net.params[g].items()} for g in ("rgb_encoder", "t_encoder")}
    net.zero_grad()
    feats, probs = {}, {}
    for m, x in (("rgb", rgb), ("t", th)):
        enc_g, dec_g = unimodal_groups(m)
        f, logits = net.decode(net.encode(T.Tensor(x), net.params[enc_g]), net.params[dec_g])
        feats[m], probs[m] = f, T.softmax(logits, axis=1)
    const = lambda ts: [T.Tensor(t.data) for t in ts]
    targets = decouple(const(out.dec_feats["fuse"]), const(d.values for d in out.F),
                       const(d.values for d in out.R), const(d.values for d in out.T))
    alt = T.add(T.mul(cmdr_loss(targets, feats["rgb"], feats["t"]), 0.5),
                T.mul(rdr_loss(T.Tensor(out.p_fuse.data), probs["rgb"], probs["t"]), 1.0))
    res.check(alt.item() == loss.item(), f"rebuilt loss {alt.item()!r} differs from {loss.item()!r}")
    alt.backward()
    for g, grads in enc_grads.items():
        for name, ref in grads.items():
            res.check(np.array_equal(net.params[g][name].grad, ref), f"{g}/{name}: fused path leaks into encoder gradient")
    return res


def suite_separability(seed=0):
    res = SuiteResult("separability")
    cfg = NetworkConfig(seed=seed)
    rng = np.random.default_rng([seed, 9])
    net = Network(cfg)
    rgb = rng.uniform(size=(3, 3, 16, 16))
    th = rng.uniform(size=(3, 1, 16, 16))
    with T.no_grad():
        full = net.forward_full(rgb, th)
        for m, x, p_full in (("rgb", rgb, full.p_rgb), ("t", th, full.p_t)):
            p = net.forward_unimodal(x, m).data
            res.check(np.array_equal(p, p_full.data), f"{m}: unimodal output differs from the full-forward branch")
            keep = unimodal_groups(m)
            perturbed = {}
            for g, grp in net.params.items():
                if g in keep:
                    perturbed[g] = grp
                else:
                    perturbed[g] = {n: T.Tensor(t.data + rng.normal(0, 10, t.shape)) for n, t in grp.items()}
            res.check(np.array_equal(net.forward_unimodal(x, m, params=perturbed).data, p),
                      f"{m}: output moved under perturbation of other groups")
            only = {g: net.params[g] for g in keep}
            res.check(np.array_equal(net.forward_unimodal(x, m, params=only).data, p),
                      f"{m}: output differs when only {keep} are loaded")
    res.check(set(GROUPS) == set(net.params), "network is missing a parameter group")
    return res


SUITES = {
    "op-gradients": suite_op_gradients,
    "e2e-gradient": suite_e2e_gradient,
    "gate-oracles": suite_gates,
    "rdr-mask": suite_rdr_mask,
    "metric-oracle": suite_metrics,
    "stop-gradient": suite_stop_gradient,
    "separability": suite_separability,
}


def run_suites(names=None, seed=0, mutations=()):
    """Run the named suites (all by default) with optional adjoint mutations active."""
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {list(SUITES)}")
    saved = set(T.MUTATIONS)
    T.MUTATIONS.update(mutations)
    results = []
    try:
        for name in names:
            t0 = time.perf_counter()
            try:
                r = SUITES[name](seed=seed)
            except Exception as exc:  # a crashing suite is a failing suite
                r = SuiteResult(name)
                r.check(False, f"raised {type(exc).__name__}: {exc}")
            r.seconds = time.perf_counter() - t0
            results.append(r)
    finally:
        T.MUTATIONS.clear()
        T.MUTATIONS.update(saved)
    return results


def format_table(results):
    lines = [f"{'suite':<16} {'status':<6} {'checks':>6} {'worst':>10} {'time':>7}"]
    for r in results:
        lines.append(f"{r.name:<16} {'PASS' if r.passed else 'FAIL':<6} {r.checks:>6} {r.worst:>10.3g} {r.seconds:>6.1f}s")
        for msg in r.failures[:5]:
            lines.append(f"    - {msg}")
        if len(r.failures) > 5:
            lines.append(f"    ... {len(r.failures) - 5} more")
    return "\n".join(lines) + "\n"
