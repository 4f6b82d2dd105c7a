"""Component ablation and missing-modality robustness runs."""

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .bundle import bundle_of, network_from_bundle
from .metrics import Condition, evaluate
from .model import NetworkConfig
from .train import LossWeights, TrainConfig, train


@dataclass(frozen=True)
class Variant:
    name: str
    fusion: str
    cmdr: bool
    rdr: bool

    @property
    def sff(self):
        return self.fusion == "sff"

    def weights(self, base):
        return replace(base, cmdr=base.cmdr if self.cmdr else 0.0, rdr=base.rdr if self.rdr else 0.0)


VARIANTS = {
    v.name: v
    for v in (
        Variant("baseline-add", "add", False, False),
        Variant("+SFF", "sff", False, False),
        Variant("+CMDR", "add", True, False),
        Variant("+RDR", "add", False, True),
        Variant("full", "sff", True, True),
    )
}

ABLATION_FIELDS = ("variant", "sff", "cmdr", "rdr", "seed", "rgb_miou", "thermal_miou", "rgbt_miou")


def resolve_variants(names):
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variant(s) {unknown}; choose from {list(VARIANTS)}")
    return [VARIANTS[n] for n in names]


def train_variant(corpus, variant, seed, train_cfg, net_config):
    cfg = replace(train_cfg, seed=seed, weights=variant.weights(train_cfg.weights))
    return train(corpus, replace(net_config, fusion=variant.fusion), cfg)[0]


def score_variant(net, corpus, variant, seed):
    return {
        "variant": variant.name,
        "sff": int(variant.sff),
        "cmdr": int(variant.cmdr),
        "rdr": int(variant.rdr),
        "seed": seed,
        "rgb_miou": evaluate(net, corpus.test, Condition.RGB_ONLY).miou,
        "thermal_miou": evaluate(net, corpus.test, Condition.T_ONLY).miou,
        "rgbt_miou": evaluate(net, corpus.test, Condition.RGBT).miou,
    }


def run_variant(corpus, variant, seed, train_cfg, net_config):
    return score_variant(train_variant(corpus, variant, seed, train_cfg, net_config), corpus, variant, seed)


_worker_corpus = None


def _init_worker(corpus):
    global _worker_corpus
    _worker_corpus = corpus


def _pool_task(variant, seed, train_cfg, net_config):
    net = train_variant(_worker_corpus, variant, seed, train_cfg, net_config)
    return score_variant(net, _worker_corpus, variant, seed), bundle_of(net)


def ablation_run(corpus, variants, seeds=(0, 1, 2), train_cfg=None, net_config=None, progress=None, nets=None, jobs=1):
    """Train every variant under each seed; one row per (variant, seed).

    When ``nets`` is a dict it collects the trained networks keyed by (variant, seed).
    ``jobs > 1`` trains in worker processes; rows come back in the same order
    and with the same values as a serial run.
    """
    train_cfg = train_cfg or TrainConfig()
    net_config = net_config or NetworkConfig()
    tasks = [(v, s) for v in resolve_variants(variants) for s in seeds]
    rows = []

    def collect(variant, seed, row, net):
        rows.append(row)
        if nets is not None:
            nets[variant.name, seed] = net
        if progress:
            progress(row)

    if jobs <= 1:
        for variant, seed in tasks:
            net = train_variant(corpus, variant, seed, train_cfg, net_config)
            collect(variant, seed, score_variant(net, corpus, variant, seed), net)
        return rows
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(corpus,)) as pool:
        futures = [pool.submit(_pool_task, v, s, train_cfg, net_config) for v, s in tasks]
        for (variant, seed), fut in zip(tasks, futures):
            row, bundle = fut.result()
            collect(variant, seed, row, network_from_bundle(bundle, seed=seed))
    return rows


def summarize(rows):
    """Seed-averaged row per variant, in first-seen order."""
    out = []
    for name in dict.fromkeys(r["variant"] for r in rows):
        group = [r for r in rows if r["variant"] == name]
        first = group[0]
        out.append({
            **{k: first[k] for k in ("variant", "sff", "cmdr", "rdr")},
            "seed": "mean",
            **{k: float(np.mean([r[k] for r in group])) for k in ("rgb_miou", "thermal_miou", "rgbt_miou")},
        })
    return out


def write_ablation_csv(path, rows, include_summary=True):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_FIELDS)
        for r in rows + (summarize(rows) if include_summary else []):
            w.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in ABLATION_FIELDS])


def robustness_gap(report_full, report_rgb, report_t):
    """Fused-condition mIoU minus the worse single-modality mIoU."""
    return report_full.miou - min(report_rgb.miou, report_t.miou)


def robustness_run(corpus, seeds=(0, 1, 2), train_cfg=None, net_config=None, full_nets=None):
    """Gap for the full framework (unimodal branches) vs a fusion-only model
    trained on the fused head alone and fed zero-filled inputs.

    ``full_nets`` maps seed to an already trained full network, which is reused.
    """
    train_cfg = train_cfg or TrainConfig()
    net_config = net_config or NetworkConfig()
    full_nets = full_nets or {}
    rows = []
    for seed in seeds:
        full = full_nets.get(seed)
        if full is None:
            full = train_variant(corpus, VARIANTS["full"], seed, train_cfg, net_config)
        fo_cfg = replace(train_cfg, seed=seed, weights=LossWeights(0.0, 0.0, train_cfg.weights.ce, unimodal_ce=False))
        fusion_only, _ = train(corpus, replace(net_config, fusion="sff"), fo_cfg)
        row = {"seed": seed}
        for tag, net, route in (("full", full, "branch"), ("fusion_only", fusion_only, "zero-fill")):
            r_f = evaluate(net, corpus.test, Condition.RGBT)
            r_r = evaluate(net, corpus.test, Condition.RGB_ONLY, route=route)
            r_t = evaluate(net, corpus.test, Condition.T_ONLY, route=route)
            row[f"{tag}_rgbt"] = r_f.miou
            row[f"{tag}_rgb"] = r_r.miou
            row[f"{tag}_t"] = r_t.miou
            row[f"{tag}_gap"] = robustness_gap(r_f, r_r, r_t)
        rows.append(row)
    return rows
