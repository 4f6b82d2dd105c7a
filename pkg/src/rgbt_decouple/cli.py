"""``rgbt-seg``: generate corpora, train, evaluate, ablate and self-verify.

Every command writes into ``<out-dir>/<run-id>/`` and starts by echoing its
fully resolved flags to ``config.echo`` (JSON). Passing that file back with
``--config`` reproduces the run; flags given explicitly still win.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure, 4 verification failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict

from . import __version__
from .ablation import ABLATION_FIELDS, VARIANTS, ablation_run, robustness_run, summarize, write_ablation_csv
from .bundle import BundleError, bundle_of, load_bundle, network_from_bundle, save_bundle
from .data import CorpusError, CorpusSpec, generate, load_corpus, save_corpus
from .metrics import Condition, evaluate, required_groups
from .model import MissingGroupError, NetworkConfig
from .tensor import ShapeError
from .train import LossWeights, NumericError, TrainConfig, train, write_log_csv
from .verify import SUITES, run_suites

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3, 4
ECHO_NAME = "config.echo"
BUNDLE_NAME = "bundle.rtfd"
EPOCHS_NAME = "epochs.csv"
CONDITIONS = ("rgbt", "rgb", "t")

log = logging.getLogger("rgbt_decouple")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _name_list(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v
    return parse


def _add_run_flags(p, default_id):
    p.add_argument("--out-dir", default="runs", help="parent directory for run folders (default: runs)")
    p.add_argument("--run-id", default=default_id, help=f"run folder name (default: {default_id})")
    p.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
    p.add_argument("--config", help="config.echo of an earlier run; its values become the defaults")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_corpus_flags(p):
    d = CorpusSpec()
    p.add_argument("--n-train", type=int, default=d.n_train, help=f"training samples (default: {d.n_train})")
    p.add_argument("--n-test", type=int, default=d.n_test, help=f"test samples (default: {d.n_test})")
    p.add_argument("--height", type=int, default=d.height, help=f"image height (default: {d.height})")
    p.add_argument("--width", type=int, default=d.width, help=f"image width (default: {d.width})")
    p.add_argument("--classes", type=int, default=d.n_classes, help=f"class count (default: {d.n_classes})")
    p.add_argument("--min-objects", type=int, default=d.min_objects, help=f"(default: {d.min_objects})")
    p.add_argument("--max-objects", type=int, default=d.max_objects, help=f"(default: {d.max_objects})")
    p.add_argument("--noise", type=float, default=d.noise_sigma, help=f"pixel noise sigma (default: {d.noise_sigma})")


def _add_train_flags(p):
    t, w, n = TrainConfig(), LossWeights(), NetworkConfig()
    p.add_argument("--data", required=True, help="corpus file written by gen-data")
    p.add_argument("--epochs", type=_positive(int), default=t.epochs, help=f"(default: {t.epochs})")
    p.add_argument("--batch-size", type=_positive(int), default=t.batch_size, help=f"(default: {t.batch_size})")
    p.add_argument("--lr-encoder", type=float, default=t.lr_encoder, help=f"encoder learning rate (default: {t.lr_encoder:g})")
    p.add_argument("--lr-decoder", type=float, default=t.lr_decoder, help=f"fusion/decoder learning rate (default: {t.lr_decoder:g})")
    p.add_argument("--weight-decay", type=float, default=t.weight_decay, help=f"decoupled weight decay (default: {t.weight_decay:g})")
    p.add_argument("--lambda-cmdr", type=float, default=w.cmdr, help=f"feature decoupling weight (default: {w.cmdr})")
    p.add_argument("--lambda-rdr", type=float, default=w.rdr, help=f"region decoupling weight (default: {w.rdr})")
    p.add_argument("--lambda-ce", type=float, default=w.ce, help=f"cross-entropy weight (default: {w.ce})")
    p.add_argument("--widths", type=_int_list, default=list(n.widths), help="encoder stage widths (default: 8,16,32)")
    p.add_argument("--fusion", choices=("sff", "add"), default=n.fusion, help=f"fusion block (default: {n.fusion})")
    p.add_argument("--limit", type=_positive(int), help="train on the first N training samples only")


def build_parser():
    parser = _Parser(prog="rgbt-seg", description="RGB-thermal segmentation with fusion decoupling.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    _add_run_flags(p, "data")
    _add_corpus_flags(p)
    p.add_argument("--name", default="corpus.rtfc", help="corpus file name inside the run folder")

    p = sub.add_parser("train", help="train a network; writes bundle.rtfd and epochs.csv")
    _add_run_flags(p, "train")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="score a bundle under one input condition")
    _add_run_flags(p, "eval")
    p.add_argument("--data", required=True, help="corpus file")
    p.add_argument("--bundle", required=True, help="bundle.rtfd written by train")
    p.add_argument("--condition", choices=CONDITIONS, default="rgbt", help="rgbt, rgb (thermal missing) or t (RGB missing)")
    p.add_argument("--route", choices=("branch", "zero-fill"), default="branch",
                   help="missing-modality route: unimodal branch or zero-filled fused path")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--workers", type=_positive(int), default=1, help="evaluation threads")

    p = sub.add_parser("ablate", help="train the component variants and tabulate unimodal mIoU")
    _add_run_flags(p, "ablate")
    _add_train_flags(p)
    p.add_argument("--variants", type=_name_list, default=list(VARIANTS), help="comma-separated variant names")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2], help="comma-separated seeds (default: 0,1,2)")
    p.add_argument("--robustness", action="store_true", help="also compare against a fusion-only model")
    p.add_argument("--jobs", type=_positive(int), default=1, help="training processes (results do not depend on it)")

    p = sub.add_parser("verify", help="run the property suites")
    _add_run_flags(p, "verify")
    p.add_argument("--suites", type=_name_list, default=list(SUITES), help="comma-separated suite names")
    p.add_argument("--mutate", action="append", default=[], choices=("sigmoid",),
                   help="test hook: break the named adjoint (the gradient suite should then fail)")
    return parser


# -- config echo ------------------------------------------------------------------------

_NOT_ECHOED = {"config", "verbose"}


def echo_config(args):
    d = {k: v for k, v in vars(args).items() if k not in _NOT_ECHOED}
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def _load_echo(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None


def _config_flag(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv):
    """Parse ``argv``; a ``--config`` echo supplies defaults for its command."""
    parser = build_parser()
    path = _config_flag(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if path is not None and command is not None:
        saved = _load_echo(path)
        if saved.get("command") != command:
            raise UsageError(f"config {path} is for {saved.get('command')!r}, not {command!r}")
        sub = parser._subparsers._group_actions[0].choices[command]
        known = {a.dest for a in sub._actions}
        extra = sorted(set(saved) - known - {"command"})
        if extra:
            raise UsageError(f"config {path} has unknown keys {extra}")
        sub.set_defaults(**{k: v for k, v in saved.items() if k != "command"})
        for a in sub._actions:  # an echoed value satisfies a required flag
            if a.dest in saved:
                a.required = False
    return parser.parse_args(argv)


def _run_dir(args):
    path = os.path.join(args.out_dir, args.run_id)
    try:
        os.makedirs(path, exist_ok=True)
        with open(os.path.join(path, ECHO_NAME), "w") as fh:
            fh.write(echo_config(args))
    except OSError as exc:
        raise DataError(f"cannot write to {path}: {exc.strerror}") from None
    return path


# -- commands ----------------------------------------------------------------------------

def _corpus_spec(args):
    return CorpusSpec(
        n_train=args.n_train, n_test=args.n_test, height=args.height, width=args.width,
        n_classes=args.classes, min_objects=args.min_objects, max_objects=args.max_objects,
        noise_sigma=args.noise, seed=args.seed,
    )


def cmd_gen_data(args, out):
    spec = _corpus_spec(args)
    try:
        spec.validate()
    except CorpusError as exc:
        raise UsageError(str(exc)) from None
    corpus = generate(spec)
    path = os.path.join(out, args.name)
    save_corpus(path, corpus)
    with open(os.path.join(out, "spec.txt"), "w") as fh:
        for k, v in asdict(spec).items():
            fh.write(f"{k}: {v}\n")
    print(f"wrote {path} ({spec.n_train} train / {spec.n_test} test, {spec.height}x{spec.width})")
    return EXIT_OK


def _load_data(path, n_classes=None):
    try:
        return load_corpus(path, expect_classes=n_classes)
    except FileNotFoundError:
        raise DataError(f"corpus file not found: {path}") from None
    except (CorpusError, OSError, ValueError) as exc:
        raise DataError(f"cannot load corpus {path}: {exc}") from None


def _configs(args):
    if not all(w >= 4 for w in args.widths) or len(args.widths) < 2:
        raise UsageError(f"--widths needs >= 2 stages, each >= 4; got {args.widths}")
    weights = LossWeights(cmdr=args.lambda_cmdr, rdr=args.lambda_rdr, ce=args.lambda_ce)
    train_cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr_encoder=args.lr_encoder,
        lr_decoder=args.lr_decoder, weight_decay=args.weight_decay, weights=weights, seed=args.seed,
    )
    net_cfg = NetworkConfig(widths=tuple(args.widths), fusion=args.fusion, seed=args.seed)
    return train_cfg, net_cfg


def _training_corpus(args):
    corpus = _load_data(args.data)
    if args.limit:
        corpus.train = corpus.train[:args.limit]
    h, w = corpus.train[0].label.shape
    try:
        NetworkConfig(widths=tuple(args.widths)).check_input(h, w)
    except ShapeError as exc:
        raise DataError(f"corpus images are incompatible with the network: {exc}") from None
    if corpus.spec.n_classes != NetworkConfig().n_classes:
        raise DataError(f"corpus has {corpus.spec.n_classes} classes; the network head is built for 4")
    return corpus


def cmd_train(args, out):
    train_cfg, net_cfg = _configs(args)
    corpus = _training_corpus(args)
    bundle_path = os.path.join(out, BUNDLE_NAME)
    rows = []

    def on_epoch(row, _net):
        rows.append(row)
        log.info("epoch %d  l_total %.5f", row["epoch"], row["l_total"])

    try:
        net, _ = train(corpus, net_cfg, train_cfg, on_epoch=on_epoch, checkpoint_path=bundle_path)
    finally:
        write_log_csv(os.path.join(out, EPOCHS_NAME), rows)
    save_bundle(bundle_path, bundle_of(net))
    last = rows[-1]
    print(f"trained {train_cfg.epochs} epochs on {len(corpus.train)} samples; final l_total {last['l_total']:.5f}")
    print(f"wrote {bundle_path}")
    return EXIT_OK


def cmd_eval(args, out):
    condition = Condition.parse(args.condition)
    groups = required_groups(condition, args.route)
    try:
        bundle = load_bundle(args.bundle, groups=groups)
        net = network_from_bundle(bundle)
    except FileNotFoundError:
        raise DataError(f"bundle file not found: {args.bundle}") from None
    except (BundleError, MissingGroupError) as exc:
        raise DataError(f"bundle {args.bundle} cannot serve condition {args.condition}: {exc}") from None
    corpus = _load_data(args.data, net.config.n_classes)
    samples = corpus.split(args.split)
    try:
        net.config.check_input(*samples[0].label.shape)
        report = evaluate(net, samples, condition, route=args.route, workers=args.workers)
    except (ShapeError, MissingGroupError) as exc:
        raise DataError(f"condition/bundle mismatch: {exc}") from None
    report.groups_read = tuple(bundle.groups_read)
    tag = args.condition if args.route == "branch" else f"{args.condition}-zerofill"
    report.write_csv(os.path.join(out, f"report-{tag}.csv"))
    text = report.summary()
    with open(os.path.join(out, f"report-{tag}.txt"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args, out):
    train_cfg, net_cfg = _configs(args)
    try:
        variants = [VARIANTS[v] for v in args.variants]
    except KeyError as exc:
        raise UsageError(f"unknown variant {exc.args[0]!r}; choose from {list(VARIANTS)}") from None
    corpus = _training_corpus(args)

    def progress(row):
        log.info("%s seed %d: rgb %.4f thermal %.4f rgbt %.4f", row["variant"], row["seed"],
                 row["rgb_miou"], row["thermal_miou"], row["rgbt_miou"])

    nets = {}
    rows = ablation_run(corpus, [v.name for v in variants], args.seeds, train_cfg, net_cfg, progress, nets, jobs=args.jobs)
    write_ablation_csv(os.path.join(out, "report-ablation.csv"), rows)
    print(f"{'variant':<14} {'rgb mIoU':>9} {'thermal':>9} {'rgbt':>9}")
    for r in summarize(rows):
        print(f"{r['variant']:<14} {100 * r['rgb_miou']:>9.2f} {100 * r['thermal_miou']:>9.2f} {100 * r['rgbt_miou']:>9.2f}")
    if args.robustness:
        full_nets = {seed: net for (name, seed), net in nets.items() if name == "full"}
        rob = robustness_run(corpus, args.seeds, train_cfg, net_cfg, full_nets)
        fields = list(rob[0])
        with open(os.path.join(out, "report-robustness.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fields)
            for r in rob:
                w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in fields])
        full = sum(r["full_gap"] for r in rob) / len(rob)
        fo = sum(r["fusion_only_gap"] for r in rob) / len(rob)
        print(f"robustness gap (fused - worst unimodal): full {100 * full:.2f}, fusion-only {100 * fo:.2f}")
    return EXIT_OK


def cmd_verify(args, out):
    from .verify import format_table
    unknown = [s for s in args.suites if s not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {unknown}; choose from {list(SUITES)}")
    results = run_suites(args.suites, seed=args.seed, mutations=set(args.mutate))
    sys.stdout.write(format_table(results))
    with open(os.path.join(out, "report-verify.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["suite", "status", "checks", "failures"])
        for r in results:
            w.writerow([r.name, "PASS" if r.passed else "FAIL", r.checks, len(r.failures)])
    ok = all(r.passed for r in results)
    print("all suites passed" if ok else "verification FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "verify": cmd_verify,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"rgbt-seg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse: --help, --version, bad flags
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "gen-data":  # validate before creating anything
            try:
                _corpus_spec(args).validate()
            except CorpusError as exc:
                raise UsageError(str(exc)) from None
        out = _run_dir(args)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"rgbt-seg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"rgbt-seg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"rgbt-seg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
