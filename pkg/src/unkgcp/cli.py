"""``unkgcp`` command line: ingest, train, calibrate, predict, evaluate and
the verification subcommands.

Defaults may come from ``--config FILE`` (a flat JSON object keyed by option
name); explicit command-line flags win. Relative output paths are resolved
against ``$UNKGCP_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import FpiPredictor, fpi_fit
from .conformal import ABSOLUTE, ENTROPY, ConformalPredictor, Measure, calibrate, intervals_from_predictions, \
    load_artifact, save_artifact
from .dataset import PRESETS, Identity, MinMaxTo, encode, load_split, normalize_scores, parse_tsv, save_split, \
    scheme_from_dict, split
from .errors import ConfigError, InvariantError, UnkgcpError
from .evaluation import BACKBONES, BIN_COLUMNS, CALIB_COLUMNS, DEFAULT_ALPHAS, REPORT_COLUMNS, ExperimentConfig, \
    backbone_config, calib_size_sweep, confidence_sweep, emit_report, negative_test_set, point_metrics, \
    predictor_bins, run_trials, shift_detect, train_backbone
from .seeding import derive_seed
from .testbed import generate_planted, monte_carlo_validity
from .unkge.model import load_checkpoint, predict, save_checkpoint
from .unkge.objectives import Pinball
from .unkge.train import TrainConfig, fit

OUTPUT_ROOT_ENV = "UNKGCP_OUTPUT_ROOT"
DEFAULT_MC_CASES = ("9:0.9", "99:0.9", "99:0.8", "10:0.9")

log = logging.getLogger("unkgcp")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1, like every other user error."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _Extend(argparse.Action):
    """Repeatable option whose command-line values replace a configured default.

    Config defaults arrive as tuples; the first command-line use starts a fresh list.
    """

    def __call__(self, parser, namespace, values, option_string=None):
        items = getattr(namespace, self.dest, None)
        items = [] if items is None or isinstance(items, tuple) else items
        setattr(namespace, self.dest, [*items, values])


# --------------------------------------------------------------------------
# helpers


def _out_path(p: str | os.PathLike) -> Path:
    path = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _write_bytes(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _scheme(name: str):
    if name == "identity":
        return Identity()
    if name in PRESETS:
        return PRESETS[name]
    if name.startswith("minmax:"):
        lo, hi = _floats(name.split(":", 1)[1])
        return MinMaxTo(lo, hi)
    raise ConfigError(f"unknown normalization scheme {name!r}")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr, dim=args.dim, batch_size=args.batch_size, neg_per_pos=args.neg_per_pos,
        patience=args.patience, max_epochs=args.max_epochs, optimizer=args.optimizer,
        neg_weight=args.neg_weight, seed=derive_seed(args.seed, "train"), early_stop=args.early_stop,
    )


def _load_predictor_inputs(args):
    model = load_checkpoint(args.checkpoint)
    artifact = load_artifact(args.artifact, expected_fingerprint=model.fingerprint())
    return model, artifact


# --------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise ConfigError(f"input file {path} does not exist")
    scheme = _scheme(args.scheme)
    raw = normalize_scores(parse_tsv(path.read_bytes()), scheme)
    vocab, triples = encode(raw)
    seed = derive_seed(args.seed, "split")
    data = split(triples, args.ratios, seed, vocab=vocab)
    out = save_split(_out_path(args.out), data, scheme, extra={"source": path.name})
    print(f"wrote {out}: train={len(data.train)} cal={len(data.cal)} test={len(data.test)} "
          f"entities={data.n_entities} relations={data.n_relations}")
    return 0


def cmd_train(args) -> int:
    data, _ = load_split(args.data)
    cfg = backbone_config(args.backbone, _train_config(args))
    if args.objective == "pinball":
        if args.tau is None:
            raise ConfigError("--objective pinball requires --tau")
        if args.backbone == "passleaf":
            raise ConfigError("the pinball objective is not available for the passleaf backbone")
        result = fit(data, cfg, Pinball(args.tau))
    else:
        result = train_backbone(data, args.backbone, cfg)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fp = save_checkpoint(out, result.params)
    curve = _out_path(args.curve) if args.curve else out.with_suffix(".curve.csv")
    _write_bytes(curve, emit_report(result.history, "csv", ("epoch", "train_loss", "val_criterion")))
    print(f"wrote {out} (best epoch {result.best_epoch}, fingerprint {fp[:12]})")
    return 0


def cmd_calibrate(args) -> int:
    data, _ = load_split(args.data)
    model = load_checkpoint(args.checkpoint)
    measure = Measure.parse(args.measure, args.delta)
    artifact = calibrate(model, data.cal, measure)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_artifact(out, artifact)
    print(f"wrote {out}: measure={measure.kind.value} size={artifact.size}")
    return 0


def _read_queries(args, vocab):
    if args.ids and not args.triple:
        try:
            idx = np.loadtxt(args.queries, dtype=np.int64, delimiter="\t", usecols=(0, 1, 2), ndmin=2)
        except ValueError:
            raise ConfigError("--ids requires at least 3 integer tab-separated fields per line") from None
        return idx.tolist(), idx
    if args.triple:
        rows = [args.triple]
    else:
        text = Path(args.queries).read_text(encoding="utf-8")
        rows = [line.split("\t")[:3] for line in text.splitlines() if line.strip()]
        if any(len(r) != 3 for r in rows):
            raise ConfigError("query lines need at least 3 tab-separated fields")
    if args.ids:
        try:
            return rows, np.array(rows, dtype=np.int64).reshape(-1, 3)
        except ValueError:
            raise ConfigError("--ids requires integer query fields") from None
    if vocab is None:
        raise ConfigError("label queries need --data for the vocabulary (or pass --ids)")
    ent, rel = vocab.entities, vocab.relations
    try:
        idx = np.array([(ent[h], rel[r], ent[t]) for h, r, t in rows], dtype=np.int64).reshape(-1, 3)
    except KeyError as exc:
        raise ConfigError(f"label {exc.args[0]!r} is not in the vocabulary") from None
    return rows, idx


def cmd_predict(args) -> int:
    model, artifact = _load_predictor_inputs(args)
    vocab = load_split(args.data)[0].vocab if args.data else None
    labels, idx = _read_queries(args, vocab)
    if len(idx) and (idx.min() < 0 or idx[:, [0, 2]].max() >= model.n_entities or idx[:, 1].max() >= model.n_relations):
        raise ConfigError("query index outside the model's vocabulary")
    point = predict(model, idx[:, 0], idx[:, 1], idx[:, 2])
    lo, hi = intervals_from_predictions(point, artifact, args.alpha)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("h", "r", "t", "point", "lower", "upper"))
    rows = zip(labels, point.tolist(), lo.tolist(), hi.tolist())
    writer.writerows((h, r, t, "%.6g" % p, "%.6g" % a, "%.6g" % b) for (h, r, t), p, a, b in rows)
    if args.out:
        _write_bytes(_out_path(args.out), buf.getvalue().encode("utf-8"))
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def _experiment(args, alphas) -> ExperimentConfig:
    return ExperimentConfig(
        backbone=args.backbone, train=_train_config(args), alphas=tuple(alphas), trials=args.trials,
        master_seed=args.seed, dataset_name=args.dataset_name or Path(args.data).name,
        include_qr=args.qr, n_bins=args.n_bins, shift_tol=args.shift_tol,
    )


def _fixed_model_reports(args, data, alphas):
    """Evaluate an existing checkpoint (no retraining) on the stored split."""
    model = load_checkpoint(args.checkpoint)
    fp = model.fingerprint()
    preds = [ConformalPredictor(model, calibrate(model, data.cal, ENTROPY, fp), verify=False),
             ConformalPredictor(model, calibrate(model, data.cal, ABSOLUTE, fp), verify=False),
             FpiPredictor(fpi_fit(data.cal))]
    meta = dict(backbone=args.backbone, dataset=args.dataset_name or Path(args.data).name,
                trial=0, trial_seed=data.split_seed)
    neg = negative_test_set(data, derive_seed(args.seed, "test-negatives", 0))
    a_bins = 0.9 if 0.9 in alphas else alphas[-1]
    bins = {p.name: predictor_bins(p, data.test, a_bins, args.n_bins) for p in preds[:2]}
    return ([point_metrics(predict(model, data.test), data.test.c)], confidence_sweep(preds, data.test, alphas, **meta),
            confidence_sweep(preds, neg, alphas, **meta), bins)


def _run_evaluation(args, alphas) -> int:
    data, _ = load_split(args.data)
    alphas = sorted(alphas)
    if args.checkpoint:
        metrics, pos, neg, bins = _fixed_model_reports(args, data, alphas)
    else:
        outcomes = run_trials(_experiment(args, alphas), data)
        metrics = [o.point for o in outcomes]
        pos = [r for o in outcomes for r in o.positive]
        neg = [r for o in outcomes for r in o.negative]
        bins = outcomes[0].bins
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "reports.csv").write_bytes(emit_report(pos, "csv", REPORT_COLUMNS))
    (out / "reports_negative.csv").write_bytes(emit_report(neg, "csv", REPORT_COLUMNS))
    for name, b in bins.items():
        fname = "bins.csv" if name == "UnKGCP" else f"bins_{name.lower()}.csv"
        (out / fname).write_bytes(emit_report(b.rows(), "csv", BIN_COLUMNS))
    rows = [{"trial": i, **m} for i, m in enumerate(metrics)]
    (out / "model_error.csv").write_bytes(emit_report(rows, "csv", ("trial", "mse", "mae")))
    shift_rows = []
    for part, reports in (("positive", pos), ("negative", neg)):
        for r in reports:
            s = shift_detect(r, args.shift_tol)
            shift_rows.append({"predictor": r.predictor_id, "alpha": r.alpha, "trial": r.trial,
                               "test_set": part, "gap": s.gap, "flagged": int(s.flagged)})
    (out / "shift.csv").write_bytes(
        emit_report(shift_rows, "csv", ("predictor", "alpha", "trial", "test_set", "gap", "flagged")))
    sys.stdout.write(emit_report(pos, "csv", REPORT_COLUMNS).decode("utf-8"))
    return 0


def cmd_evaluate(args) -> int:
    return _run_evaluation(args, args.alphas)


def cmd_sweep_alpha(args) -> int:
    return _run_evaluation(args, args.alphas)


def cmd_sweep_calib(args) -> int:
    data, _ = load_split(args.data)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = train_backbone(data, args.backbone, backbone_config(args.backbone, _train_config(args))).params
    rows = calib_size_sweep(model, data.cal, data.test, Measure.parse(args.measure), args.alpha,
                            args.start, args.repeats, derive_seed(args.seed, "sweeps"))
    blob = emit_report(rows, "csv", CALIB_COLUMNS)
    _write_bytes(_out_path(args.out) / "calib_sweep.csv", blob)
    sys.stdout.write(blob.decode("utf-8"))
    return 0


def cmd_mc_validate(args) -> int:
    cases = []
    for spec in args.case or DEFAULT_MC_CASES:
        try:
            ell_s, alpha_s = spec.split(":")
            cases.append((int(ell_s), float(alpha_s)))
        except ValueError:
            raise ConfigError(f"--case expects ELL:ALPHA, got {spec!r}") from None
    failures = 0
    print("ell,alpha,exact,empirical,lower_bound,upper_bound,status")
    for i, (ell, alpha) in enumerate(cases):
        res = monte_carlo_validity(ell, alpha, args.trials, args.dist, derive_seed(args.seed, "mc", i), args.workers)
        ok = res.exact_in_band and abs(res.coverage - res.exact) <= args.tol
        failures += not ok
        print(f"{ell},{alpha:g},{res.exact:.6g},{res.coverage:.6g},{alpha:g},{res.upper_bound:.6g},"
              f"{'PASS' if ok else 'FAIL'}")
    if failures:
        raise InvariantError(f"{failures} Monte Carlo case(s) outside the validity band")
    return 0


def cmd_gen_planted(args) -> int:
    world, triples = generate_planted(args.entities, args.relations, args.dim, args.triples, args.sigma,
                                      args.heteroscedastic, derive_seed(args.seed, "planted"), args.scale, args.rank)
    lines = [f"e{h}\tr{r}\te{t}\t{c!r}\n" for h, r, t, c in
             zip(triples.h.tolist(), triples.r.tolist(), triples.t.tolist(), triples.c.tolist())]
    _write_bytes(_out_path(args.out), "".join(lines).encode("utf-8"))
    print(f"wrote {len(lines)} planted triples to {_out_path(args.out)}")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_train_options(p) -> None:
    d = TrainConfig()
    p.add_argument("--backbone", choices=BACKBONES, default="ukge-logi")
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--dim", type=int, default=d.dim)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--neg-per-pos", type=int, default=d.neg_per_pos)
    p.add_argument("--patience", type=int, default=d.patience)
    p.add_argument("--max-epochs", type=int, default=d.max_epochs)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=d.optimizer)
    p.add_argument("--neg-weight", type=float, default=d.neg_weight)
    p.add_argument("--early-stop", choices=("pos-neg", "pos"), default=d.early_stop)


def _add_eval_options(p, alphas) -> None:
    p.add_argument("--data", required=True, help="ingested dataset directory")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--checkpoint", help="evaluate this checkpoint instead of training per trial")
    p.add_argument("--alphas", type=_floats, default=alphas)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--qr", action="store_true", help="also train the quantile-regression baseline")
    p.add_argument("--n-bins", type=int, default=30)
    p.add_argument("--shift-tol", type=float, default=0.05)
    p.add_argument("--dataset-name", default="")
    _add_train_options(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unkgcp", description="Conformal prediction intervals for uncertain KG embeddings.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=0, help="master seed for every random stream")
    parser.add_argument("--config", help="JSON file of option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse, normalise, encode and split a TSV file")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", default="identity", help="identity, cn15k, nl27k, ppi5k or minmax:LO,HI")
    p.add_argument("--ratios", type=_floats, default=(0.85, 0.07, 0.08))
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a backbone and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", help="training-curve CSV (default: next to the checkpoint)")
    p.add_argument("--objective", choices=("mse", "pinball"), default="mse")
    p.add_argument("--tau", type=float)
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="compute a calibration artifact")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--measure", choices=("entropy", "absolute", "unkgcp", "cp", "abs"), default="entropy")
    p.add_argument("--delta", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help="emit prediction intervals as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--data", help="dataset directory (vocabulary for label queries)")
    q = p.add_mutually_exclusive_group(required=True)
    q.add_argument("--triple", nargs=3, metavar=("HEAD", "REL", "TAIL"))
    q.add_argument("--queries", help="TSV file of head, relation, tail")
    p.add_argument("--ids", action="store_true", help="queries are integer ids, not labels")
    p.add_argument("--out", help="write CSV here instead of standard output")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="coverage/sharpness over trials")
    _add_eval_options(p, (0.9,))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-alpha", help="confidence-level sweep")
    _add_eval_options(p, DEFAULT_ALPHAS)
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("sweep-calib", help="calibration-size sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--measure", choices=("entropy", "absolute", "unkgcp", "cp", "abs"), default="entropy")
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--start", type=int, default=10)
    p.add_argument("--repeats", type=int, default=10)
    _add_train_options(p)
    p.set_defaults(func=cmd_sweep_calib)

    p = sub.add_parser("mc-validate", help="Monte Carlo check of finite-sample validity")
    p.add_argument("--case", action=_Extend, help="ELL:ALPHA (repeatable)")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--dist", choices=("uniform", "exponential", "bimodal"), default="uniform")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--tol", type=float, default=0.012)
    p.set_defaults(func=cmd_mc_validate)

    p = sub.add_parser("gen-planted", help="write a synthetic planted-model TSV")
    p.add_argument("--out", required=True)
    p.add_argument("--entities", type=int, default=500)
    p.add_argument("--relations", type=int, default=5)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--triples", type=int, default=20_000)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--heteroscedastic", action="store_true")
    p.add_argument("--scale", type=float, default=2.0)
    p.add_argument("--rank", type=int, default=4)
    p.set_defaults(func=cmd_gen_planted)
    return parser


def _config_defaults(argv) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    try:
        cfg = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(cfg, dict) or any(isinstance(v, dict) for v in cfg.values()):
        raise ConfigError("config must be a flat JSON object")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def _apply_defaults(parser: argparse.ArgumentParser, defaults: dict) -> None:
    parser.set_defaults(**{k: v for k, v in defaults.items() if k in ("seed", "verbose")})
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: (tuple(v) if isinstance(v, list) else v)
                               for k, v in defaults.items() if k in dests})


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_defaults(parser, _config_defaults(argv))
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except InvariantError as exc:
        print(f"unkgcp: internal invariant violated: {exc}", file=sys.stderr)
        return 2
    except (UnkgcpError, OSError) as exc:
        print(f"unkgcp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
