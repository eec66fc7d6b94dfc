"""Command-line entry point: ``fuzzyadapt <command> [--config PATH] ...``.

Commands: gen, train-source, adapt, compare, verify, ablate. Every numeric
parameter lives in the YAML config; flags only pick the config, seed, output
directory, parallelism and plotting. ``FUZZYADAPT_OUT`` sets the output
directory when ``--out`` is not given.

Exit codes: 0 success, 2 config/input error, 3 diverged, 4 theory check failed.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from fuzzyadapt import datagen, experiment, nn, sfda
from fuzzyadapt.errors import (
    AssumptionViolatedError,
    ConfigError,
    DivergedError,
    InvalidInputError,
    ParseError,
    UnsupportedVersionError,
)
from fuzzyadapt.mathcore import make_rng
from fuzzyadapt.util import atomic_write_text, write_csv

log = logging.getLogger("fuzzyadapt")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_ASSUMPTION = 0, 2, 3, 4
OUT_ENV = "FUZZYADAPT_OUT"


class Run:
    """Resolved config plus output locations for one command invocation."""

    def __init__(self, args):
        if args.config is not None:
            if not os.path.exists(args.config):
                raise FileNotFoundError(args.config)
            self.cfg = experiment.load_config(args.config, seed=args.seed)
        else:
            self.cfg = experiment.resolve_config(seed=args.seed)
        self.out = args.out or os.environ.get(OUT_ENV) or "out"
        self.jobs = max(1, args.jobs)
        self.emit_plots = args.emit_plots
        self.seed = self.cfg.seeds[0]
        self.hash = self.cfg.hash

    def path(self, kind, name):
        return os.path.join(self.out, self.cfg.paths[kind], name)

    def archive_config(self, kind, command):
        atomic_write_text(self.path(kind, f"{command}.config.yaml"), experiment.dump_config(self.cfg))


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (list, tuple, np.ndarray)):
        return json.dumps([None if v is None or (isinstance(v, float) and np.isnan(v)) else v for v in np.asarray(x).tolist()])
    if isinstance(x, float) and not np.isfinite(x):
        raise DivergedError("non-finite value in results")
    return x


def _csv(path, header, rows):
    write_csv(path, header, [[_fmt(v) for v in row] for row in rows])


def _require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


def cmd_gen(run):
    spec = experiment.seed_domain(run.cfg, run.seed)
    source, target = datagen.generate_pair(spec)
    datagen.save(source, run.path("data", "source.fads"))
    datagen.save(target.unlabeled(), run.path("data", "target.fads"))
    datagen.save(target, run.path("data", "target_eval.fads"))
    run.archive_config("data", "gen")
    manifest = {
        "config_hash": run.hash,
        "seed": run.seed,
        "n_source": source.n,
        "n_target": target.n,
        "target_class_counts": np.bincount(target.labels, minlength=spec.n_classes).tolist(),
        "bayes_disagreement": source.meta["bayes_disagreement"],
    }
    atomic_write_text(run.path("data", "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train_source(run):
    source = datagen.load(_require(run.path("data", "source.fads")))
    if source.labels is None:
        raise InvalidInputError("source dataset has no labels")
    model, history = experiment.train_source(run.cfg, source, run.seed)
    if not np.all(np.isfinite(history)):
        raise DivergedError("source training loss is not finite")
    nn.save_model(model, run.path("checkpoints", "source_model.json"))
    m = sfda.evaluate(model, source.features, source.labels)
    _csv(
        run.path("reports", "source_metrics.csv"),
        ["seed", "config_hash", "split", "accuracy", "per_class_acc"],
        [[run.seed, run.hash, "source", m.accuracy, m.per_class_accuracy]],
    )
    _csv(
        run.path("reports", "source_train_loss.csv"),
        ["seed", "config_hash", "epoch", "mean_loss"],
        [[run.seed, run.hash, i, loss] for i, loss in enumerate(history)],
    )
    run.archive_config("reports", "train-source")
    return EXIT_OK


def cmd_adapt(run):
    model = nn.load_model(_require(run.path("checkpoints", "source_model.json")))
    target = datagen.load(_require(run.path("data", "target.fads")))
    eval_path = run.path("data", "target_eval.fads")
    y_true = datagen.load(eval_path).labels if os.path.exists(eval_path) else None
    # adaptation only ever sees the unlabeled target features
    adapted, report = sfda.adapt(model, target.unlabeled().features, experiment.adapt_config(run.cfg, run.seed), y_true)
    for rec in report.epochs:
        if not np.isfinite(rec.mean_loss):
            raise DivergedError("adaptation loss is not finite", epoch=rec.epoch)
    nn.save_model(adapted, run.path("checkpoints", "adapted_model.json"))
    report.save(run.path("reports", "adapt_report.json"))
    rows = []
    for stage, m in (("pre", report.pre_metrics), ("post", report.post_metrics)):
        if m is not None:
            rows.append([run.seed, run.hash, stage, m.accuracy, m.per_class_accuracy])
    _csv(run.path("reports", "adapt_metrics.csv"), ["seed", "config_hash", "stage", "accuracy", "per_class_acc"], rows)
    run.archive_config("reports", "adapt")
    if run.emit_plots:
        from fuzzyadapt import plots

        plots.adapt_plots(report, run.path("reports", "adapt"))
    return EXIT_OK


def cmd_compare(run):
    rows, _ = experiment.compare(run.cfg, jobs=run.jobs)
    _csv(
        run.path("reports", "compare.csv"),
        ["loss", "seed", "config_hash", "pre_acc", "post_acc", "per_class_acc"],
        [[r["loss"], r["seed"], run.hash, r["pre_acc"], r["post_acc"], r["per_class_acc"]] for r in rows],
    )
    means = experiment.mean_by(rows, "loss", "post_acc")
    pre = experiment.mean_by(rows, "loss", "pre_acc")
    names = [n for n, _ in run.cfg.objectives]
    summary = []
    fal = [r["post_acc"] for r in rows if r["loss"] == names[0]]
    for name in names:
        other = [r["post_acc"] for r in rows if r["loss"] == name]
        wins, losses_, p = experiment.sign_test(fal, other) if name != names[0] else (None, None, None)
        summary.append(["mean", run.hash, name, pre[name], means[name], wins, losses_, p])
    _csv(
        run.path("reports", "compare_summary.csv"),
        ["seed", "config_hash", "loss", "mean_pre_acc", "mean_post_acc", f"{names[0]}_wins", f"{names[0]}_losses", "sign_test_p"],
        summary,
    )
    run.archive_config("reports", "compare")
    if run.emit_plots:
        from fuzzyadapt import plots

        plots.bar_means(means, run.path("reports", "compare_means.png"), "post-adaptation accuracy")
    return EXIT_OK


def cmd_ablate(run):
    rows = experiment.ablate(run.cfg, jobs=run.jobs)
    _csv(
        run.path("reports", "ablation.csv"),
        ["variant", "seed", "config_hash", "accuracy"],
        [[r["variant"], r["seed"], run.hash, r["accuracy"]] for r in rows],
    )
    means = experiment.mean_by(rows, "variant", "accuracy")
    _csv(
        run.path("reports", "ablation_summary.csv"),
        ["variant", "seed", "config_hash", "mean_accuracy"],
        [[v, "mean", run.hash, means[v]] for v in experiment.ABLATION_ORDER],
    )
    checks = experiment.ablation_ordering(means)
    _csv(
        run.path("reports", "ablation_ordering.csv"),
        ["check", "seed", "config_hash", "holds"],
        [[name, "mean", run.hash, holds] for name, holds in checks.items()],
    )
    run.archive_config("reports", "ablate")
    if run.emit_plots:
        from fuzzyadapt import plots

        plots.bar_means({v: means[v] for v in experiment.ABLATION_ORDER}, run.path("reports", "ablation.png"), "accuracy")
    return EXIT_OK


def cmd_verify(run):
    v = run.cfg.verify
    rng_bound, rng_gap, rng_grad, rng_net = make_rng([run.seed, 7]).spawn(4)
    ok = True

    rows = experiment.boundedness_sweep(v["boundedness_ks"], v["boundedness_samples"], rng_bound)
    ok &= all(r["violations"] == 0 for r in rows)
    _csv(
        run.path("reports", "boundedness.csv"),
        ["K", "seed", "config_hash", "n_samples", "min_value", "max_value", "bound", "violations"],
        [[r["K"], run.seed, run.hash, r["n_samples"], r["min_value"], r["max_value"], r["bound"], r["violations"]] for r in rows],
    )

    reports = experiment.risk_gap_check(run.cfg, rng_gap)
    ok &= all(rep.within_bound for _, rep in reports)
    _csv(
        run.path("reports", "risk_gap.csv"),
        ["K", "seed", "config_hash", "eta", "risk_noisy_at_clean_opt", "risk_noisy_at_noisy_opt", "gap", "C_K", "within_bound"],
        [
            [rep.k, run.seed, run.hash, np.round(eta, 6).tolist(), rep.risk_noisy_at_clean_opt,
             rep.risk_noisy_at_noisy_opt, rep.gap, rep.bound, rep.within_bound]
            for eta, rep in reports
        ],
    )
    atomic_write_text(
        run.path("reports", "risk_gap.json"),
        json.dumps([{"eta": eta.tolist(), **rep.as_dict()} for eta, rep in reports], indent=2),
    )

    grads = experiment.gradcheck_suite(v["gradcheck_instances"], rng_grad, h=v["gradcheck_h"])
    net = experiment.network_gradcheck(rng_net)
    grad_rows = [[name, run.seed, run.hash, v["gradcheck_instances"], err, v["gradcheck_tol"], err <= v["gradcheck_tol"]]
                 for name, err in grads.items()]
    grad_rows.append(["network", run.seed, run.hash, 1, net, 1e-4, net <= 1e-4])
    ok &= all(r[-1] for r in grad_rows)
    _csv(run.path("reports", "gradcheck.csv"), ["loss", "seed", "config_hash", "instances", "max_rel_err", "tolerance", "pass"], grad_rows)
    run.archive_config("reports", "verify")
    if not ok:
        log.error("a theory check failed; see %s", run.path("reports", ""))
        return EXIT_ASSUMPTION
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "compare": cmd_compare,
    "verify": cmd_verify,
    "ablate": cmd_ablate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults apply to omitted fields)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's seed list")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for seed fan-out")
    common.add_argument("--emit-plots", action="store_true", help="also write PNG figures")
    parser = argparse.ArgumentParser(prog="fuzzyadapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        run = Run(args)
        return COMMANDS[args.command](run)
    except FileNotFoundError as exc:
        log.error("missing file: %s", exc.filename or exc)
        return EXIT_CONFIG
    except (ConfigError, InvalidInputError, ParseError, UnsupportedVersionError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except DivergedError as exc:
        log.error("diverged: %s", exc)
        return EXIT_DIVERGED
    except AssumptionViolatedError as exc:
        log.error("assumption violated: %s", exc)
        return EXIT_ASSUMPTION


if __name__ == "__main__":
    sys.exit(main())
