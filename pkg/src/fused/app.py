"""Command-line front end.

Subcommands::

    fused identify        pretrain, rank layers by drift, write ranking.csv
    fused unlearn         full pipeline: reports, checkpoints, round log
    fused retrain         retraining oracle only
    fused restore         drop adapters and verify bit-exact logits against M^r
    fused theory-check    masked-update Monte-Carlo table
    fused storage-report  storage units per (method, clients, rounds)

Every subcommand accepts ``--config``, ``--seed``, ``--workers`` and ``--out``.
Outputs are staged in a scratch directory under ``--out`` and moved into
place only when the command succeeds, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adapter import UnlearnedModel, load_adapters, remove_adapters, save_adapters
from .config import ExperimentConfig, config_from_dict, config_to_yaml, load_config
from .data import Dataset, load_csv
from .fedengine import storage_model
from .metrics import reports_to_csv
from .model import forward, load_model, save_model
from .numcore import ConfigError, DimensionError, FusedError, IntegrityError, make_rng
from .orchestrator import build_workbench, initial_model, prepare, rank_critical_layers, run_oracle, run_scenario
from .theory import TheoryProbe, gradient_cosine, masked_expectation_check


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_IO = 5
EXIT_VERIFY = 6

PROBE_ROWS = 256


class StageError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@contextlib.contextmanager
def stage(code: int, what: str):
    """Map failures inside a pipeline stage to that stage's exit code.

    Configuration and I/O problems keep their own codes wherever they occur.
    """
    try:
        yield
    except StageError:
        raise
    except ConfigError as exc:
        raise StageError(EXIT_CONFIG, f"{what}: {exc}") from exc
    except (OSError, IntegrityError) as exc:
        raise StageError(EXIT_IO, f"{what}: {exc}") from exc
    except (FusedError, ValueError, FloatingPointError) as exc:
        raise StageError(code, f"{what}: {exc}") from exc


class Outputs:
    """Files written into a scratch directory and published on success."""

    def __init__(self, out: Path):
        self.out = out
        self.scratch: Path | None = None

    def __enter__(self) -> "Outputs":
        self.out.mkdir(parents=True, exist_ok=True)
        self.scratch = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.out))
        return self

    def path(self, name: str) -> Path:
        return self.scratch / name

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return p

    def __exit__(self, exc_type, exc, tb) -> None:
        try:
            if exc_type is None:
                for item in sorted(self.scratch.iterdir()):
                    os.replace(item, self.out / item.name)
        finally:
            shutil.rmtree(self.scratch, ignore_errors=True)


def _load(args) -> ExperimentConfig:
    with stage(EXIT_CONFIG, "config"):
        config = load_config(args.config) if args.config else config_from_dict({})
        if args.seed is not None:
            config = config.with_seed(args.seed)
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be at least 1")
            config = replace(config, workers=args.workers)
    return config


def cmd_identify(args) -> int:
    config = _load(args)
    with Outputs(Path(args.out)) as outs:
        with stage(EXIT_DATA, "data"):
            bench = build_workbench(config)
        with stage(EXIT_TRAINING, "pretraining"):
            bench, _, m_r, _ = prepare(config, bench=bench)
            ranking = rank_critical_layers(config, bench, m_r)
        with stage(EXIT_IO, "write"):
            outs.write_text("ranking.csv", ranking.to_csv())
            save_model(m_r, outs.path("model_r.fmdl"))
    sys.stdout.write(ranking.to_csv())
    return EXIT_OK


def cmd_unlearn(args) -> int:
    config = _load(args)
    with Outputs(Path(args.out)) as outs:
        with stage(EXIT_DATA, "data"):
            bench = build_workbench(config)
        with stage(EXIT_IO, "round log"):
            stream = open(outs.path("rounds.log"), "w")
        with stream, stage(EXIT_TRAINING, "unlearning"):
            result = run_scenario(config, stream, bench)
        with stage(EXIT_IO, "write"):
            outs.write_text("config.yaml", config_to_yaml(config))
            outs.write_text("ranking.csv", result.ranking.to_csv())
            outs.write_text("report.csv", reports_to_csv(result.reports))
            for r in result.reports:
                outs.write_text(f"report_{r.method}.txt", r.to_sidecar())
            save_model(result.m_r, outs.path("model_r.fmdl"))
            save_adapters(result.adapters, outs.path("adapters.fadp"))
            save_model(result.m_f, outs.path("model_f.fmdl"))
            if result.retrained is not None:
                save_model(result.retrained, outs.path("model_retrain.fmdl"))
    sys.stdout.write(reports_to_csv(result.reports))
    return EXIT_OK


def cmd_retrain(args) -> int:
    config = _load(args)
    with Outputs(Path(args.out)) as outs:
        with stage(EXIT_DATA, "data"):
            bench = build_workbench(config)
        with stage(EXIT_TRAINING, "retraining"):
            model, _, report = run_oracle(config, bench, initial_model(config))
        with stage(EXIT_IO, "write"):
            outs.write_text("report.csv", reports_to_csv([report]))
            outs.write_text("report_retrain.txt", report.to_sidecar())
            save_model(model, outs.path("model_retrain.fmdl"))
    sys.stdout.write(reports_to_csv([report]))
    return EXIT_OK


def _probe_data(args, config: ExperimentConfig) -> Dataset:
    if args.probe:
        with stage(EXIT_DATA, "probe data"):
            return load_csv(args.probe, config.data.classes)
    with stage(EXIT_DATA, "probe data"):
        test = build_workbench(config).test
        return test.subset(list(range(min(PROBE_ROWS, len(test)))))


def cmd_restore(args) -> int:
    config = _load(args)
    with stage(EXIT_IO, "checkpoints"):
        model = load_model(args.model)
        adapters = load_adapters(args.adapters)
        reference = load_model(args.reference) if args.reference else None
    with stage(EXIT_DATA, "checkpoints"):
        ctx = UnlearnedModel(model, adapters)
        ctx.merged()  # rejects adapters that do not fit the model
    restored = remove_adapters(ctx)
    if reference is None:
        with stage(EXIT_TRAINING, "reference pretraining"):
            reference = prepare(config, bench=build_workbench(config))[2]
    probe = _probe_data(args, config)
    with stage(EXIT_DATA, "probe"):
        a = forward(restored, probe.features)
        b = forward(reference, probe.features)
        if a.shape != b.shape:
            raise DimensionError(f"restored logits {a.shape} vs reference {b.shape}")
    identical = a.tobytes() == b.tobytes()
    max_abs = float(np.max(np.abs(a - b))) if a.size else 0.0
    text = (f"status = {'pass' if identical else 'fail'}\n"
            f"probe_rows = {len(probe)}\n"
            f"max_abs_diff = {max_abs!r}\n")
    with Outputs(Path(args.out)) as outs, stage(EXIT_IO, "write"):
        outs.write_text("restore.txt", text)
    sys.stdout.write(text)
    return EXIT_OK if identical else EXIT_VERIFY


def cmd_theory_check(args) -> int:
    config = _load(args)
    rng = make_rng(config.seed, "theory")
    g1 = rng.standard_normal(args.dim)
    g2 = rng.standard_normal(args.dim)
    rows = []
    with stage(EXIT_TRAINING, "theory"):
        for p in args.keep_rates:
            probe = TheoryProbe(np.zeros(args.dim), g1, g2, args.eta, p)
            chk = masked_expectation_check(probe, args.trials, make_rng(config.seed, "theory-trials", p))
            rows.append([p, gradient_cosine(probe), chk.predicted, chk.empirical_mean, chk.z_score])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["keep_rate", "phi", "predicted", "empirical", "z_score"])
    w.writerows([[repr(float(v)) for v in r] for r in rows])
    with Outputs(Path(args.out)) as outs, stage(EXIT_IO, "write"):
        outs.write_text("theory.csv", buf.getvalue())
    print(f"{'p':>6} {'phi':>10} {'predicted':>14} {'empirical':>14} {'z':>7}")
    for p, phi, pred, emp, z in rows:
        print(f"{p:>6.2f} {phi:>10.5f} {pred:>14.6e} {emp:>14.6e} {z:>7.3f}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive")
    return values


def cmd_storage_report(args) -> int:
    config = _load(args)
    sizes = config.layer_sizes
    model_units = args.model_units
    if model_units is None:
        model_units = sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))
    adapter_units = args.adapter_units
    if adapter_units is None:
        # Expected kept count over the K largest layers.
        blocks = sorted(((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:])), reverse=True)
        adapter_units = round(config.unlearning.keep_rate * sum(blocks[: config.unlearning.K]))
    with stage(EXIT_CONFIG, "storage"):
        if model_units < 1 or adapter_units < 0:
            raise ConfigError("model_units must be positive and adapter_units nonnegative")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "clients", "rounds", "storage_units"])
        for method in ("fused", "history-replay"):
            for n in args.clients:
                for t in args.rounds:
                    w.writerow([method, n, t, storage_model(method, n, t, model_units, adapter_units)])
    with Outputs(Path(args.out)) as outs, stage(EXIT_IO, "write"):
        outs.write_text("storage.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML experiment config (defaults apply if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int, help="client worker threads (results do not depend on it)")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true", help="log every round to stderr")

    parser = argparse.ArgumentParser(prog="fused", description="Reversible federated unlearning with sparse adapters.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("identify", parents=[common], help="rank layers by drift").set_defaults(func=cmd_identify)
    sub.add_parser("unlearn", parents=[common], help="run the full unlearning pipeline").set_defaults(func=cmd_unlearn)
    sub.add_parser("retrain", parents=[common], help="run the retraining oracle").set_defaults(func=cmd_retrain)

    p = sub.add_parser("restore", parents=[common], help="remove adapters and verify the original model")
    p.add_argument("--model", required=True, help="M^r checkpoint")
    p.add_argument("--adapters", required=True, help="adapter checkpoint")
    p.add_argument("--reference", help="reference M^r checkpoint (default: re-run pretraining from the config)")
    p.add_argument("--probe", help="probe data CSV (default: first 256 test rows)")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("theory-check", parents=[common], help="Monte-Carlo check of the masked-update expectation")
    p.add_argument("--dim", type=int, default=200)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--keep-rates", type=float, nargs="+", default=[0.1, 0.5, 1.0])
    p.set_defaults(func=cmd_theory_check)

    p = sub.add_parser("storage-report", parents=[common], help="server storage per method, clients and rounds")
    p.add_argument("--clients", type=_int_list, default=[10, 50, 100])
    p.add_argument("--rounds", type=_int_list, default=[10, 20, 50, 100])
    p.add_argument("--model-units", type=int, help="parameters per model (default: from the config)")
    p.add_argument("--adapter-units", type=int, help="kept adapter entries (default: expected, from the config)")
    p.set_defaults(func=cmd_storage_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"fused {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
