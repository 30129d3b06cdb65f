"""Command-line driver: ``btol <command> [flags]``.

Every stage reads its inputs from and writes its outputs to the experiment
directory (``--out``), so any command can be rerun or resumed on its own::

    <out>/config.json
    <out>/data/{source,target}_{train,test}/
    <out>/source/model.ckpt, train_log.json
    <out>/runs/{baseline,bpba,blackbox}/target.ckpt, adapter.ckpt, simulator.ckpt, runlog.json
    <out>/reports/{source,baseline,bpba,blackbox}.json

Exit codes: 0 success, 2 configuration or missing-input error, 3 oracle
contract violation, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import signal
import sys
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .metrics import MetricReport, evaluate, format_table
from .models import (CheckpointError, SegNetSpec, load_checkpoint, save_checkpoint)
from .netcore import NonFiniteError
from .oracle import LocalOracle, OracleError, OracleMode, RemoteOracle, serve
from .taskgen import (SOURCE_PARAMS, TARGET_PARAMS, DomainParams, generate, load_dataset,
                      save_dataset)
from .trainer import (AdaptConfig, PipelineError, RunLog, run_baseline, run_blackbox,
                      run_bpba_pipeline, train_source)

log = logging.getLogger("btol")

EXIT_OK, EXIT_CONFIG, EXIT_ORACLE, EXIT_NUMERIC = 0, 2, 3, 4
MODES = ("baseline", "bpba", "blackbox")
SUBJECTS = ("source",) + MODES
SPLITS = ("source_train", "source_test", "target_train", "target_test")


class ConfigError(ValueError):
    pass


def _strict(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return d


@dataclass
class DataConfig:
    source: DomainParams = SOURCE_PARAMS
    target: DomainParams = TARGET_PARAMS
    n_train: int = 400
    n_test: int = 100
    seed: int = 0


@dataclass
class SourceConfig:
    spec: SegNetSpec = field(default_factory=SegNetSpec)
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 8


@dataclass
class OracleConfig:
    mode: str = OracleMode.FORWARD_BACKWARD.value
    address: str = ""          # empty: serve the source checkpoint in-process


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    output_dir: str = "btol_out"

    def validate(self) -> None:
        try:
            self.data.source.validate()
            self.data.target.validate()
            self.source.spec.validate()
            self.adapt.validate()
            OracleMode(self.oracle.mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.data.n_train < 1 or self.data.n_test < 1:
            raise ConfigError("data.n_train and data.n_test must be >= 1")
        if self.source.epochs < 0 or self.source.lr <= 0 or self.source.batch_size < 1:
            raise ConfigError("source.epochs >= 0, source.lr > 0 and source.batch_size >= 1 required")
        if not 0 <= self.data.seed < 2 ** 64:
            raise ConfigError("data.seed must be a u64")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("source", "target"):
            d["data"][k] = getattr(self.data, k).to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _strict(cls, d, "config")
        try:
            data_d = dict(_strict(DataConfig, d.get("data", {}), "data"))
            for k in ("source", "target"):
                if k in data_d:
                    data_d[k] = DomainParams.from_dict(_strict(DomainParams, data_d[k], f"data.{k}"))
            src_d = dict(_strict(SourceConfig, d.get("source", {}), "source"))
            if "spec" in src_d:
                src_d["spec"] = SegNetSpec(**_strict(SegNetSpec, src_d["spec"], "source.spec"))
            cfg = cls(data=DataConfig(**data_d), source=SourceConfig(**src_d),
                      adapt=AdaptConfig.from_dict(d.get("adapt", {})),
                      oracle=OracleConfig(**_strict(OracleConfig, d.get("oracle", {}), "oracle")),
                      output_dir=d.get("output_dir", cls.output_dir))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        out = copy.deepcopy(self)
        out.data.seed = seed
        out.adapt.seed = seed
        out.validate()
        return out


# --------------------------------------------------------------------------
# experiment directory helpers

class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def data(self, split: str) -> Path:
        return self.root / "data" / split

    @property
    def source_ckpt(self) -> Path:
        return self.root / "source" / "model.ckpt"

    def run(self, mode: str) -> Path:
        return self.root / "runs" / mode

    def report(self, subject: str) -> Path:
        return self.root / "reports" / f"{subject}.json"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path} (run the earlier stage first)")
    return path


def _runlog_dict(runlog: RunLog) -> dict:
    # wall time is kept out of the log file so reruns stay byte-identical
    d = runlog.to_dict()
    d.pop("wall_time", None)
    return d


def _open_oracle(cfg: ExperimentConfig, layout: Layout, address: str | None):
    address = address or cfg.oracle.address
    if address:
        log.info("connecting to oracle at %s", address)
        return RemoteOracle(address)
    log.info("no oracle address; serving %s in-process (%s)", layout.source_ckpt, cfg.oracle.mode)
    return LocalOracle(load_checkpoint(_require(layout.source_ckpt, "source checkpoint")), cfg.oracle.mode)


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: ExperimentConfig, layout: Layout, force: bool = False) -> list[Path]:
    out = []
    for domain, params in (("source", cfg.data.source), ("target", cfg.data.target)):
        for split, n in (("train", cfg.data.n_train), ("test", cfg.data.n_test)):
            ds = generate(params, n, cfg.data.seed, split, domain)
            out.append(save_dataset(ds, layout.data(f"{domain}_{split}"), force=force))
    return out


def cmd_train_source(cfg: ExperimentConfig, layout: Layout, force: bool = False) -> Path:
    if layout.source_ckpt.exists() and not force:
        raise FileExistsError(f"{layout.source_ckpt} exists (use --force)")
    data = load_dataset(_require(layout.data("source_train"), "source training data"))
    runlog = RunLog(seed=cfg.data.seed)
    net = train_source(data, cfg.source.spec, cfg.source.epochs, cfg.source.lr, cfg.data.seed,
                       cfg.source.batch_size, log_to=runlog)
    layout.source_ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, layout.source_ckpt)
    _write_json(layout.source_ckpt.parent / "train_log.json", _runlog_dict(runlog))
    return layout.source_ckpt


def cmd_adapt(cfg: ExperimentConfig, layout: Layout, mode: str, oracle=None, address: str | None = None,
              force: bool = False) -> Path:
    if mode not in MODES:
        raise ConfigError(f"--mode must be one of {MODES}")
    run_dir = layout.run(mode)
    if (run_dir / "target.ckpt").exists() and not force:
        raise FileExistsError(f"{run_dir} already holds a result (use --force)")
    data = load_dataset(_require(layout.data("target_train"), "target training data"))
    own = oracle is None
    oracle = oracle if oracle is not None else _open_oracle(cfg, layout, address)
    try:
        if mode == "bpba" and not oracle.supports_backward:
            raise OracleError("BACKWARD_DISABLED", "the oracle does not serve gradients; use --mode blackbox")
        # bpba/blackbox start from the baseline's initialised target model when it exists
        base_ckpt = layout.run("baseline") / "target.ckpt"
        start = load_checkpoint(base_ckpt) if mode != "baseline" and base_ckpt.exists() else None
        ckpts = {}
        if mode == "baseline":
            target, runlog = run_baseline(oracle, data, cfg.adapt)
        elif mode == "bpba":
            adapter, target, runlog = run_bpba_pipeline(oracle, data, cfg.adapt, target=start,
                                                        initialized=start is not None)
            ckpts["adapter"] = adapter
        else:
            adapter, target, simulator, runlog = run_blackbox(oracle, data, cfg.adapt, target=start,
                                                              initialized=start is not None)
            ckpts["adapter"], ckpts["simulator"] = adapter, simulator
        ckpts["target"] = target
    finally:
        if own:
            oracle.close()
    run_dir.mkdir(parents=True, exist_ok=True)
    for name, net in ckpts.items():
        save_checkpoint(net, run_dir / f"{name}.ckpt")
        runlog.checkpoints[name] = f"{name}.ckpt"
    d = _runlog_dict(runlog)
    d["initialized_from"] = "baseline" if mode != "baseline" and start is not None else None
    _write_json(run_dir / "runlog.json", d)
    return run_dir


def cmd_evaluate(cfg: ExperimentConfig, layout: Layout, subject: str, split: str = "target_test") -> MetricReport:
    if subject not in SUBJECTS:
        raise ConfigError(f"subject must be one of {SUBJECTS}")
    data = load_dataset(_require(layout.data(split), f"{split} data"))
    if subject == "source":
        model = load_checkpoint(_require(layout.source_ckpt, "source checkpoint"))
    else:
        model = load_checkpoint(_require(layout.run(subject) / "target.ckpt", f"{subject} target checkpoint"))
    report = evaluate(model, None, data)
    path = layout.report(subject) if split == "target_test" else layout.report(f"{subject}@{split}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    return report


def load_reports(run_dir) -> dict[str, MetricReport]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run {run_dir}: no such directory")
    reports = {}
    for subject in SUBJECTS:
        path = Layout(run_dir).report(subject)
        if path.exists():
            reports[subject] = MetricReport.from_dict(json.loads(path.read_text()))
    if not reports:
        raise FileNotFoundError(f"run {run_dir}: no reports found under {run_dir / 'reports'}")
    return reports


def ordering_verdict(means: dict[str, float], bpba_margin: float = 0.01,
                     source_margin: float = 0.05) -> dict:
    """Check bpba > baseline (by ``bpba_margin``), blackbox >= baseline and
    source lowest (by ``source_margin``) on per-method mean Dice."""
    checks = {}
    if {"bpba", "baseline"} <= set(means):
        checks["bpba_beats_baseline"] = means["bpba"] - means["baseline"] >= bpba_margin
    if {"blackbox", "baseline"} <= set(means):
        checks["blackbox_not_below_baseline"] = means["blackbox"] >= means["baseline"]
    others = [v for k, v in means.items() if k != "source"]
    if "source" in means and others:
        checks["source_lowest"] = min(others) - means["source"] >= source_margin
    return {"checks": checks, "passed": bool(checks) and all(checks.values()),
            "margins": {"bpba_minus_baseline": bpba_margin, "source_below_rest": source_margin}}


def cmd_report(run_dirs: list, bpba_margin: float = 0.01, source_margin: float = 0.05) -> dict:
    """Per-method mean of per-run mean foreground Dice (and ASD), plus the ordering verdict."""
    per_run = {str(r): load_reports(r) for r in run_dirs}
    classes = {tuple(rep.classes) for reps in per_run.values() for rep in reps.values()}
    if len(classes) > 1:
        raise ConfigError(f"inconsistent class counts across runs: {sorted(classes)}")
    methods = [m for m in SUBJECTS if any(m in reps for reps in per_run.values())]
    summary = {}
    for m in methods:
        missing = [r for r, reps in per_run.items() if m not in reps]
        if missing:
            raise FileNotFoundError(f"run {missing[0]}: missing report for {m}")
        dice = [per_run[r][m].dice_avg_mean for r in per_run]
        asd = [per_run[r][m].asd_avg_mean for r in per_run]
        summary[m] = {"dice_mean": float(np.mean(dice)), "asd_mean": float(np.mean(asd)),
                      "per_run_dice": dice}
    means = {m: s["dice_mean"] for m, s in summary.items()}
    return {"runs": list(per_run), "methods": summary,
            "verdict": ordering_verdict(means, bpba_margin, source_margin)}


def format_report(result: dict) -> str:
    lines = [f"{'method':<10} {'mean Dice':>10} {'mean ASD':>10}  runs={len(result['runs'])}"]
    base = result["methods"].get("baseline", {}).get("dice_mean")
    for m, s in result["methods"].items():
        diff = "" if base is None else f"  {s['dice_mean'] - base:+.4f} vs baseline"
        lines.append(f"{m:<10} {s['dice_mean']:>10.4f} {s['asd_mean']:>10.3f}{diff}")
    v = result["verdict"]
    for name, ok in v["checks"].items():
        lines.append(f"{'PASS' if ok else 'FAIL'} {name}")
    lines.append(f"ordering {'PASS' if v['passed'] else 'FAIL'}")
    return "\n".join(lines)


def cmd_recipe(cfg: ExperimentConfig, layout: Layout, force: bool = False) -> dict[str, MetricReport]:
    """gen-data, train-source, the three adapt modes and four evaluations, in-process oracle."""
    cmd_gen_data(cfg, layout, force)
    cmd_train_source(cfg, layout, force)
    oracle = LocalOracle(load_checkpoint(layout.source_ckpt), cfg.oracle.mode)
    for mode in MODES:
        cmd_adapt(cfg, layout, mode, oracle=oracle, force=force)
    return {s: cmd_evaluate(cfg, layout, s) for s in SUBJECTS}


# --------------------------------------------------------------------------
# argument parsing

def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults used when omitted)")
    common.add_argument("--seed", type=_u64, help="overrides data.seed and adapt.seed")
    common.add_argument("--out", help="experiment directory (overrides output_dir)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = argparse.ArgumentParser(prog="btol", description="Black-box test-time adaptation pipelines.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render source/target train/test datasets")
    sub.add_parser("train-source", parents=[common], help="supervised training of the source model")
    s = sub.add_parser("serve-oracle", parents=[common], help="serve the source model over TCP")
    s.add_argument("--bind", "--oracle", dest="bind", default="127.0.0.1:0", help="bind address host:port")
    s.add_argument("--mode", choices=[m.value for m in OracleMode])
    s.add_argument("--checkpoint", help="model to serve (default: the experiment's source model)")
    a = sub.add_parser("adapt", parents=[common], help="train a target model")
    a.add_argument("--mode", required=True, choices=MODES)
    a.add_argument("--oracle", help="oracle host:port (in-process oracle when omitted)")
    e = sub.add_parser("evaluate", parents=[common], help="score a trained model on target test data")
    e.add_argument("subject", choices=SUBJECTS)
    r = sub.add_parser("report", help="compare methods across experiment directories")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out", help="write the JSON summary here")
    sub.add_parser("recipe", parents=[common], help="run every stage and print the comparison table")
    sub.add_parser("show-config", parents=[common], help="print the effective config")
    return p


def _load_config(args) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = ExperimentConfig.from_json(path.read_text())
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg.output_dir = args.out
    return cfg


def _serve_forever(cfg: ExperimentConfig, layout: Layout, bind: str, mode: str | None,
                   checkpoint: str | None = None) -> None:
    model = load_checkpoint(_require(Path(checkpoint) if checkpoint else layout.source_ckpt, "checkpoint"))
    server = serve(model, mode or cfg.oracle.mode, bind)
    print(f"oracle listening on {server.address} mode={server.mode.value}", flush=True)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()
    server.close()


def _configure_logging() -> None:
    level = os.environ.get("BTOL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _unwrap(exc: BaseException) -> BaseException:
    while isinstance(exc, PipelineError):
        exc = exc.cause
    return exc


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            result = cmd_report(args.run_dirs)
            print(format_report(result))
            if args.out:
                _write_json(Path(args.out), result)
            return EXIT_OK
        cfg = _load_config(args)
        layout = Layout(cfg.output_dir)
        if args.command == "show-config":
            sys.stdout.write(cfg.to_json())
            return EXIT_OK
        layout.root.mkdir(parents=True, exist_ok=True)
        (layout.root / "config.json").write_text(cfg.to_json())
        if args.command == "gen-data":
            for path in cmd_gen_data(cfg, layout, args.force):
                print(path)
        elif args.command == "train-source":
            print(cmd_train_source(cfg, layout, args.force))
        elif args.command == "serve-oracle":
            _serve_forever(cfg, layout, args.bind, args.mode, args.checkpoint)
        elif args.command == "adapt":
            print(cmd_adapt(cfg, layout, args.mode, address=args.oracle, force=args.force))
        elif args.command == "evaluate":
            report = cmd_evaluate(cfg, layout, args.subject)
            print(format_table({args.subject: report}))
        elif args.command == "recipe":
            print(format_table(cmd_recipe(cfg, layout, args.force)))
        return EXIT_OK
    except Exception as exc:  # map failures onto the documented exit codes
        cause = _unwrap(exc)
        if isinstance(exc, PipelineError):
            print(f"error in stage {exc.stage}:", file=sys.stderr, end=" ")
        if isinstance(cause, OracleError):
            print(f"oracle error {cause}", file=sys.stderr)
            return EXIT_ORACLE
        if isinstance(cause, (NonFiniteError, FloatingPointError)):
            print(f"numerical failure: {cause}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(cause, (ConfigError, CheckpointError, OSError, ValueError)):
            print(f"error: {cause}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
