"""Command-line entry point: ``qsrlab {schedule,train,sde,moments,commcost}``.

Every run reads one YAML config, writes CSV tables plus a JSON document that
embeds the resolved config and the output format version, and keeps
run-specific metadata (timestamp, argv, threads) in ``metadata.json`` so the
other files are byte-identical across reruns.

Exit codes: 0 success, 2 config error, 3 numeric abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import __version__, commcost, engine, problems, schedules, sdelab, syncrules
from .errors import (DomainError, IntegrationError, NumericError, ParameterError,
                     ShapeError, StepRangeError)

FORMAT_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SECTIONS = ("schedule", "sync", "optimizer", "problem", "train", "sde", "moments", "commcost")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    sections: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw) -> "RunConfig":
        if not isinstance(raw, dict) or not raw:
            raise ConfigError("config is empty or not a mapping")
        raw = dict(raw)
        seed = raw.pop("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed: expected a nonnegative integer, got {seed!r}")
        raw.pop("command", None)
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
        for key, value in raw.items():
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a mapping")
        return cls(seed, raw)

    def to_dict(self) -> dict:
        return {"seed": self.seed, **self.sections}

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(yaml.safe_load(text))
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None

    def section(self, name: str, required: bool = True) -> dict:
        if name not in self.sections:
            if required:
                raise ConfigError(f"missing config section {name!r}")
            return {}
        return dict(self.sections[name])


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return RunConfig.loads(fh.read())


# builders

def resolve_schedule_spec(spec: dict) -> dict:
    """Expand epoch-level shorthands into step counts (kept in the resolved config)."""
    spec = dict(spec)
    if "base" in spec:
        spec["base"] = resolve_schedule_spec(spec["base"])
    if "dataset_size" in spec or "global_batch" in spec:
        spe = schedules.steps_per_epoch(int(spec.pop("dataset_size")),
                                        int(spec.pop("global_batch")))
        spec["steps_per_epoch"] = spe
    spe = int(spec.get("steps_per_epoch", 1))
    if "epochs" in spec:
        spec["total_steps"] = int(spec.pop("epochs")) * spe
    if "warmup_epochs" in spec:
        spec["warmup_steps"] = int(spec.pop("warmup_epochs")) * spe
    if "freeze_epoch" in spec:
        spec["freeze_step"] = int(spec.pop("freeze_epoch")) * spe
    return spec


def build_schedule(cfg: RunConfig):
    spec = resolve_schedule_spec(cfg.section("schedule"))
    cfg.sections["schedule"] = spec
    return schedules.from_dict(spec)


def build_problem(cfg: RunConfig):
    # the problem's own seed fixes its dataset; the run seed only drives sampling
    return problems.build(cfg.section("problem"))


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


class Writer:
    def __init__(self, out_dir: str, cfg: RunConfig, command: str):
        self.out_dir, self.cfg, self.command = out_dir, cfg, command
        os.makedirs(out_dir, exist_ok=True)

    def text(self, name: str, body: str) -> None:
        with open(os.path.join(self.out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(body)

    def json(self, name: str, payload: dict) -> None:
        doc = {"format_version": FORMAT_VERSION, "command": self.command,
               "config": self.cfg.to_dict(), **payload}
        self.text(name, json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")

    def metadata(self, argv, threads) -> None:
        meta = {"format_version": FORMAT_VERSION, "version": __version__,
                "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                "argv": list(argv), "threads": threads}
        self.text("metadata.json", json.dumps(meta, indent=2) + "\n")


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# subcommands

def cmd_schedule(cfg: RunConfig, out: Writer, threads: int = 1) -> dict:
    sched = build_schedule(cfg)
    rule = syncrules.from_dict(cfg.section("sync"))
    timeline = syncrules.expand_timeline(rule, sched)
    lrs = sched.values()
    out.text("lr.csv", _csv(enumerate(lrs), ["step", "lr"]))
    out.text("timeline.csv", timeline.to_csv())
    result = {"comm_fraction": timeline.num_syncs / timeline.total_steps,
              "num_syncs": timeline.num_syncs, "total_steps": timeline.total_steps}
    out.json("comm.json", result)
    return result


_TRAIN_KEYS = {"mode", "K", "B_loc", "sampling", "moment_mode", "log_every", "n_seeds"}


def cmd_train(cfg: RunConfig, out: Writer, threads: int = 1) -> dict:
    sched = build_schedule(cfg)
    prob = build_problem(cfg)
    train = cfg.section("train")
    unknown = set(train) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown train key(s): {', '.join(sorted(unknown))}")
    mode = train.get("mode", "local")
    if mode not in ("local", "parallel"):
        raise ConfigError(f"train.mode must be 'local' or 'parallel', got {mode!r}")
    rule = syncrules.from_dict(cfg.section("sync")) if mode == "local" else None
    opt = cfg.section("optimizer", required=False) or {"kind": "sgd"}
    n_seeds = int(train.get("n_seeds", 1))
    if n_seeds < 1:
        raise ConfigError("train.n_seeds must be >= 1")

    def one(seed):
        tc = engine.TrainConfig(
            prob, sched, K=int(train.get("K", 1)), B_loc=int(train.get("B_loc", 1)), seed=seed,
            sampling=train.get("sampling", "with_replacement"), optimizer=opt, sync=rule,
            moment_mode=train.get("moment_mode", "persist"),
            log_every=int(train.get("log_every", 1)),
        )
        return engine.run_local(tc) if mode == "local" else engine.run_parallel(tc)

    seeds = [cfg.seed + i for i in range(n_seeds)]
    traces = _map(one, seeds, threads)
    rows = []
    for seed, tr in zip(seeds, traces):
        for r in tr.records:
            rows.append((seed, r.round, r.step, r.H, r.lr, r.loss, r.sharpness))
    out.text("trace.csv", _csv(rows, ("seed",) + engine.Trace.CSV_HEADER))
    runs = [dict(seed=s, **tr.summary()) for s, tr in zip(seeds, traces)]
    result = {"runs": runs, "final_loss_mean": float(np.mean([r["final_loss"] for r in runs]))}
    sharp = [r["final_sharpness"] for r in runs]
    if all(v is not None for v in sharp):
        result["final_sharpness_mean"] = float(np.mean(sharp))
        result["final_sharpness_se"] = (float(np.std(sharp, ddof=1) / math.sqrt(len(sharp)))
                                        if len(sharp) > 1 else 0.0)
    out.json("summary.json", result)
    return result


def cmd_sde(cfg: RunConfig, out: Writer, threads: int = 1) -> dict:
    prob = build_problem(cfg)
    spec = cfg.section("sde")
    variants = spec.pop("variants", ["sgd", "local_qsr"])
    zeta0 = np.asarray(spec.pop("zeta0", prob.theta0), dtype=float)
    allowed = set(sdelab.SlowSdeSpec.__dataclass_fields__) - {"variant", "seed"}
    unknown = set(spec) - allowed
    if unknown:
        raise ConfigError(f"unknown sde key(s): {', '.join(sorted(unknown))}")
    rows, fits = [], {}
    for variant in variants:
        ss = sdelab.SlowSdeSpec(variant=variant, seed=cfg.seed, **spec)
        path = sdelab.integrate_slow_sde(prob, ss, zeta0, threads=threads)
        mean = path.mean()
        se = path.states.std(axis=1, ddof=1) / math.sqrt(ss.n_paths) if ss.n_paths > 1 \
            else np.zeros_like(mean)
        sharp = sdelab.sharpness(prob, path.states).mean(axis=1)
        for i, t in enumerate(path.times):
            rows.append([variant, t, *mean[i], *se[i], sharp[i]])
        fits[variant] = {
            "initial_drift": [sdelab.fit_initial_drift(path, c) for c in range(zeta0.size)]
            if path.times.size > 2 else None,
            "final_mean": mean[-1], "final_sharpness": sharp[-1],
        }
    d = zeta0.size
    header = (["variant", "time"] + [f"mean_{i}" for i in range(d)] + [f"se_{i}" for i in range(d)]
              + ["sharpness"])
    out.text("paths.csv", _csv(rows, header))
    result = {"variants": fits}
    out.json("sde.json", result)
    return result


_MOMENT_KEYS = {"zeta0", "alphas", "H_base", "eta", "eta_scale", "B_loc", "K", "n_seeds",
                "block_size"}


def cmd_moments(cfg: RunConfig, out: Writer, threads: int = 1) -> dict:
    prob = build_problem(cfg)
    spec = cfg.section("moments")
    unknown = set(spec) - _MOMENT_KEYS
    if unknown:
        raise ConfigError(f"unknown moments key(s): {', '.join(sorted(unknown))}")
    if "alphas" not in spec:
        raise ConfigError("moments.alphas is required")
    if ("eta" in spec) == ("eta_scale" in spec):
        raise ConfigError("moments needs exactly one of eta or eta_scale (eta = eta_scale * alpha^2)")
    zeta0 = np.asarray(spec.get("zeta0", prob.theta0), dtype=float)
    reports = []
    for alpha in spec["alphas"]:
        alpha = float(alpha)
        eta = float(spec["eta"]) if "eta" in spec else float(spec["eta_scale"]) * alpha**2
        reports.append(sdelab.estimate_round_moments(
            prob, zeta0, alpha, int(spec.get("H_base", 1)), eta, int(spec.get("B_loc", 1)),
            int(spec.get("K", 1)), int(spec.get("n_seeds", 10000)), seed=cfg.seed,
            block_size=int(spec.get("block_size", 4096)), threads=threads,
        ))
    rows = []
    for r in reports:
        d = r.first_moment.size
        for i in range(d):
            rows.append([r.alpha, r.eta, r.H, "first", i, "", r.first_moment[i],
                         r.first_moment_se[i], r.predicted_first[i]])
        for i in range(d):
            for j in range(d):
                rows.append([r.alpha, r.eta, r.H, "second", i, j, r.second_moment[i, j],
                             r.second_moment_se[i, j], r.predicted_second[i, j]])
    out.text("moments.csv", _csv(rows, ["alpha", "eta", "H", "moment", "i", "j", "empirical",
                                        "se", "predicted"]))
    result = {"reports": [r.to_dict() for r in reports]}
    if len(reports) >= 2:
        res = [r.first_residual() for r in reports]
        if all(v > 0 for v in res):
            result["first_residual_loglog_slope"] = float(
                np.polyfit(np.log([r.alpha for r in reports]), np.log(res), 1)[0])
    out.json("moments.json", result)
    return result


def cmd_commcost(cfg: RunConfig, out: Writer, threads: int = 1) -> dict:
    spec = cfg.section("commcost")
    if "measured_file" in spec:
        with open(spec.pop("measured_file"), encoding="utf-8") as fh:
            measured = json.load(fh)
        spec = {**measured, **spec}
    try:
        ledger = commcost.CommLedger(float(spec["T_tot_para"]), float(spec["T_tot_H1"]),
                                     int(spec["H1"]))
    except KeyError as exc:
        raise ConfigError(f"commcost.{exc.args[0]} is required") from None
    for item in spec.get("predict", []):
        ledger.add_period(int(item["H"]), item.get("measured"))
    for item in spec.get("rules", []):
        if "fraction" in item:
            f = float(item["fraction"])
        else:
            sched = schedules.from_dict(resolve_schedule_spec(item["schedule"]))
            f = syncrules.comm_fraction(syncrules.from_dict(item["sync"]), sched)
        ledger.add_fraction(str(item["name"]), f, item.get("measured"))
    out.text("commcost.csv", ledger.to_csv())
    result = {"ledger": ledger.to_dict(), "report": ledger.report()}
    out.json("commcost.json", result)
    return result


COMMANDS = {"schedule": cmd_schedule, "train": cmd_train, "sde": cmd_sde,
            "moments": cmd_moments, "commcost": cmd_commcost}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsrlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads (speed only)")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigError("--seed must be a 64-bit unsigned integer")
            cfg.seed = args.seed
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = Writer(args.out, cfg, args.command)
        COMMANDS[args.command](cfg, out, threads=args.threads)
        out.metadata(argv, args.threads)
    except (ConfigError, ParameterError, DomainError, StepRangeError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, IntegrationError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KeyError, TypeError, ValueError) as exc:
        print(f"config error: {exc!r}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
