"""Command-line entry point: simulate, train, train-cascade, eval, bench.

Configuration is a flat ``key = value`` text file; ``--set key=value`` flags
override it. Every run writes ``resolved_config.txt`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .baselines import music1d_mf, music2d_mf
from .cascade import CascadeModel
from .matching import match_all
from .omp3d import build_grids_and_dicts, run_omp
from .reports import MethodResult, matched_errors, report_metrics
from .scenario import ScenarioConfig, desk_config, draw_sample, paper_config, read_dataset, write_dataset
from .training import heldout_indices, is_heldout, train
from .transformer import OmpTransformer
from .weights import assign_weights, load_weights, save_weights

log = logging.getLogger("isac_omp")

__all__ = ["RunConfig", "ConfigError", "parse_config_text", "resolve_config", "main"]

COMMANDS = ("simulate", "train", "train-cascade", "eval", "bench")
METHODS = ("music1d", "music2d", "omp", "transformer", "cascade")
THREADS_ENV = "ISAC_THREADS"

# angle_window and phi_min_range appear in degrees in the text config
_SCENARIO_KEYS = {f.name for f in dataclasses.fields(ScenarioConfig)} - {"angle_window", "phi_min_range"}


class ConfigError(ValueError):
    """Invalid configuration; the message lists every offending key."""


@dataclasses.dataclass
class RunConfig:
    """Run-level settings; scenario fields live in ``scenario``."""

    scenario: ScenarioConfig
    profile: str = "desk"
    out: str = "out"
    dataset: str = ""
    weights: str = ""
    cascade_weights: str = ""
    seed: int = 0
    steps: int = 2000
    batch: int = 4
    lr: float = 3e-3
    eval_every: int = 100
    heldout: int = 200
    n_samples: int = 500
    start: int = 0
    split: str = "heldout"
    methods: tuple = ("omp",)
    bench_n: int = 20
    bench_batch: int = 2

    def to_lines(self) -> list[str]:
        sc = self.scenario
        items = {k: getattr(sc, k) for k in sorted(_SCENARIO_KEYS)}
        items["angle_window_deg"] = math.degrees(sc.angle_window)
        items["phi_min_lo_deg"] = math.degrees(sc.phi_min_range[0])
        items["phi_min_hi_deg"] = math.degrees(sc.phi_min_range[1])
        for f in dataclasses.fields(self):
            if f.name != "scenario":
                items[f.name] = getattr(self, f.name)
        items["methods"] = ",".join(self.methods)
        return [f"{k} = {_fmt(items[k])}".rstrip() for k in sorted(items)]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


_RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "scenario"}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys override earlier ones."""
    out = {}
    problems = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{n}: expected 'key = value'")
            continue
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            problems.append(f"{source}:{n}: empty key")
            continue
        out[k] = v
    if problems:
        raise ConfigError("; ".join(problems))
    return out


def _convert(kind, raw: str):
    if kind is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def _scenario_type(name: str):
    ann = {f.name: f.type for f in dataclasses.fields(ScenarioConfig)}[name]
    if "int" in str(ann):
        return int
    return float


def resolve_config(pairs: dict[str, str]) -> RunConfig:
    """Validate every key before building anything; all problems are reported together."""
    pairs = dict(pairs)
    problems = []
    profile = pairs.pop("profile", "desk")
    if profile not in ("desk", "paper"):
        problems.append(f"profile: must be 'desk' or 'paper', got {profile!r}")
    scen, run = {}, {}
    lo_hi = {}
    for k, raw in pairs.items():
        try:
            if k in _SCENARIO_KEYS:
                if k == "delta_T" and raw.lower() == "none":
                    scen[k] = None
                else:
                    scen[k] = _convert(_scenario_type(k), raw)
            elif k == "angle_window_deg":
                scen["angle_window"] = math.radians(float(raw))
            elif k in ("phi_min_lo_deg", "phi_min_hi_deg"):
                lo_hi[k] = math.radians(float(raw))
            elif k == "methods":
                m = tuple(s.strip() for s in raw.split(",") if s.strip())
                bad = [x for x in m if x not in METHODS]
                if bad or not m:
                    raise ValueError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
                run[k] = m
            elif k in _RUN_FIELDS:
                default = _RUN_FIELDS[k].default
                run[k] = _convert(type(default), raw)
            else:
                problems.append(f"{k}: unknown key")
        except ValueError as exc:
            problems.append(f"{k}: {exc}")
    base = desk_config() if profile == "desk" else paper_config()
    if lo_hi:
        scen["phi_min_range"] = (
            lo_hi.get("phi_min_lo_deg", base.phi_min_range[0]),
            lo_hi.get("phi_min_hi_deg", base.phi_min_range[1]),
        )
    for k in ("steps", "batch", "heldout", "n_samples", "bench_n", "bench_batch", "eval_every"):
        if k in run and run[k] < 1:
            problems.append(f"{k}: must be >= 1")
    if "lr" in run and not run["lr"] > 0:
        problems.append("lr: must be positive")
    if "split" in run and run["split"] not in ("heldout", "train", "all"):
        problems.append("split: must be heldout, train or all")
    scenario = None
    if not problems:
        try:
            scenario = base.replace(**scen)
        except (ValueError, TypeError) as exc:
            problems.append(f"scenario: {exc}")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    if profile == "paper":
        run.setdefault("steps", 100_000)
        run.setdefault("batch", 8)
        run.setdefault("lr", 1e-4)
        run.setdefault("n_samples", 10_000)
    return RunConfig(scenario=scenario, profile=profile, **run)


def _write_resolved(rc: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text("\n".join(rc.to_lines()) + "\n", encoding="utf-8")


def _indices(rc: RunConfig) -> list[int]:
    n, i, out = rc.n_samples, rc.start, []
    if rc.split == "all":
        return list(range(rc.start, rc.start + n))
    want_held = rc.split == "heldout"
    while len(out) < n:
        if is_heldout(i) == want_held:
            out.append(i)
        i += 1
    return out


def _require_file(path: str, what: str) -> Path:
    if not path:
        raise FileNotFoundError(f"{what} path not set")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# --------------------------------------------------------------------------
# commands


def cmd_simulate(rc: RunConfig, out: Path) -> None:
    samples = [draw_sample(rc.scenario, i) for i in _indices(rc)]
    path = Path(rc.dataset) if rc.dataset else out / "dataset.bin"
    write_dataset(path, rc.scenario, samples, extra={"split": rc.split})
    log.info("wrote %d samples to %s", len(samples), path)


def _write_curve(result, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "heldout_loss"])
        for s, a, b in result.rows():
            w.writerow([s, "" if math.isnan(a) else repr(a), repr(b)])


def _heldout(rc: RunConfig):
    return [draw_sample(rc.scenario, i) for i in heldout_indices(rc.heldout)]


def cmd_train(rc: RunConfig, out: Path) -> None:
    model = OmpTransformer(rc.scenario, seed=rc.seed)
    res = train(model, rc.scenario, rc.steps, rc.batch, rc.lr, _heldout(rc), rc.eval_every, cosine=True)
    save_weights(out / "weights.bin", model.params())
    _write_curve(res, out / "loss_curve.csv")


def cmd_train_cascade(rc: RunConfig, out: Path) -> None:
    model = CascadeModel(rc.scenario, seed=rc.seed)
    if rc.weights:
        assign_weights(model.stage1.params(), load_weights(_require_file(rc.weights, "stage-1 weights")))
    res = train(model, rc.scenario, rc.steps, rc.batch, rc.lr, _heldout(rc), rc.eval_every, cosine=True)
    save_weights(out / "cascade_weights.bin", model.params())
    _write_curve(res, out / "cascade_loss_curve.csv")


def _build_models(rc: RunConfig, config: ScenarioConfig, methods, need_weights: bool):
    models = {}
    if "transformer" in methods:
        m = OmpTransformer(config, seed=rc.seed)
        if need_weights or rc.weights:
            assign_weights(m.params(), load_weights(_require_file(rc.weights, "transformer weights")))
        models["transformer"] = m
    if "cascade" in methods:
        c = CascadeModel(config, seed=rc.seed)
        if need_weights or rc.cascade_weights:
            assign_weights(c.params(), load_weights(_require_file(rc.cascade_weights, "cascade weights")))
        models["cascade"] = c
    return models


def _detect(method: str, sample, config: ScenarioConfig, M: int, models: dict):
    """Estimates of one method and the pairings the report should use (``None``: own)."""
    grids, dicts = build_grids_and_dicts(config, sample.phi_min)
    if method == "omp":
        return run_omp(sample.z_hat, dicts, grids, M=M)[0].triples(), None
    if method == "music1d":
        return music1d_mf(sample.z_hat, M, config, sample.phi_min, dicts, grids).triples(), None
    if method == "music2d":
        return music2d_mf(sample.z_hat, M, config, sample.phi_min, dicts, grids).triples(), None
    if method == "transformer":
        return models["transformer"].detect(sample.z_hat, sample.phi_min).triples(), None
    if method == "cascade":
        est2, trace1, _ = models["cascade"].forward(sample.z_hat, sample.phi_min)
        return est2.triples(), match_all(sample.truth.triples(), trace1.estimates())
    raise ValueError(f"unknown method {method!r}")


def _eval_one(args):
    method, sample, config, M, models = args
    est, rel = _detect(method, sample, config, M, models)
    return matched_errors(sample.truth.triples(), est, rel)


def _map(fn, items):
    workers = int(os.environ.get(THREADS_ENV, "1") or 1)
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=8))


def cmd_eval(rc: RunConfig, out: Path) -> None:
    config, samples, _ = read_dataset(_require_file(rc.dataset, "dataset"))
    if not samples:
        raise ValueError("dataset is empty")
    M = len(samples[0].truth)
    models = _build_models(rc, config, rc.methods, need_weights=True)
    results = []
    for method in rc.methods:
        res = MethodResult(method, M, config.snr_db)
        for errs in _map(_eval_one, [(method, s, config, M, models) for s in samples]):
            res.add(errs)
        results.append(res)
    report_metrics(results, out)


def cmd_bench(rc: RunConfig, out: Path) -> None:
    config, samples, _ = read_dataset(_require_file(rc.dataset, "dataset"))
    samples = samples[: rc.bench_n]
    M = len(samples[0].truth)
    models = _build_models(rc, config, rc.methods, need_weights=False)
    rows = []
    for method in rc.methods:
        t0 = time.perf_counter()
        for b in range(0, len(samples), rc.bench_batch):
            for s in samples[b : b + rc.bench_batch]:
                _detect(method, s, config, M, models)
        total = time.perf_counter() - t0
        n_batches = math.ceil(len(samples) / rc.bench_batch)
        rows.append([method, M, len(samples), rc.bench_batch, repr(total), repr(total / n_batches)])
    with open(out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "M", "n_samples", "batch", "total_s", "per_batch_s"])
        w.writerows(rows)


_DISPATCH = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "train-cascade": cmd_train_cascade,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isac-omp", description="3D-OMP transformer detection for OFDM ISAC")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("-c", "--config", help="flat key = value config file")
    ap.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        pairs = {}
        if args.config:
            p = Path(args.config)
            if not p.is_file():
                raise FileNotFoundError(f"config file not found: {p}")
            pairs.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
        pairs.update(parse_config_text("\n".join(args.set), "--set"))
        rc = resolve_config(pairs)
        out = Path(rc.out)
        _write_resolved(rc, out)
        _DISPATCH[args.command](rc, out)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
