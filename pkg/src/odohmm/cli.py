"""Command-line entry point and the experiment runner."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .evaluation import KlReport, extract_essential_map, sampled_kl
from .inference import ImpossibleSequenceError
from .initialization import (StateOverflowError, TagConfig, init_model_kmeans,
                             init_model_random, init_model_tag_based)
from .model import (AugmentedHmm, ExperienceSequence, InputError, ModelStructureError, fmt,
                    load_model, load_sequence, save_model, save_sequence)
from .reestimation import EmConfig, EmTrace, learn
from .simulation import build_environment, canned_spec, load_spec, sample_experience, save_spec

__all__ = ["main", "ExperimentPlan", "Setting", "run_experiment", "learn_once",
           "EXIT_OK", "EXIT_INPUT", "EXIT_NOT_CONVERGED", "EXIT_PARTIAL"]

log = logging.getLogger("odohmm")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOT_CONVERGED = 3
EXIT_PARTIAL = 4

INITIALIZERS = ("tag", "kmeans", "random")


def learn_once(e: ExperienceSequence, n: int, init: str, config: EmConfig,
               tag_config: TagConfig = TagConfig(), obs_dims=None):
    """Build the chosen initial model and run EM; returns ``(model, trace)``."""
    if init == "tag":
        m0 = init_model_tag_based(e, n, config, tag_config, obs_dims)
    elif init == "kmeans":
        m0 = init_model_kmeans(e, n, config.seed, config, obs_dims)
    elif init == "random":
        dims = obs_dims or tuple(max(4, int(e.obs[:, c].max()) + 1) for c in range(e.obs.shape[1]))
        m0 = init_model_random(n, dims, config.seed, e, config)
    else:
        raise InputError(f"unknown initializer {init!r}")
    return learn(m0, e, config)


# ---------------------------------------------------------------------------
# experiment plans

@dataclass(frozen=True)
class Setting:
    """One learning setting of an experiment (a column of the results)."""

    name: str
    init: str = "tag"
    odometry: bool = True

    def __post_init__(self):
        if self.init not in INITIALIZERS:
            raise InputError(f"setting {self.name!r}: unknown initializer {self.init!r}")


@dataclass
class ExperimentPlan:
    """Everything needed to rerun an experiment; all randomness comes from the seeds."""

    environment: str
    output_dir: str
    sequence_length: int
    sequence_seeds: list
    settings: list
    restarts: int = 10
    restart_seed: int = 0
    env_seed: int = 0
    coordinate_regime: str = "global"
    constraint_regime: str = "antisym"
    n_states: int | None = None
    prefixes: list | None = None
    kl_k: int = 5
    kl_t: int = 1000
    kl_seed: int = 7
    epsilon: float = 1e-4
    max_iters: int = 500
    jitter: float = 0.01
    tag_sigma: tuple = TagConfig.sigma
    tag_overflow: str = "closest"
    workers: int = 1
    maps: bool = True
    base_dir: str = "."

    def __post_init__(self):
        self.settings = [s if isinstance(s, Setting) else Setting(**s) for s in self.settings]
        self.sequence_seeds = [int(s) for s in self.sequence_seeds]
        if not self.settings or not self.sequence_seeds:
            raise InputError("a plan needs at least one setting and one sequence seed")
        if len({s.name for s in self.settings}) != len(self.settings):
            raise InputError("setting names must be unique")
        if self.restarts < 1 or self.sequence_length < 2:
            raise InputError("restarts must be >= 1 and sequence_length >= 2")
        self.prefixes = sorted(int(p) for p in (self.prefixes or [self.sequence_length]))
        if any(not 2 <= p <= self.sequence_length for p in self.prefixes):
            raise InputError("prefix lengths must lie in [2, sequence_length]")
        self.tag_sigma = tuple(float(v) for v in self.tag_sigma)

    @classmethod
    def from_json(cls, path) -> "ExperimentPlan":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read plan {path}: {exc}") from exc
        data.setdefault("base_dir", str(path.parent))
        try:
            return cls(**data)
        except TypeError as exc:
            raise InputError(f"bad plan field: {exc}") from exc

    def to_json(self) -> str:
        d = asdict(self)
        d["settings"] = [asdict(s) for s in self.settings]
        return json.dumps(d, indent=2, sort_keys=True)

    def environment_spec(self):
        candidate = Path(self.base_dir) / self.environment
        if candidate.is_file():
            return load_spec(candidate)
        return canned_spec(self.environment)

    def em_config(self, odometry: bool, seed: int) -> EmConfig:
        return EmConfig(epsilon=self.epsilon, max_iters=self.max_iters,
                        constraint_regime=self.constraint_regime,
                        coordinate_regime=self.coordinate_regime,
                        jitter=self.jitter, seed=seed, odometry=odometry)


def _run_seed(plan: ExperimentPlan, seq_idx: int, restart: int) -> int:
    return int(np.random.SeedSequence([plan.restart_seed, seq_idx, restart]).generate_state(1)[0])


def _run_cell(args):
    """One learning run; returns a result dict and never raises."""
    plan, true_model, e_full, setting, seq_idx, length, restart = args
    seed = _run_seed(plan, seq_idx, restart)
    row = {"setting": setting.name, "sequence": seq_idx, "length": length, "restart": restart,
           "seed": seed, "status": "ok", "d_nats": float("nan"), "d_bits": float("nan"),
           "iterations": 0, "converged": False, "log_likelihood": float("nan")}
    start = time.perf_counter()
    model = None
    try:
        e = e_full.prefix(length)
        config = plan.em_config(setting.odometry, seed)
        n = plan.n_states or true_model.n_states
        tag_cfg = TagConfig(sigma=plan.tag_sigma, on_overflow=plan.tag_overflow)
        model, trace = learn_once(e, n, setting.init, config, tag_cfg, true_model.obs_dims)
        kl = sampled_kl(true_model, model, plan.kl_k, plan.kl_t, plan.kl_seed)
        row.update(d_nats=kl.nats, d_bits=kl.bits, iterations=trace.iterations,
                   converged=trace.converged, log_likelihood=trace.final_log_likelihood)
        if kl.infinite:
            row["status"] = "infinite-kl"
    except (InputError, ModelStructureError, StateOverflowError, ImpossibleSequenceError,
            np.linalg.LinAlgError, ValueError) as exc:
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
        model = None
    row["wall_ms"] = 1000.0 * (time.perf_counter() - start)
    return row, model


RUN_COLUMNS = ("setting", "length", "sequence", "restart", "seed", "status", "d_nats",
               "d_bits", "iterations", "converged", "log_likelihood")


def _format(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return fmt(v)
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_format(v) for v in r])


def _summaries(plan: ExperimentPlan, rows):
    summary, tests = [], []
    for length in plan.prefixes:
        by_setting = {}
        for s in sorted(plan.settings, key=lambda s: s.name):
            ok = [r for r in rows if r["setting"] == s.name and r["length"] == length
                  and r["status"] == "ok"]
            d = np.array([r["d_nats"] for r in ok])
            it = np.array([r["iterations"] for r in ok], dtype=float)
            by_setting[s.name] = (s, d, it)
            summary.append([s.name, length, len(ok),
                            float(d.mean()) if len(d) else float("nan"),
                            float(d.std(ddof=1)) if len(d) > 1 else float("nan"),
                            float(d.mean()) / np.log(2) if len(d) else float("nan"),
                            float(it.mean()) if len(it) else float("nan"),
                            float(it.std(ddof=1)) if len(it) > 1 else float("nan")])
        names = sorted(by_setting)
        for a in names:
            for b in names:
                sa, da, _ = by_setting[a]
                sb, db, _ = by_setting[b]
                if not (sa.odometry and not sb.odometry) or len(da) < 2 or len(db) < 2:
                    continue
                # identical samples give a nan statistic; scipy warns about it
                with np.errstate(all="ignore"), warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    res = stats.ttest_ind(da, db, alternative="less")
                tests.append([a, b, length, float(res.statistic), float(res.pvalue)])
    return summary, tests


SUMMARY_COLUMNS = ("setting", "length", "runs_ok", "d_nats_mean", "d_nats_std", "d_bits_mean",
                   "iterations_mean", "iterations_std")
TTEST_COLUMNS = ("odometry_setting", "baseline_setting", "length", "t_statistic",
                 "p_value_one_sided")


def run_experiment(plan: ExperimentPlan) -> dict:
    """Run every (setting, sequence, prefix, restart) cell and write the results.

    Writes ``runs.csv``, ``summary.csv``, ``ttest.csv``, the plan, and DOT/SVG
    maps of the first restart per cell into the output directory; wall times
    go to ``timing.csv`` so the other files are reproducible byte for byte.
    Returns a dict with the rows, summary, tests and failure count.
    """
    out = Path(plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = plan.environment_spec()
    true_model = build_environment(spec, plan.env_seed, plan.coordinate_regime,
                                   plan.constraint_regime)
    sequences = [sample_experience(true_model, plan.sequence_length, s)[0]
                 for s in plan.sequence_seeds]
    jobs = [(plan, true_model, sequences[i], setting, i, length, r)
            for setting in sorted(plan.settings, key=lambda s: s.name)
            for i in range(len(sequences))
            for length in plan.prefixes
            for r in range(plan.restarts)]
    if plan.workers > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]
    results.sort(key=lambda rm: (rm[0]["setting"], rm[0]["length"], rm[0]["sequence"],
                                 rm[0]["restart"]))
    rows = [r for r, _ in results]
    _write_csv(out / "runs.csv", RUN_COLUMNS, [[r[c] for c in RUN_COLUMNS] for r in rows])
    _write_csv(out / "timing.csv", ("setting", "length", "sequence", "restart", "wall_ms"),
               [[r["setting"], r["length"], r["sequence"], r["restart"],
                 format(r["wall_ms"], ".3f")] for r in rows])
    summary, tests = _summaries(plan, rows)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    _write_csv(out / "ttest.csv", TTEST_COLUMNS, tests)
    (out / "plan.json").write_text(plan.to_json() + "\n", encoding="utf-8")
    if plan.maps:
        for row, model in results:
            if model is not None and row["restart"] == 0:
                stem = out / f"map_{row['setting']}_seq{row['sequence']}_len{row['length']}"
                extract_essential_map(model).write(stem)
    failures = sum(1 for r in rows if r["status"] != "ok")
    for r in rows:
        if r["status"] != "ok":
            log.warning("cell %s/seq%d/len%d/restart%d: %s", r["setting"], r["sequence"],
                        r["length"], r["restart"], r["status"])
    return {"rows": rows, "summary": summary, "tests": tests, "failures": failures}


# ---------------------------------------------------------------------------
# argument parsing

def _add_regimes(p):
    p.add_argument("--regime", choices=("global", "relative"), default="global",
                   help="coordinate regime of the odometry")
    p.add_argument("--constraints", choices=("antisym", "additive"), default="antisym",
                   help="constraint regime on relation means")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odohmm",
                                     description="Learn odometry-augmented HMM maps.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="group", required=True)

    env = sub.add_parser("env", help="environments").add_subparsers(dest="command", required=True)
    p = env.add_parser("build", help="build a true model from an environment spec")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--canned", help="LOOP-17 or HALLS-44")
    src.add_argument("--spec", type=Path, help="environment spec file")
    p.add_argument("--seed", type=int, default=0)
    _add_regimes(p)
    p.add_argument("--out", type=Path, required=True, help="model file to write")
    p.add_argument("--spec-out", type=Path, help="also write the environment spec")

    sim = sub.add_parser("sim", help="simulation").add_subparsers(dest="command", required=True)
    p = sim.add_parser("sample", help="sample an experience sequence from a model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--out", type=Path, required=True, help="sequence file to write")
    p.add_argument("--trajectory", type=Path, help="trajectory CSV to write")

    p = sub.add_parser("learn", help="learn a model from an experience sequence")
    p.add_argument("--sequence", type=Path, required=True)
    p.add_argument("--states", type=int, required=True)
    p.add_argument("--init", choices=INITIALIZERS, default="tag")
    _add_regimes(p)
    p.add_argument("--no-odometry", action="store_true",
                   help="plain Baum-Welch: ignore readings and relation updates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--jitter", type=float, default=0.01)
    p.add_argument("--tag-overflow", choices=("raise", "closest"), default="raise")
    p.add_argument("--out", type=Path, required=True, help="model file to write")
    p.add_argument("--trace", type=Path, help="EM trace CSV to write")
    p.add_argument("--timing", action="store_true", help="include wall times in the trace")
    p.add_argument("--strict", action="store_true",
                   help="exit with status 3 when EM does not converge")

    ev = sub.add_parser("eval", help="evaluation").add_subparsers(dest="command", required=True)
    p = ev.add_parser("kl", help="sampled KL divergence of a learned model")
    p.add_argument("--true", type=Path, required=True, dest="true_model")
    p.add_argument("--learned", type=Path, required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--t", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="CSV to write (default: stdout)")

    mp = sub.add_parser("map", help="maps").add_subparsers(dest="command", required=True)
    p = mp.add_parser("export", help="write the essential map as DOT and SVG")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--out", type=Path, required=True, help="output stem")

    ex = sub.add_parser("exp", help="experiments").add_subparsers(dest="command", required=True)
    p = ex.add_parser("run", help="run an experiment plan (JSON)")
    p.add_argument("--plan", type=Path, required=True)
    p.add_argument("--workers", type=int, help="override the plan's worker count")
    p.add_argument("--out", type=Path, help="override the plan's output directory")
    return parser


def _cmd_env_build(a) -> int:
    spec = canned_spec(a.canned) if a.canned else load_spec(a.spec)
    model = build_environment(spec, a.seed, a.regime, a.constraints)
    save_model(model, a.out)
    if a.spec_out:
        save_spec(spec, a.spec_out)
    return EXIT_OK


def _cmd_sim_sample(a) -> int:
    model = load_model(a.model)
    e, dump = sample_experience(model, a.length, a.seed, a.noise_scale)
    save_sequence(e, a.out)
    if a.trajectory:
        dump.write_csv(a.trajectory)
    return EXIT_OK


def _cmd_learn(a) -> int:
    e = load_sequence(a.sequence)
    config = EmConfig(epsilon=a.epsilon, max_iters=a.max_iters, constraint_regime=a.constraints,
                      coordinate_regime=a.regime, jitter=a.jitter, seed=a.seed,
                      odometry=not a.no_odometry)
    model, trace = learn_once(e, a.states, a.init, config, TagConfig(on_overflow=a.tag_overflow))
    save_model(model, a.out)
    if a.trace:
        trace.write_csv(a.trace, timing=a.timing)
    log.info("EM finished after %d iterations (converged=%s, log-likelihood %.6f)",
             trace.iterations, trace.converged, trace.final_log_likelihood)
    if a.strict and not trace.converged:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _cmd_eval_kl(a) -> int:
    report = sampled_kl(load_model(a.true_model), load_model(a.learned), a.k, a.t, a.seed)
    if a.out:
        _write_csv(a.out, KlReport.CSV_HEADER, [report.csv_row()])
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(KlReport.CSV_HEADER)
        w.writerow(report.csv_row())
    return EXIT_OK


def _cmd_map_export(a) -> int:
    extract_essential_map(load_model(a.model), a.threshold).write(a.out)
    return EXIT_OK


def _cmd_exp_run(a) -> int:
    plan = ExperimentPlan.from_json(a.plan)
    if a.workers:
        plan.workers = a.workers
    if a.out:
        plan.output_dir = str(a.out)
    elif not Path(plan.output_dir).is_absolute():
        plan.output_dir = str(Path(plan.base_dir) / plan.output_dir)
    result = run_experiment(plan)
    return EXIT_PARTIAL if result["failures"] else EXIT_OK


COMMANDS = {
    ("env", "build"): _cmd_env_build,
    ("sim", "sample"): _cmd_sim_sample,
    ("learn", None): _cmd_learn,
    ("eval", "kl"): _cmd_eval_kl,
    ("map", "export"): _cmd_map_export,
    ("exp", "run"): _cmd_exp_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(a.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[(a.group, getattr(a, "command", None))]
    try:
        return handler(a)
    except (InputError, ModelStructureError, StateOverflowError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except ImpossibleSequenceError as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
