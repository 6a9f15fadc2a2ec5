"""Runs every CLI command into one directory; shared by the CLI and acceptance tests."""
from __future__ import annotations

import json
import shutil
from pathlib import Path

from odohmm.cli import main

SMALL_PLAN = {
    "environment": "LOOP-17",
    "output_dir": "exp",
    "sequence_length": 80,
    "sequence_seeds": [3],
    "settings": [{"name": "odo", "init": "tag", "odometry": True},
                 {"name": "plain", "init": "random", "odometry": False}],
    "restarts": 2,
    "prefixes": [40, 80],
    "kl_k": 2,
    "kl_t": 100,
    "max_iters": 30,
}


def run_pipeline(out: Path, seed: int = 0) -> dict[str, int]:
    """Run env/sim/learn/eval/map/exp commands; returns exit codes by step name."""
    out.mkdir(parents=True, exist_ok=True)
    codes = {}
    codes["env"] = main(["env", "build", "--canned", "LOOP-17", "--seed", str(seed),
                         "--out", str(out / "true.model"), "--spec-out", str(out / "env.spec")])
    codes["env-relative"] = main(["env", "build", "--spec", str(out / "env.spec"),
                                  "--regime", "relative", "--out", str(out / "true_rel.model")])
    codes["sim"] = main(["sim", "sample", "--model", str(out / "true.model"), "--length", "150",
                         "--seed", str(seed + 1), "--out", str(out / "seq.txt"),
                         "--trajectory", str(out / "traj.csv")])
    codes["sim-relative"] = main(["sim", "sample", "--model", str(out / "true_rel.model"),
                                  "--length", "150", "--seed", str(seed + 1),
                                  "--out", str(out / "seq_rel.txt")])
    for init in ("tag", "kmeans", "random"):
        codes[f"learn-{init}"] = main(
            ["learn", "--sequence", str(out / "seq.txt"), "--states", "17", "--init", init,
             "--seed", str(seed), "--max-iters", "25", "--tag-overflow", "closest",
             "--out", str(out / f"learned_{init}.model"),
             "--trace", str(out / f"trace_{init}.csv")])
    codes["learn-relative-additive"] = main(
        ["learn", "--sequence", str(out / "seq_rel.txt"), "--states", "17", "--regime",
         "relative", "--constraints", "additive", "--max-iters", "10", "--tag-overflow",
         "closest", "--out", str(out / "learned_rel.model")])
    codes["eval"] = main(["eval", "kl", "--true", str(out / "true.model"),
                          "--learned", str(out / "learned_tag.model"), "--k", "2", "--t", "200",
                          "--seed", "4", "--out", str(out / "kl.csv")])
    codes["map"] = main(["map", "export", "--model", str(out / "learned_tag.model"),
                         "--out", str(out / "map")])
    plan = dict(SMALL_PLAN, output_dir=str(out / "exp"))
    (out / "plan.json").write_text(json.dumps(plan), encoding="utf-8")
    codes["exp"] = main(["exp", "run", "--plan", str(out / "plan.json")])
    return codes


# wall-clock files are the only outputs allowed to differ between reruns
NONDETERMINISTIC = {"timing.csv"}


def rerun_differences(out: Path, snapshot: Path, seed: int = 0) -> tuple[dict, dict, list[str]]:
    """Run the pipeline twice into ``out`` and list the files whose bytes changed."""
    first = run_pipeline(out, seed)
    shutil.copytree(out, snapshot)
    second = run_pipeline(out, seed)
    return first, second, compare_trees(out, snapshot)


def compare_trees(a: Path, b: Path) -> list[str]:
    """Relative paths whose bytes differ (or exist on one side only)."""
    fa = {p.relative_to(a) for p in a.rglob("*") if p.is_file()}
    fb = {p.relative_to(b) for p in b.rglob("*") if p.is_file()}
    diff = sorted(str(p) for p in fa ^ fb)
    for rel in sorted(fa & fb):
        if rel.name in NONDETERMINISTIC:
            continue
        if (a / rel).read_bytes() != (b / rel).read_bytes():
            diff.append(str(rel))
    return diff
