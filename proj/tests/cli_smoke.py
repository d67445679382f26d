"""End-to-end checks of the episample command line on a tiny config."""
import argparse
import csv
import json
import os
import pathlib
import shutil
import subprocess
import sys

import jsonschema

TINY = {
    "seed": 3,
    "dataset": {
        "generator": {"num_classes": 20, "samples_per_class": 15, "feature_dim": 4,
                      "class_separation": 3.0, "noise_scale": 1.0},
        "split_ratios": [10, 5, 5],
    },
    "learner": {"algorithm": "proto_euclidean", "widths": [8]},
    "train": {"iterations": 6, "batch_size": 3, "validation_interval": 3, "validation_episodes": 4,
              "test_episodes": 8, "way": 3, "shot": 1, "query": 2},
    "scheme": {"kind": "baseline", "warmup_iterations": 1},
}

failures = []


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    if not cond:
        failures.append(what)


def run(cli, *args, env=None):
    p = subprocess.run([cli, *map(str, args)], capture_output=True, text=True, env=env)
    return p.returncode, p.stdout, p.stderr


def rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))[1:]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cli", required=True)
    ap.add_argument("--schema", required=True)
    ap.add_argument("--workdir", required=True)
    a = ap.parse_args()
    work = pathlib.Path(a.workdir)
    shutil.rmtree(work, ignore_errors=True)
    work.mkdir(parents=True)
    schema = json.loads(pathlib.Path(a.schema).read_text())

    cfg = dict(TINY)
    cfg["dataset"] = dict(TINY["dataset"], path=str(work / "data"))
    cfg_path = work / "tiny.json"
    cfg_path.write_text(json.dumps(cfg))

    code, _, err = run(a.cli, "gen-data", "--config", cfg_path, "--output-dir", work / "gen")
    check(code == 0, "gen-data exits 0 " + err.strip())
    first = (work / "data" / "train" / "data.csv").read_bytes()
    code, _, _ = run(a.cli, "gen-data", "--config", cfg_path, "--output-dir", work / "gen")
    check(code != 0, "gen-data refuses to overwrite without --force")
    code, _, _ = run(a.cli, "gen-data", "--config", cfg_path, "--output-dir", work / "gen", "--force")
    check(code == 0 and (work / "data" / "train" / "data.csv").read_bytes() == first,
          "gen-data --force rewrites identical bytes")

    run_dir = work / "run"
    code, out, err = run(a.cli, "train", "--config", cfg_path, "--output-dir", run_dir, "--train.batch_size", "4")
    check(code == 0, "train exits 0 " + err.strip())
    result = json.loads((run_dir / "result.json").read_text())
    try:
        jsonschema.validate(result, schema)
        check(True, "result.json validates against the schema")
    except jsonschema.ValidationError as e:
        check(False, "result.json validates against the schema: " + e.message)
    saved = json.loads((run_dir / "config.json").read_text())
    check(saved["train"]["batch_size"] == 4, "dotted override reaches the run config")
    ess = {r[2] for r in rows(run_dir / "history.csv")}
    check(ess == {"4"}, "baseline history has ess == |B|")
    check(len(rows(run_dir / "history.csv")) == 6, "history has one row per iteration")

    code, _, err = run(a.cli, "evaluate", "--config", cfg_path, "--output-dir", work / "eval",
                       "--checkpoint", run_dir / "best.json", "--episodes", 10)
    ev = json.loads((work / "eval" / "evaluation.json").read_text()) if code == 0 else {}
    check(code == 0 and ev.get("episodes") == 10, "evaluate writes evaluation.json " + err.strip())

    code, _, err = run(a.cli, "compare-schemes", "--config", cfg_path, "--output-dir", work / "cmp",
                       "--schemes", "baseline,uniform")
    check(code == 0 and len(rows(work / "cmp" / "comparison.csv")) == 2, "compare-schemes writes 2 rows " + err.strip())

    code, _, err = run(a.cli, "analyze", "--config", cfg_path, "--output-dir", work / "an",
                       "--checkpoint", run_dir / "best", "--episodes", 200, "--qq", "--bins", 10, "--normality",
                       "--spearman", run_dir / "best", run_dir / "checkpoints" / "iter_0000003",
                       "--dispersion", run_dir)
    check(code == 0, "analyze exits 0 " + err.strip())
    if code == 0:
        check(len(rows(work / "an" / "density.csv")) == 10, "density.csv has one row per bin")
        check(len(rows(work / "an" / "qq.csv")) == 200, "qq.csv has one row per episode")
        rate = float(rows(work / "an" / "normality.csv")[0][3])
        check(0.0 <= rate <= 1.0, "rejection rate in [0, 1]")
        check(len(rows(work / "an" / "spearman.csv")) == 1, "spearman.csv has a single value")

    broken = json.loads(json.dumps(TINY))
    del broken["dataset"]["generator"]["feature_dim"]
    (work / "broken.json").write_text(json.dumps(broken))
    code, _, err = run(a.cli, "train", "--config", work / "broken.json", "--output-dir", work / "broken")
    check(code == 2 and "feature_dim" in err, "missing feature_dim is a config error naming the key")

    code, _, err = run(a.cli, "train", "--config", cfg_path, "--output-dir", work / "offline",
                       "--scheme.mode", "offline")
    check(code == 2 and "proposal_checkpoint" in err, "offline mode without a proposal is a config error")

    code, _, _ = run(a.cli, "train", "--config", cfg_path, "--output-dir", work / "bad",
                     "--train.way", "30")
    check(code != 0 and (work / "bad" / "error.json").exists(), "failed train exits nonzero with error.json")

    env = dict(os.environ, EPISAMPLE_OUTPUT_ROOT=str(work / "root"))
    code, _, _ = run(a.cli, "train", "--config", cfg_path, "--output-dir", "rel", env=env)
    check(code == 0 and (work / "root" / "rel" / "result.json").exists(), "relative output dirs use the env root")

    print(f"{len(failures)} failures")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
