"""Run every scenario under scenarios/ against its model and print a summary.

    python3 scripts/run_scenarios.py [--trace-dir DIR] [--seed N]
"""

import argparse
import time
from collections import Counter
from pathlib import Path

from admarf.checker import check
from admarf.harness import run_scenario
from admarf.parser import parse_file
from admarf.scenario import load_scenario
from admarf.sim import PipelineWorld
from admarf.trace import dumps

ROOT = Path(__file__).resolve().parent.parent
MODEL_FOR = {"healing": "self_healing", "protection": "self_protection", "optimization": "self_optimization"}


def model_for(scn: Path):
    prefix = scn.stem.split("_")[0]
    tree, diags = parse_file(ROOT / "specs" / f"{MODEL_FOR[prefix]}.assl")
    if tree is None:
        raise SystemExit("\n".join(map(str, diags)))
    report = check(tree)
    if not report.passed:
        raise SystemExit("\n".join(f.format() for f in report.errors))
    return report.model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trace-dir", type=Path)
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    if args.trace_dir:
        args.trace_dir.mkdir(parents=True, exist_ok=True)
    print(f"{'scenario':24} {'exit':>4} {'ticks':>5} {'records':>7} {'ms':>6}  kinds")
    for scn in sorted((ROOT / "scenarios").glob("*.scn")):
        sc = load_scenario(scn)
        world = PipelineWorld.from_file(sc.world_path(), sc.seed if args.seed is None else args.seed)
        t0 = time.perf_counter()
        res = run_scenario(model_for(scn), sc, world)
        ms = (time.perf_counter() - t0) * 1000
        kinds = Counter(r.kind for r in res.records)
        summary = " ".join(f"{k}={kinds[k]}" for k in sorted(kinds))
        print(f"{scn.stem:24} {res.exit_code:>4} {res.ticks_run:>5} {len(res.records):>7} {ms:>6.1f}  {summary}")
        if args.trace_dir:
            (args.trace_dir / f"{scn.stem}.jsonl").write_text(dumps(res.records))


if __name__ == "__main__":
    main()
