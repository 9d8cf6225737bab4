"""Train baseline and two-stage arms at the desk preset over several seeds,
then write exact-match reports and plots.

    python scripts/desk_ab.py --root runs/ab --seeds 0 1 2

Finished runs under --root are reused, so an interrupted sweep can be
restarted with the same command.
"""

import argparse
import json
import logging
from pathlib import Path

from srttt.evaluate import emit_report
from srttt.experiment import desk_ab, mean_exact_match


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs/ab")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--samples", type=int, default=30)
    ap.add_argument("--depths", type=float, nargs="+", default=[0.25, 0.5])
    ap.add_argument("--factor", type=float, default=2.0, help="extrapolation length factor")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    root = Path(args.root)
    res = desk_ab(root, args.seeds, depths=args.depths, n_samples=args.samples, factor=args.factor)
    reports = [r.report for arm in res.values() for r in arm]
    reports += [r.extrapolation for arm in res.values() for r in arm if r.extrapolation is not None]
    metrics = {}
    for arm in res.values():
        for r in arm:
            p = Path(r.run_dir) / "metrics.jsonl"
            metrics[Path(r.run_dir).name] = [json.loads(ln) for ln in p.read_text().splitlines()]
    emit_report(reports, root / "report", metrics_by_tag=metrics)

    summary = {arm: {"mean_exact_match": mean_exact_match(rs, args.depths), "runs": [r.summary() for r in rs]} for arm, rs in res.items()}
    (root / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    for arm, s in summary.items():
        alphas = [r["final_alpha"] for r in s["runs"]]
        print(f"{arm:9s} mean exact match {s['mean_exact_match']:.3f}  final alpha per layer {alphas}")


if __name__ == "__main__":
    main()
