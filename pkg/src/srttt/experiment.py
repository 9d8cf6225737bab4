"""Baseline vs two-stage A/B at the desk preset, shared by the acceptance
suite and ``scripts/desk_ab.py``."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, desk_preset
from .evaluate import EvalReport, exact_match_eval, extrapolation_probe
from .model import CACHE_DISABLED, CACHE_ENABLED
from .train import load_checkpoint, run_curriculum

log = logging.getLogger(__name__)

ARMS = ("baseline", "srttt")


def arm_config(arm: str, seed: int, out_dir: Path, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else desk_preset()
    cfg.train.seed = seed
    if arm == "baseline":
        cfg.train.stage2_start = cfg.train.total_steps
    cfg.out_dir = str(out_dir)
    return cfg.validate()


@dataclass
class ArmResult:
    arm: str
    seed: int
    run_dir: str
    report: EvalReport
    extrapolation: EvalReport | None = None
    final_alpha: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        d = {
            "arm": self.arm,
            "seed": self.seed,
            "exact_match": {str(r.depth): r.exact_match for r in self.report.rows},
            "captured": {str(r.depth): r.captured for r in self.report.rows},
            "successes_captured": {str(r.depth): r.successes_captured for r in self.report.rows},
            "final_alpha": self.final_alpha,
        }
        if self.extrapolation is not None:
            d["extrapolation"] = {str(r.depth): r.exact_match for r in self.extrapolation.rows}
            d["extrapolation_seq_len"] = self.extrapolation.seq_len
        return d


def run_arm(arm: str, seed: int, root, depths=(0.25, 0.5), n_samples: int = 30, factor: float = 2.0, base: RunConfig | None = None) -> ArmResult:
    """Train (or resume) one arm and evaluate it. Finished runs in ``root``
    are reused."""
    out = Path(root) / f"{arm}_s{seed}"
    cfg = arm_config(arm, seed, out, base)
    if (out / "final.ckpt").exists():
        model, _, _, _ = load_checkpoint(out / "final.ckpt")
    else:
        model, _ = run_curriculum(cfg, out)
    mode = CACHE_ENABLED if arm == "srttt" else CACHE_DISABLED
    ev = cfg.eval
    rep = exact_match_eval(model, depths, n_samples, cfg.train.seq_len, ev.seed, mode, tag=f"{arm}_s{seed}")
    ext = None
    if factor and factor != 1:
        ext = extrapolation_probe(model, cfg.train.seq_len, factor, [0.5], n_samples, ev.seed, mode, tag=f"{arm}_s{seed}")
    alpha = [float(np.mean(a)) for a in model.alphas()]
    res = ArmResult(arm, seed, str(out), rep, ext, alpha)
    (out / "ab_summary.json").write_text(json.dumps(res.summary(), sort_keys=True, indent=1))
    log.info("%s seed %d: %s", arm, seed, res.summary())
    return res


def desk_ab(root, seeds=(0, 1, 2), **kw) -> dict[str, list[ArmResult]]:
    return {arm: [run_arm(arm, s, root, **kw) for s in seeds] for arm in ARMS}


def mean_exact_match(results: list[ArmResult], depths=(0.25, 0.5)) -> float:
    return float(np.mean([r.report.exact_match(d) for r in results for d in depths]))
