"""Teacher-forced recall diagnostics for a checkpoint.

For each needle depth, reports the answer cross-entropy and per-character
accuracy (chance is ln 36 and 1/36), how the code tokens' reconstruction
losses rank within their sequence, how many of them get routed, and how
often the query at each answer position scores the matching code key above
every other key. Exact match needs all of these to move away from chance.

    python scripts/recall_probe.py runs/ab/srttt_s0/final.ckpt
"""

import argparse

import numpy as np

from srttt import autograd as ag
from srttt import model as model_mod
from srttt.data import make_sample
from srttt.model import CACHE_DISABLED, CACHE_ENABLED
from srttt.train import load_checkpoint


class _QKSpy:
    """Records the (q, k) pairs each layer feeds its inner loop."""

    def __init__(self):
        self.calls = []
        self._orig = model_mod.ttt_scan

    def __enter__(self):
        def spy(q, k, v, W0, eta, layer=-1):
            self.calls.append((q.data.copy(), k.data.copy()))
            return self._orig(q, k, v, W0, eta, layer)

        model_mod.ttt_scan = spy
        return self

    def __exit__(self, *exc):
        model_mod.ttt_scan = self._orig


def probe(model, depths, n, seq_len, mode):
    rows = []
    for depth in depths:
        ce, acc, rank, routed, match = [], [], [], [], []
        for i in range(n):
            s = make_sample(10**9 + i, depth, seq_len)
            with _QKSpy() as spy, ag.no_grad():
                logits, aux = model.forward(s.tokens[:-1], mode)
            lp = logits.data - logits.data.max(-1, keepdims=True)
            lp -= np.log(np.exp(lp).sum(-1, keepdims=True))
            a0, a1 = s.answer_span
            c0, c1 = s.code_span
            ce.append(-np.mean([lp[t - 1, s.tokens[t]] for t in range(a0, a1)]))
            acc.append(np.mean([lp[t - 1].argmax() == s.tokens[t] for t in range(a0, a1)]))
            rank.append([np.mean(a.losses[c0:c1, None] > a.losses[None, :]) for a in aux])
            routed.append([int(a.routed[c0:c1].sum()) for a in aux])
            # query predicting answer char j should hit the key written one step after code char j-1
            per_layer = []
            for q, k in spy.calls:
                hits = 0
                for j in range(1, a1 - a0):
                    scores = np.einsum("hd,thd->ht", q[a0 + j - 1], k[: a0 + j - 1])
                    hits += np.mean(scores.argmax(-1) == c0 + j)
                per_layer.append(hits / (a1 - a0 - 1))
            match.append(per_layer)
        rows.append((depth, np.mean(ce), np.mean(acc), np.mean(rank, 0), np.mean(routed, 0), np.mean(match, 0)))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--depths", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 1.0])
    ap.add_argument("--samples", type=int, default=15)
    ap.add_argument("--mode", choices=["enabled", "disabled"], default="disabled")
    args = ap.parse_args()
    model, _, step, cfg = load_checkpoint(args.checkpoint)
    mode = CACHE_ENABLED if args.mode == "enabled" else CACHE_DISABLED
    print(f"step {step}, mode {mode}; chance: CE {np.log(36):.3f}, char acc {1 / 36:.3f}")
    for depth, ce, acc, rank, routed, match in probe(model, args.depths, args.samples, cfg.train.seq_len, mode):
        print(
            f"depth {depth:.2f}: answer CE {ce:.3f}  char acc {acc:.3f}  "
            f"code-loss rank {np.round(rank, 2).tolist()}  routed codes {np.round(routed, 2).tolist()}  "
            f"q-k match {np.round(match, 3).tolist()}"
        )


if __name__ == "__main__":
    main()
