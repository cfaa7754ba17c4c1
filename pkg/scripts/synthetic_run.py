"""Generate a synthetic dataset, train the micro model jointly and report metrics.

Optionally repeats the run to confirm bit-identical metrics and plots the
per-epoch loss and accuracy curves.
"""

import argparse
import json
import time

from mmasd.model import ModelConfig
from mmasd.pipeline import SynthConfig, TrainConfig, run_joint, stratified_split, synth_dataset


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--per-class", type=int, default=8)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeat", action="store_true", help="train twice and compare metrics")
    p.add_argument("--plot", default=None, help="write a PNG of the training curves here")
    args = p.parse_args(argv)

    t0 = time.perf_counter()
    ds = synth_dataset(args.per_class, seed=args.seed, cfg=SynthConfig())
    train, test = stratified_split(ds, 0.8, args.seed)
    if not len(test):
        p.error("per-class count too small for a test split (need at least 4)")
    print(f"{len(ds)} samples, split {len(train)}/{len(test)} ({time.perf_counter() - t0:.0f}s)")
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
    runs = []
    for _ in range(2 if args.repeat else 1):
        _, hist, metrics = run_joint(train, test, ModelConfig.micro(), cfg)
        runs.append(json.dumps(metrics, sort_keys=True))
    for part in ("train", "test"):
        print(part, {task: round(metrics[part][task]["accuracy"], 4) for task in ("action", "asd")},
              {task + "_f1": round(metrics[part][task]["macro_f1"], 4) for task in ("action", "asd")})
    if args.repeat:
        print("reruns identical" if runs[0] == runs[1] else "reruns DIFFER")
    if args.plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        ep = [e["epoch"] for e in hist.epochs]
        fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3))
        a.plot(ep, [e["loss"] for e in hist.epochs])
        a.set_xlabel("epoch")
        a.set_ylabel("loss")
        b.plot(ep, [e["action_acc"] for e in hist.epochs], label="action")
        b.plot(ep, [e["asd_acc"] for e in hist.epochs], label="asd")
        b.set_xlabel("epoch")
        b.set_ylabel("train accuracy")
        b.legend()
        fig.savefig(args.plot, dpi=100, bbox_inches="tight")
    print(f"done in {time.perf_counter() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
