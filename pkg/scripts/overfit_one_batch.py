"""Drive one 32-window batch towards zero loss with the default transformer.

Needs a preprocessed store (see ``enginefault preprocess``).

    python scripts/overfit_one_batch.py bench/store --steps 200
"""
import argparse
import logging
import time

from enginefault.dataset import LabeledWindowSet, batches, split
from enginefault.models import build_model
from enginefault.train_eval import overfit_batch, train_statistics


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("store")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    data = LabeledWindowSet.from_store(args.store)
    sp = split(data, seed=args.seed)
    batch = next(batches(data, sp.train, args.batch_size, shuffle=True, seed=[args.seed, 1]))
    model = build_model("transformer", seed=args.seed)
    model.set_normalization(*train_statistics(data, batch.indices))
    t0 = time.perf_counter()
    trace = overfit_batch(model, batch, args.steps, args.lr)
    hit = next((p["step"] for p in trace if p["eval_loss"] < 0.05), None)
    print(f"final eval loss {trace[-1]['eval_loss']:.4f}, train-mode loss {trace[-1]['train_loss']:.4f}; "
          f"below 0.05 from step {hit}; {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
