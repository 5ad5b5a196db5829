"""Train the desk-scale model and compare recall before and after."""

import argparse
import time

from pplt.harness.desk import DeskConfig, cell_recall, desk_samples, initial_state
from pplt.learn import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=50)
    ap.add_argument("--eval-first-seed", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--learning-rate", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = DeskConfig()
    train_set = desk_samples(args.samples, 0, cfg)
    eval_set = desk_samples(args.samples, args.eval_first_seed, cfg)
    state = initial_state(cfg, seed=args.seed)
    before = cell_recall(state, train_set, cfg), cell_recall(state, eval_set, cfg)
    t0 = time.perf_counter()
    tc = TrainConfig(learning_rate=args.learning_rate, max_epochs=args.epochs, rotations_train=cfg.n_rotations)
    res = train(train_set, tc, seed=args.seed, init=state, log=print)
    elapsed = time.perf_counter() - t0
    after = cell_recall(res.state, train_set, cfg), cell_recall(res.state, eval_set, cfg)
    print(f"train time {elapsed:.1f}s  best epoch {res.best_epoch}  reductions {res.reductions}")
    print(f"recall@1 cell  train {before[0]:.2f} -> {after[0]:.2f}  eval {before[1]:.2f} -> {after[1]:.2f}")


if __name__ == "__main__":
    main()
