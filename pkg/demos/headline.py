"""Train UniformNLL and CounterfactualMax seq2seq models on the same expert
data and compare them in closed loop on matched seeds.

    python demos/headline.py --episodes 100 --seed-sets 5000,5100,5200
"""

import argparse
import time

from capo.eval import Comparison, run_closed_loop
from capo.objectives import TrainingConfig, train
from capo.planner import IdmPlanner
from capo.predictors import Seq2SeqPredictor
from capo.simworld import PedestrianParams, WorldConfig, collect_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train-episodes", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=TrainingConfig.epochs)
    ap.add_argument("--batches-per-epoch", type=int, default=TrainingConfig.batches_per_epoch)
    ap.add_argument("--episodes", type=int, default=100)
    ap.add_argument("--seed-sets", default="5000,5100,5200")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    world = WorldConfig()
    planner = IdmPlanner.for_world(world)
    t0 = time.time()
    data = collect_dataset(world, PedestrianParams(), args.train_episodes, seed=1000, jobs=args.jobs)
    print(f"collected {len(data)} scenes in {time.time() - t0:.0f}s")

    cfg = TrainingConfig(epochs=args.epochs, batches_per_epoch=args.batches_per_epoch)
    models = {}
    for scheme in ("UniformNLL", "CounterfactualMax"):
        t0 = time.time()
        model = Seq2SeqPredictor(seed=0)
        train(model, data, scheme, cfg, planner=planner)
        models[scheme] = model
        print(f"trained {scheme} in {time.time() - t0:.0f}s")

    for base in map(int, args.seed_sets.split(",")):
        reports = [
            run_closed_loop(m, planner, world, args.episodes, base, name=name, jobs=args.jobs)
            for name, m in models.items()
        ]
        print(Comparison.from_reports(reports).to_text())


if __name__ == "__main__":
    main()
