"""Train the ego-attention model with attention-weighted likelihoods and show
how its weights split between crossing and sidewalk pedestrians."""

import argparse

import numpy as np

from capo.objectives import Batch, TrainingConfig, attention_capo_weights, train_attention_capo
from capo.predictors import AttentionPredictor
from capo.simworld import PedestrianParams, WorldConfig, collect_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train-episodes", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=TrainingConfig.epochs)
    ap.add_argument("--batches-per-epoch", type=int, default=TrainingConfig.batches_per_epoch)
    ap.add_argument("--lr", type=float, default=TrainingConfig.lr)
    args = ap.parse_args()

    world, peds = WorldConfig(), PedestrianParams()
    data = collect_dataset(world, peds, args.train_episodes, seed=1000)
    heldout = collect_dataset(world, peds, 10, seed=2000)
    model = AttentionPredictor(seed=0)

    def report(tag):
        w = attention_capo_weights(model, Batch.from_scenes(heldout))
        c = heldout.crossing_agents
        print(f"{tag}: crossing {w[c].mean():.4f}  other {w[~c].mean():.4f}  ratio {w[c].mean() / w[~c].mean():.2f}")

    report("untrained")
    cfg = TrainingConfig(epochs=args.epochs, batches_per_epoch=args.batches_per_epoch, lr=args.lr)
    result = train_attention_capo(data, model, cfg)
    for rec in result.history:
        print(f"epoch {rec.epoch}: loss {rec.loss:.1f}")
    report("trained")
    print("agents with the largest weight per scene are crossing in "
          f"{np.mean(heldout.crossing_agents[np.arange(len(heldout)), np.argmax(attention_capo_weights(model, Batch.from_scenes(heldout)), -1)]):.1%} of scenes")


if __name__ == "__main__":
    main()
