"""Train a small encoder on the demo corpus and watch the loss fall.

Pairs are two captures of the same location from different years; the
objective aligns their embeddings while decorrelating embedding
dimensions. Run demo 01 first (or this script will generate the corpus).

    python demos/03_train_encoder.py [--workspace DIR] [--epochs N]
"""

import argparse
import os

import numpy as np

from street2vec.corpus import PanoramaStack, index_by_location, load_manifest
from street2vec.synth import SynthConfig, generate_corpus
from street2vec.trainer import TrainConfig, train


def ensure_corpus(workspace):
    out = os.path.join(workspace, "corpus")
    if not os.path.exists(os.path.join(out, "manifest.jsonl")):
        generate_corpus(SynthConfig(locations=60, years=(2008, 2018), zones=2, seed=7,
                                    anomaly_rate=0.05), out, workers=2)
    return out


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--workspace", default="demo_workspace")
    parser.add_argument("--epochs", type=int, default=6)
    args = parser.parse_args()
    corpus = ensure_corpus(args.workspace)

    records = load_manifest(os.path.join(corpus, "manifest.jsonl")).records
    cache = os.path.join(args.workspace, "panoramas.npy")
    if os.path.exists(cache):
        stack = PanoramaStack.open(records, cache)
    else:
        print("assembling panoramas ...")
        stack = PanoramaStack.build(records, path=cache, workers=2)
    index = index_by_location(records)

    config = TrainConfig(batch_size=12, embedding_dim=32, channels=(8, 16, 32),
                         hidden_dim=64, epochs=args.epochs, master_seed=7)
    ckpt = os.path.join(args.workspace, "demo_model.ckpt")
    log = os.path.join(args.workspace, "train_log.csv")
    print(f"training {config.epochs} epochs over {len(index)} locations ...")
    outcome = train(index, stack.for_record, config, checkpoint_path=ckpt, log_path=log)

    losses = [r.loss for r in outcome.log]
    per_epoch = max(len(losses) // config.epochs, 1)
    print("\nmean loss per epoch:")
    for e in range(config.epochs):
        chunk = losses[e * per_epoch : (e + 1) * per_epoch]
        if chunk:
            print(f"  epoch {e}: {np.mean(chunk):8.3f}")
    last = outcome.log[-1]
    print(f"\nfinal step: loss {last.loss:.3f} = invariance {last.invariance:.3f}"
          f" + lambda * redundancy {last.redundancy:.3f}")
    print(f"mean |off-diagonal correlation| at the end: {last.offdiag_mean_abs:.4f}")
    print(f"checkpoint: {ckpt}\ntraining log: {log}")


if __name__ == "__main__":
    main()
