"""Embed the demo corpus and rank locations by cosine-distance change.

Requires the model from demo 03 (runs it implicitly if missing). Locations
whose ground truth says "structural change" should float to the top.

    python demos/04_change_map.py [--workspace DIR]
"""

import argparse
import os
import subprocess
import sys

from street2vec.change import change_map, embed_records, write_changes_csv
from street2vec.corpus import PanoramaStack, load_manifest, location_key
from street2vec.encoder import Encoder
from street2vec.synth import read_ground_truth


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--workspace", default="demo_workspace")
    args = parser.parse_args()
    ckpt = os.path.join(args.workspace, "demo_model.ckpt")
    if not os.path.exists(ckpt):
        subprocess.run([sys.executable, os.path.join(os.path.dirname(__file__), "03_train_encoder.py"),
                        "--workspace", args.workspace], check=True)

    corpus = os.path.join(args.workspace, "corpus")
    records = load_manifest(os.path.join(corpus, "manifest.jsonl")).records
    stack = PanoramaStack.open(records, os.path.join(args.workspace, "panoramas.npy"))
    encoder = Encoder.from_checkpoint(ckpt)

    print(f"embedding {len(records)} panoramas ...")
    store = embed_records(records, encoder, loader=stack.for_record).store
    result = change_map(store, 2008, 2018)
    csv_path = os.path.join(args.workspace, "changes.csv")
    write_changes_csv(csv_path, result.records)

    truth = {location_key(t.lat, t.lon): t for t in
             read_ground_truth(os.path.join(corpus, "ground_truth.csv"))}
    ranked = sorted(result.records, key=lambda r: r.d_cos, reverse=True)
    print(f"\n{len(result.records)} locations mapped; top and bottom five by change:")
    print(f"{'d_cos':>8}  {'class':>5}  {'in zone':>7}")
    for rec in ranked[:5]:
        t = truth[rec.key]
        print(f"{rec.d_cos:8.4f}  {t.class_label:>5}  {str(t.in_zone):>7}")
    print("     ...")
    for rec in ranked[-5:]:
        t = truth[rec.key]
        print(f"{rec.d_cos:8.4f}  {t.class_label:>5}  {str(t.in_zone):>7}")
    print(f"\nchange map: {csv_path}")


if __name__ == "__main__":
    main()
