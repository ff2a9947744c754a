"""Generate a small synthetic corpus and look at what it contains.

The generator lays locations on a grid, places redevelopment zones where
structural change is more likely, renders four-heading captures for each
(location, year), and writes the ground-truth change class per location.

    python demos/01_synthetic_corpus.py [--workspace DIR]
"""

import argparse
import os

import numpy as np

from street2vec.corpus import load_manifest
from street2vec.imaging import load_image, save_image
from street2vec.synth import SynthConfig, generate_corpus, read_ground_truth

CLASS_NAMES = {
    1: "minimal irrelevant",
    2: "noticeable irrelevant",
    3: "minor structural",
    4: "major structural",
    5: "anomalous",
}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--workspace", default="demo_workspace")
    args = parser.parse_args()
    out = os.path.join(args.workspace, "corpus")

    config = SynthConfig(locations=60, years=(2008, 2018), zones=2, seed=7,
                         anomaly_rate=0.05)
    if not os.path.exists(os.path.join(out, "manifest.jsonl")):
        print(f"generating {config.locations} locations x {config.years} ...")
        generate_corpus(config, out, workers=2)

    result = load_manifest(os.path.join(out, "manifest.jsonl"))
    print(f"manifest: {len(result.records)} records "
          f"({len(result.incomplete_records)} incomplete, {len(result.skipped)} skipped)")

    truth = read_ground_truth(os.path.join(out, "ground_truth.csv"))
    print("\nground-truth change classes (first vs last year):")
    for label in range(1, 6):
        n = sum(t.class_label == label for t in truth)
        in_zone = sum(t.class_label == label and t.in_zone for t in truth)
        print(f"  class {label} ({CLASS_NAMES[label]:<22}): {n:3d} locations, {in_zone} in zones")

    # contact sheet: the 2008 and 2018 heading-0 images of four locations,
    # one per class 1..4 when available
    picks = {}
    for t in truth:
        picks.setdefault(t.class_label, t.location_id)
    tiles = []
    for label in (1, 2, 3, 4):
        if label not in picks:
            continue
        loc = picks[label]
        row = []
        for year in (2008, 2018):
            path = os.path.join(out, "images", f"loc{loc:05d}_y{year}_000.png")
            row.append(load_image(path))
        tiles.append(np.concatenate(row, axis=1))
    if tiles:
        sheet = np.concatenate(tiles, axis=0)
        sheet_path = os.path.join(args.workspace, "corpus_contact_sheet.png")
        save_image(sheet_path, sheet)
        print(f"\ncontact sheet (rows = class 1..4, columns = 2008 | 2018): {sheet_path}")


if __name__ == "__main__":
    main()
