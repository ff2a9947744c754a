"""Embedding geometry: eigenvalue spectrum, isotropy, and 2-D coordinates.

A well-trained redundancy-reduction embedding has a nearly flat correlation
spectrum (every eigenvalue fraction close to 1/D), which is exactly why a
linear projection carries little information and a nonlinear reducer is
used for maps. This demo prints the spectrum head, the isotropy fractions,
and writes circularly colored 2-D coordinates.

    python demos/07_embedding_geometry.py [--workspace DIR]
"""

import argparse
import os
import subprocess
import sys

import numpy as np

from street2vec.change import embed_records
from street2vec.corpus import PanoramaStack, load_manifest
from street2vec.encoder import Encoder
from street2vec.reduce import (
    isotropy_report,
    pca_project,
    reduced_coords,
    write_coords_csv,
    write_spectrum_json,
)


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
    store = embed_records(records, encoder, loader=stack.for_record).store

    result = pca_project(store, k=2)
    d = result.eigenvalues.size
    print(f"correlation spectrum over {len(store)} embeddings (D={d}):")
    head = ", ".join(f"{v:.3f}" for v in result.eigenvalues[:6])
    print(f"  top eigenvalues: {head}, ...")
    print(f"  flat-spectrum reference: every eigenvalue 1.0 (fraction 1/D = {1/d:.4f})")

    iso = isotropy_report(store)
    print(f"  isotropy fractions: l1/D = {iso.fraction_1:.4f}, l2/D = {iso.fraction_2:.4f}")

    coords = reduced_coords(store, result)
    coords_path = os.path.join(args.workspace, "coords.csv")
    spectrum_path = os.path.join(args.workspace, "spectrum.json")
    write_coords_csv(coords_path, coords)
    write_spectrum_json(spectrum_path, result)

    spread = np.ptp(coords.coords, axis=0)
    print(f"\n2-D projection spread: u {spread[0]:.2f}, v {spread[1]:.2f}")
    print(f"coordinates (with circular color angles): {coords_path}")
    print(f"spectrum: {spectrum_path}")
    print("externally computed 2-D coordinates can replace PCA via "
          "`street2vec reduce --coords FILE`")


if __name__ == "__main__":
    main()
