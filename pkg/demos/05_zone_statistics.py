"""Area aggregation and zone-vs-rest significance on the demo change map.

Zones are the redevelopment rectangles the generator planted; change inside
them should be measurably higher. Requires demo 04's change map (runs it
implicitly if missing).

    python demos/05_zone_statistics.py [--workspace DIR]
"""

import argparse
import os
import subprocess
import sys

from street2vec.analytics import aggregate_areas, load_area_features, zone_test
from street2vec.change import read_changes_csv


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--workspace", default="demo_workspace")
    args = parser.parse_args()
    changes_path = os.path.join(args.workspace, "changes.csv")
    if not os.path.exists(changes_path):
        subprocess.run([sys.executable, os.path.join(os.path.dirname(__file__), "04_change_map.py"),
                        "--workspace", args.workspace], check=True)

    changes = read_changes_csv(changes_path)
    zones = load_area_features(os.path.join(args.workspace, "corpus", "zones.geojson"))

    result = aggregate_areas(changes, zones)
    print("per-zone statistics (points assigned by even-odd point-in-polygon):")
    print(f"{'zone':>6} {'n':>4} {'mean':>8} {'median':>8} {'q75':>8}")
    for s in result.stats:
        print(f"{s.area_id:>6} {s.n_points:>4} {s.mean:>8.4f} {s.median:>8.4f} {s.q75:>8.4f}")
    print(f"points outside all zones: {result.outside_count}")

    print("\nzone-vs-rest tests on point-level change:")
    for statistic in ("median", "q75"):
        for method in ("mann_whitney_u", "permutation"):
            res = zone_test(changes, zones, statistic=statistic, method=method,
                            seed=0, n_permutations=5000)
            extra = "exact" if res.exact else (f"{res.n_permutations} perms"
                                               if res.n_permutations else "normal approx")
            print(f"  {method:>15} / {statistic:<6}: diff {res.observed_diff:+.4f}"
                  f"  p = {res.p_value:.4g}  ({extra}; n {res.n_zone}/{res.n_rest})")


if __name__ == "__main__":
    main()
