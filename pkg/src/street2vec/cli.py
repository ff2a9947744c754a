"""Multi-command pipeline entry point.

Commands cover the full run: ``synth`` (generate a labeled corpus),
``train``, ``embed``, ``change``, ``aggregate``, ``eval``, ``reduce``.
Every command writes a ``run.json`` sidecar with the fully resolved
configuration next to its outputs, so any artifact can be regenerated from
its directory alone.

Exit codes: 0 success, 1 runtime/numerical failure, 2 usage or
configuration error. All randomness flows from one ``--seed`` through named
substreams, so reruns with identical inputs are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .errors import ConfigError, Street2VecError


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _merge(defaults: dict, config_file: dict, flag_values: dict) -> dict:
    merged = dict(defaults)
    for key, value in config_file.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r} (expected one of {sorted(defaults)})")
        merged[key] = value
    for key, value in flag_values.items():
        if value is not None:
            merged[key] = value
    return merged


def _write_run_json(out_dir, command: str, merged: dict, inputs: dict) -> None:
    doc = {
        "command": command,
        "package_version": __version__,
        "config": merged,
        "inputs": {k: os.path.abspath(os.fspath(v)) for k, v in inputs.items() if v is not None},
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_int_list(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError as exc:
        raise ConfigError(f"cannot parse {what} from {text!r}") from exc


def _parse_float_list(text: str, what: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError as exc:
        raise ConfigError(f"cannot parse {what} from {text!r}") from exc


def _apply_threads(threads: int | None) -> int:
    """Cap BLAS pools and return the worker count for file-level parallelism."""
    if threads is None:
        return min(2, os.cpu_count() or 1)
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=threads)
    except ImportError:
        print("threadpoolctl unavailable; --threads caps file workers only", file=sys.stderr)
    return threads


def _build_stack(records, cache_path, workers):
    from .corpus import PanoramaStack

    complete = [r for r in records if r.complete]
    if cache_path and os.path.exists(cache_path):
        return PanoramaStack.open(complete, cache_path)
    return PanoramaStack.build(complete, path=cache_path, workers=workers)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    from .synth import SynthConfig, generate_corpus

    defaults = {
        "locations": None, "years": "2008,2018", "zones": 2, "seed": 0,
        "zone_fraction": 0.25, "p_change_in": 0.6, "p_change_out": 0.1,
        "p_minor": 0.5, "anomaly_rate": 0.02, "season_change_prob": 2.0 / 3.0,
        "occluder_churn_prob": 0.5, "class_mix": None, "compress_level": 1,
    }
    flags = {k: getattr(args, k) for k in defaults}
    merged = _merge(defaults, _load_config_file(args.config), flags)
    if merged["locations"] is None:
        raise ConfigError("--locations is required")
    mix = merged["class_mix"]
    if isinstance(mix, str):
        mix = _parse_float_list(mix, "--class-mix")
    config = SynthConfig(
        locations=int(merged["locations"]),
        years=_parse_int_list(merged["years"], "--years"),
        zones=int(merged["zones"]),
        seed=int(merged["seed"]),
        zone_fraction=float(merged["zone_fraction"]),
        p_structural_in=float(merged["p_change_in"]),
        p_structural_out=float(merged["p_change_out"]),
        p_minor=float(merged["p_minor"]),
        anomaly_rate=float(merged["anomaly_rate"]),
        season_change_prob=float(merged["season_change_prob"]),
        occluder_churn_prob=float(merged["occluder_churn_prob"]),
        class_mix=tuple(mix) if mix is not None else None,
        compress_level=int(merged["compress_level"]),
    )
    config.validate()
    workers = _apply_threads(args.threads)
    result = generate_corpus(config, args.out, workers=workers)
    merged["class_mix"] = list(mix) if mix is not None else None
    _write_run_json(args.out, "synth", merged, {})
    counts = " ".join(f"{c}:{n}" for c, n in sorted(result.class_counts.items()))
    print(f"wrote {result.n_locations} locations x {len(result.years)} years to {args.out}")
    print(f"class counts {counts}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    from .corpus import index_by_location, load_manifest
    from .sampler import JitterConfig
    from .trainer import TrainConfig, train

    defaults = {
        "batch_size": 48, "embedding_dim": 128, "lambda": 0.005,
        "learning_rate": 1e-3, "epochs": 1, "seed": 0, "checkpoint_every": 0,
        "channels": "16,32,64,128", "hidden_dim": 256, "grad_clip_norm": 5.0,
        "max_steps": None, "paper_scale": False,
    }
    flags = {k: getattr(args, k.replace("lambda", "lam")) if k == "lambda" else getattr(args, k)
             for k in defaults}
    merged = _merge(defaults, _load_config_file(args.config), flags)
    if merged["paper_scale"] and flags["embedding_dim"] is None:
        merged["embedding_dim"] = 1024
    config = TrainConfig(
        batch_size=int(merged["batch_size"]),
        embedding_dim=int(merged["embedding_dim"]),
        lam=float(merged["lambda"]),
        learning_rate=float(merged["learning_rate"]),
        epochs=int(merged["epochs"]),
        master_seed=int(merged["seed"]),
        checkpoint_every=int(merged["checkpoint_every"]),
        channels=_parse_int_list(merged["channels"], "--channels"),
        hidden_dim=int(merged["hidden_dim"]),
        grad_clip_norm=float(merged["grad_clip_norm"]),
        max_steps=int(merged["max_steps"]) if merged["max_steps"] is not None else None,
        jitter=JitterConfig(),
    )
    workers = _apply_threads(args.threads)
    loaded = load_manifest(args.manifest)
    if loaded.skipped:
        print(f"skipped {len(loaded.skipped)} malformed manifest lines", file=sys.stderr)
    incomplete = loaded.incomplete_records
    if incomplete:
        print(f"excluding {len(incomplete)} incomplete records from training", file=sys.stderr)
    os.makedirs(args.out, exist_ok=True)
    cache = args.cache or os.path.join(args.out, "panoramas.npy")
    stack = _build_stack(loaded.records, cache, workers)
    index = index_by_location([r for r in loaded.records if r.complete])
    checkpoint_path = os.path.join(args.out, "checkpoint.ckpt")
    log_path = os.path.join(args.out, "train_log.csv")
    outcome = train(index, stack.for_record, config,
                    checkpoint_path=checkpoint_path, log_path=log_path,
                    resume_from=args.resume, progress=args.progress)
    _write_run_json(args.out, "train", merged, {"manifest": args.manifest, "cache": cache})
    if outcome.log:
        last = outcome.log[-1]
        print(f"trained {outcome.step} steps; final loss {last.loss:.4f} "
              f"(invariance {last.invariance:.4f}, redundancy {last.redundancy:.4f})")
    else:
        print(f"trained {outcome.step} steps")
    print(f"checkpoint: {checkpoint_path}")
    return 0


# ---------------------------------------------------------------------------
# embed


def cmd_embed(args) -> int:
    from .change import embed_manifest
    from .corpus import load_manifest

    defaults = {"feature_source": "projector", "source_tag": "street2vec", "batch_size": 64}
    merged = _merge(defaults, _load_config_file(args.config),
                    {k: getattr(args, k) for k in defaults})
    workers = _apply_threads(args.threads)
    loader = None
    if args.cache:
        loaded = load_manifest(args.manifest)
        stack = _build_stack(loaded.records, args.cache, workers)
        loader = stack.for_record
    result = embed_manifest(
        args.manifest, args.checkpoint,
        feature_source=merged["feature_source"],
        source_tag=merged["source_tag"],
        batch_size=int(merged["batch_size"]),
        loader=loader,
    )
    os.makedirs(args.out, exist_ok=True)
    store_path = os.path.join(args.out, "embeddings.s2v")
    result.store.save(store_path)
    _write_run_json(args.out, "embed", merged,
                    {"manifest": args.manifest, "checkpoint": args.checkpoint})
    print(f"embedded {len(result.store)} panoramas (D={result.store.dim}, "
          f"source={result.store.source}) -> {store_path}")
    if result.skipped:
        print(f"skipped {len(result.skipped)} unreadable records", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# change


def cmd_change(args) -> int:
    from .change import EmbeddingStore, change_map, write_changes_csv

    store = EmbeddingStore.load(args.store)
    result = change_map(store, args.year_a, args.year_b)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "changes.csv")
    write_changes_csv(path, result.records)
    _write_run_json(args.out, "change",
                    {"year_a": args.year_a, "year_b": args.year_b}, {"store": args.store})
    print(f"{len(result.records)} locations -> {path}")
    print(f"missing a year: {result.n_missing_year}; pooled multi-capture: {result.n_pooled}")
    return 0


# ---------------------------------------------------------------------------
# aggregate


def cmd_aggregate(args) -> int:
    from .analytics import aggregate_areas, load_area_features, write_area_stats_csv, write_area_stats_geojson
    from .change import read_changes_csv

    changes = read_changes_csv(args.changes)
    features = load_area_features(args.areas)
    result = aggregate_areas(changes, features)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "area_stats.csv")
    geo_path = os.path.join(args.out, "area_stats.geojson")
    write_area_stats_csv(csv_path, result)
    write_area_stats_geojson(geo_path, result, features)
    _write_run_json(args.out, "aggregate", {},
                    {"changes": args.changes, "areas": args.areas})
    print(f"{len(result.stats)} areas with points -> {csv_path}")
    print(f"points outside all areas: {result.outside_count}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    from .analytics import (
        class_report, compare_sources, labels_from_ground_truth,
        load_area_features, zone_test,
    )
    from .change import read_changes_csv
    from .synth import read_ground_truth

    defaults = {"permutations": 10_000, "seed": 0, "source_tag": "street2vec",
                "baseline_tag": "baseline", "statistics": "median,q75"}
    merged = _merge(defaults, _load_config_file(args.config),
                    {k: getattr(args, k) for k in defaults})
    changes = read_changes_csv(args.changes)
    labels = labels_from_ground_truth(read_ground_truth(args.truth))
    report = class_report(changes, labels, source=merged["source_tag"])
    doc: dict = {"reports": {merged["source_tag"]: report.to_json_dict()}}

    if args.baseline_changes:
        from .errors import AnalyticsError

        base_changes = read_changes_csv(args.baseline_changes)
        base_report = class_report(base_changes, labels, source=merged["baseline_tag"])
        doc["reports"][merged["baseline_tag"]] = base_report.to_json_dict()
        try:
            doc["comparison"] = compare_sources(report, base_report).to_json_dict()
        except AnalyticsError as exc:
            doc["comparison"] = {"error": str(exc)}
            print(f"separation comparison unavailable: {exc}", file=sys.stderr)

    if args.zones:
        zones = load_area_features(args.zones)
        tests = []
        for statistic in str(merged["statistics"]).split(","):
            for method in ("mann_whitney_u", "permutation"):
                tests.append(
                    zone_test(changes, zones, statistic=statistic.strip(), method=method,
                              seed=int(merged["seed"]),
                              n_permutations=int(merged["permutations"])).to_json_dict()
                )
        doc["zone_tests"] = tests

    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "eval_report.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_run_json(args.out, "eval", merged, {
        "changes": args.changes, "truth": args.truth, "zones": args.zones,
        "baseline_changes": args.baseline_changes,
    })
    means = {c: s["mean"] for c, s in doc["reports"][merged["source_tag"]]["classes"].items()}
    print("class means: " + " ".join(
        f"{c}:{m:.4f}" if m is not None else f"{c}:-" for c, m in sorted(means.items())))
    if "comparison" in doc and "error" not in doc["comparison"]:
        cmp = doc["comparison"]
        print(f"separation {cmp['source_a']} {cmp['score_a']:.3f} vs "
              f"{cmp['source_b']} {cmp['score_b']:.3f}")
    for t in doc.get("zone_tests", []):
        print(f"zone {t['test']}/{t['statistic']}: p={t['p_value']:.3e} "
              f"(diff {t['observed_diff']:+.4f}, n={t['n_zone']}/{t['n_rest']})")
    print(f"report: {path}")
    return 0


# ---------------------------------------------------------------------------
# reduce


def cmd_reduce(args) -> int:
    from .change import EmbeddingStore
    from .reduce import (
        import_coords, isotropy_report, pca_project, reduced_coords,
        write_coords_csv, write_spectrum_json,
    )

    store = EmbeddingStore.load(args.store)
    os.makedirs(args.out, exist_ok=True)
    result = pca_project(store, k=args.k)
    write_spectrum_json(os.path.join(args.out, "spectrum.json"), result)
    if args.coords:
        outcome = import_coords(args.coords, store)
        coords = outcome.coords
        if outcome.unmatched_file_ids:
            print(f"{len(outcome.unmatched_file_ids)} imported ids not in store", file=sys.stderr)
        if outcome.unmatched_store_ids:
            print(f"{len(outcome.unmatched_store_ids)} store rows without coords", file=sys.stderr)
    else:
        coords = reduced_coords(store, result)
    write_coords_csv(os.path.join(args.out, "coords.csv"), coords)
    iso = isotropy_report(store)
    _write_run_json(args.out, "reduce", {"k": args.k},
                    {"store": args.store, "coords": args.coords})
    print(f"spectrum + {coords.reducer} coords for {len(store)} embeddings -> {args.out}")
    print(f"isotropy: l1/D={iso.fraction_1:.5f} l2/D={iso.fraction_2:.5f} (1/D={1 / iso.dim:.5f})")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="street2vec",
        description="Self-supervised change detection for temporal street panoramas.",
    )
    parser.add_argument("--version", action="version", version=f"street2vec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_seed=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--threads", type=int, help="cap worker/BLAS thread counts")
        if needs_seed:
            p.add_argument("--seed", type=int, help="master seed (default 0)")

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    common(p)
    p.add_argument("--locations", type=int)
    p.add_argument("--years", help="comma-separated, e.g. 2008,2018")
    p.add_argument("--zones", type=int)
    p.add_argument("--zone-fraction", dest="zone_fraction", type=float)
    p.add_argument("--p-change-in", dest="p_change_in", type=float)
    p.add_argument("--p-change-out", dest="p_change_out", type=float)
    p.add_argument("--p-minor", dest="p_minor", type=float)
    p.add_argument("--anomaly-rate", dest="anomaly_rate", type=float)
    p.add_argument("--season-change-prob", dest="season_change_prob", type=float)
    p.add_argument("--occluder-churn-prob", dest="occluder_churn_prob", type=float)
    p.add_argument("--class-mix", dest="class_mix",
                   help="5 comma-separated weights; overrides the zone process")
    p.add_argument("--compress-level", dest="compress_level", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the encoder on a corpus")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--channels", help="comma-separated backbone plan, e.g. 16,32,64,128")
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--grad-clip-norm", dest="grad_clip_norm", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--paper-scale", dest="paper_scale", action="store_true", default=None,
                   help="use the 1024-dim embedding configuration")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--cache", help="panorama cache .npy (default: <out>/panoramas.npy)")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a corpus with a trained checkpoint")
    common(p, needs_seed=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--feature-source", dest="feature_source", choices=["backbone", "projector"])
    p.add_argument("--source-tag", dest="source_tag", choices=["street2vec", "baseline", "imported"])
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--cache", help="reuse a panorama cache .npy")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("change", help="per-location cosine change between two years")
    common(p, needs_seed=False)
    p.add_argument("--store", required=True)
    p.add_argument("--year-a", dest="year_a", type=int, required=True)
    p.add_argument("--year-b", dest="year_b", type=int, required=True)
    p.set_defaults(func=cmd_change)

    p = sub.add_parser("aggregate", help="area-level statistics over polygons")
    common(p, needs_seed=False)
    p.add_argument("--changes", required=True)
    p.add_argument("--areas", required=True, help="GeoJSON FeatureCollection")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("eval", help="class report, zone tests, baseline comparison")
    common(p)
    p.add_argument("--changes", required=True)
    p.add_argument("--truth", required=True, help="ground truth CSV")
    p.add_argument("--zones", help="zone GeoJSON for significance tests")
    p.add_argument("--baseline-changes", dest="baseline_changes")
    p.add_argument("--source-tag", dest="source_tag")
    p.add_argument("--baseline-tag", dest="baseline_tag")
    p.add_argument("--permutations", type=int)
    p.add_argument("--statistics", help="comma list from {median,q75}")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reduce", help="PCA spectrum, isotropy, 2-D coordinates")
    common(p, needs_seed=False)
    p.add_argument("--store", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--coords", help="import external pano_id,u,v coordinates")
    p.set_defaults(func=cmd_reduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Street2VecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # numerical or unexpected failure
        print(f"unexpected failure: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
