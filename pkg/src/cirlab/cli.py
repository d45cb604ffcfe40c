"""``cirlab`` command line: synthesis stages, training, evaluation and the token ablation.

Exit codes: 0 success, 1 usage error, 2 partial failure (some items errored), 3 fatal.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from cirlab import config as cfgmod
from cirlab.config import RunConfig
from cirlab.errors import CirError, InvalidRecord, MissingInput
from cirlab.evaluation import LOADERS, MetricsReport, evaluate, format_table
from cirlab.filtering import filter_dataset
from cirlab.io import (FORMAT_VERSION, config_hash, read_embeddings, read_json, read_records,
                       stage_seed, write_embeddings, write_json, write_records)
from cirlab.mining import ImagePair, mine_pairs, validate_subgroup
from cirlab.model import ToyEncoders, encoders_from_spec, load_checkpoint, network_from_checkpoint
from cirlab.providers import Gateway, HTTPProvider, ResponseCache
from cirlab.synthesis import SyntheticTriplet, caption_images, synthesize_triplets
from cirlab.training import TripletSet, train

log = logging.getLogger("cirlab")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- shared helpers ---------------------------------------------------------

def _snapshot(cfg: RunConfig, command: str) -> None:
    """Resolved config written next to the outputs of every run."""
    resolved = cfg.to_dict()
    no_paths = {k: v for k, v in resolved.items() if k != "paths"}
    write_json(cfg.paths.out(f"{command}.config.json"),
               {"command": command, "config": resolved, "config_hash": config_hash(no_paths)})


def _gateway(cfg: RunConfig) -> Gateway:
    p = cfg.providers
    cache = ResponseCache(cfg.paths.cache) if cfg.paths.cache else ResponseCache(
        cfg.paths.out("cache"))
    configs = {"caption": p.caption, "instruction": p.instruction, "embedding": p.embedding}
    if p.mode == "mock":
        return Gateway.mock(cache=cache, embed_dim=p.mock_embed_dim, configs=configs,
                            max_workers=p.max_workers)
    return Gateway(HTTPProvider(p.caption), HTTPProvider(p.instruction),
                   HTTPProvider(p.embedding), cache=cache, configs=configs,
                   max_workers=p.max_workers)


def _log_provider_stats(gw: Gateway) -> None:
    for kind, s in gw.stats.items():
        if s.calls or s.hits or s.errors:
            log.info("%s provider: %d calls, %d cache hits, %d errors", kind, s.calls, s.hits,
                     s.errors)
    log.info("provider calls: %d", gw.provider_calls)


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"no {what} given (set paths.{what})")
    path = Path(path)
    if not path.exists():
        raise MissingInput(path)
    return path


def _write_errors(cfg: RunConfig, stage: str, errors: list[dict], cfg_hash: str) -> None:
    path = cfg.paths.out(f"{stage}_errors.jsonl")
    if errors:
        write_records(path, errors, f"{stage}_errors", cfg_hash)
        log.warning("%s: %d item(s) failed, see %s", stage, len(errors), path)
    elif path.exists():
        path.unlink()


def _read_pairs(path) -> tuple[str, list[ImagePair]]:
    header, recs = read_records(path, kind="pairs")
    pairs = [ImagePair(r["reference_id"], r["target_id"], r.get("subgroup_seed_id"))
             for r in recs]
    return (header or {}).get("config_hash", ""), pairs


def _read_triplets(path, kind: str) -> tuple[str, list[SyntheticTriplet]]:
    header, recs = read_records(path, kind=kind)
    try:
        triplets = [SyntheticTriplet.from_record(r) for r in recs]
    except (KeyError, ValueError) as exc:
        raise InvalidRecord(f"{path}: {exc}") from exc
    return (header or {}).get("config_hash", ""), triplets


# --- syncir -------------------------------------------------------------------

def cmd_pairs(cfg: RunConfig) -> int:
    embeddings = read_embeddings(_need(cfg.paths.embeddings, "embeddings"))
    h = cfg.section_hash("miner")
    groups, pairs = mine_pairs(embeddings, cfg.miner)
    bad = [(g.seed_id, problems) for g in groups
           if (problems := validate_subgroup(g, embeddings, cfg.miner))]
    if bad:
        raise InvalidRecord(f"subgroup validation failed: {bad[:3]}")
    write_records(cfg.paths.out("subgroups.jsonl"),
                  ({"seed_id": g.seed_id, "member_ids": list(g.member_ids)} for g in groups),
                  "subgroups", h)
    write_records(cfg.paths.out("pairs.jsonl"), (dataclasses.asdict(p) for p in pairs), "pairs", h)
    log.info("pairs: %d images -> %d subgroups -> %d pairs", len(embeddings), len(groups),
             len(pairs))
    return EXIT_OK


def cmd_captions(cfg: RunConfig) -> int:
    pairs_hash, pairs = _read_pairs(_need(cfg.paths.out("pairs.jsonl"), "workdir"))
    h = config_hash({"upstream": pairs_hash, "caption": dataclasses.asdict(cfg.providers.caption),
                     "mode": cfg.providers.mode})
    gw = _gateway(cfg)
    ids = [i for p in pairs for i in (p.reference_id, p.target_id)]
    captions, errors = caption_images(ids, gw)
    write_records(cfg.paths.out("captions.jsonl"),
                  ({"image_id": k, "caption": captions[k]} for k in sorted(captions)),
                  "captions", h)
    _write_errors(cfg, "captions", [{"image_id": k, "error": v} for k, v in sorted(errors.items())],
                  h)
    _log_provider_stats(gw)
    log.info("captions: %d images captioned, %d failed", len(captions), len(errors))
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_queries(cfg: RunConfig) -> int:
    pairs_hash, pairs = _read_pairs(_need(cfg.paths.out("pairs.jsonl"), "workdir"))
    cap_header, cap_recs = read_records(_need(cfg.paths.out("captions.jsonl"), "workdir"),
                                        kind="captions")
    captions = {r["image_id"]: r["caption"] for r in cap_recs}
    h = config_hash({"upstream": [pairs_hash, (cap_header or {}).get("config_hash", "")],
                     "instruction": dataclasses.asdict(cfg.providers.instruction),
                     "mode": cfg.providers.mode})
    gw = _gateway(cfg)
    triplets, errors = synthesize_triplets(pairs, gw, captions)
    write_records(cfg.paths.out("triplets.jsonl"), (t.to_record() for t in triplets), "triplets",
                  h)
    _write_errors(cfg, "queries", errors, h)
    _log_provider_stats(gw)
    log.info("queries: %d triplets, %d failed", len(triplets), len(errors))
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_filter(cfg: RunConfig) -> int:
    source = cfg.paths.triplets or cfg.paths.out("triplets.jsonl")
    up_hash, triplets = _read_triplets(_need(source, "triplets"), "triplets")
    h = config_hash({"upstream": up_hash, "filter": dataclasses.asdict(cfg.filter),
                     "embedding": dataclasses.asdict(cfg.providers.embedding),
                     "mode": cfg.providers.mode})
    gw = _gateway(cfg)
    kept, report, decided = filter_dataset(triplets, cfg.filter, gw)
    write_records(cfg.paths.out("filtered.jsonl"), (t.to_record() for t in kept),
                  "filtered_triplets", h)
    write_records(cfg.paths.out("filter_decisions.jsonl"), (t.to_record() for t in decided),
                  "filter_decisions", h)
    report_dict = report.to_dict()
    write_json(cfg.paths.out("filter_report.json"),
               {"kind": "filter_report", "format_version": FORMAT_VERSION, "config_hash": h,
                "threshold": cfg.filter.similarity_threshold, **report_dict})
    _write_errors(cfg, "filter", report.errors, h)
    _log_provider_stats(gw)
    log.info("filter: kept %d of %d (%.1f%%), %d same-caption, %d low-similarity, %d errored",
             report.kept, report.total, 100 * report.kept_ratio, report.dropped_same_caption,
             report.dropped_low_similarity, report.errored)
    return EXIT_PARTIAL if report.errored else EXIT_OK


# --- training / evaluation -----------------------------------------------------

def _stack(embeddings: dict) -> np.ndarray:
    return np.stack(list(embeddings.values())) if embeddings else np.zeros((0, 0))


def _encoders(cfg: RunConfig, d_img: int):
    if cfg.paths.encoders:
        spec = read_json(cfg.paths.encoders)
        enc = encoders_from_spec(spec)
        return enc, enc.spec()
    e = cfg.encoders
    enc = ToyEncoders(stage_seed(cfg.seed, "encoders"), d_img, e.d_token or d_img,
                      e.d_out or d_img, n_buckets=e.n_buckets)
    return enc, enc.spec()


def _train_inputs(cfg: RunConfig):
    unlabeled_map = read_embeddings(_need(cfg.paths.embeddings, "embeddings"))
    source = cfg.paths.triplets or cfg.paths.out("filtered.jsonl")
    _, triplets = _read_triplets(_need(source, "triplets"), "filtered_triplets")
    images = (read_embeddings(_need(cfg.paths.triplet_embeddings, "triplet_embeddings"))
              if cfg.paths.triplet_embeddings else unlabeled_map)
    missing = sorted({i for t in triplets for i in (t.reference_id, t.target_id)} - set(images))
    if missing:
        raise InvalidRecord(f"no image features for triplet image(s) {missing[:5]}")
    unlabeled = _stack(unlabeled_map)
    d_img = unlabeled.shape[1] if len(unlabeled) else len(next(iter(images.values())))
    tset = TripletSet.from_triplets(triplets, images) if triplets else None
    return unlabeled, tset, d_img


def _run_training(cfg: RunConfig, unlabeled, tset, d_img, checkpoint: Path, history: Path):
    enc, spec = _encoders(cfg, d_img)
    if tset is None:
        if cfg.train.objective != "zscir":
            raise InvalidRecord("triplet file holds no kept triplets")
        tset = TripletSet(np.zeros((0, d_img)), np.zeros((0, d_img)), [])
    result = train(unlabeled, tset, enc, cfg.train, cfg.model, checkpoint_path=checkpoint,
                   history_path=history, encoder_spec=spec)
    if result.history:
        last = result.history[-1]
        log.info("train: step %d l_hybrid %.4f (l_zscir %.4f, l_triplet %.4f)", last["step"],
                 last["l_hybrid"], last["l_zscir"], last["l_triplet"])
    return result


def cmd_train(cfg: RunConfig) -> int:
    unlabeled, tset, d_img = _train_inputs(cfg)
    checkpoint = Path(cfg.paths.checkpoint or cfg.paths.out("checkpoint.pt"))
    _run_training(cfg, unlabeled, tset, d_img, checkpoint, cfg.paths.out("history.jsonl"))
    log.info("train: checkpoint written to %s", checkpoint)
    return EXIT_OK


def _eval_inputs(cfg: RunConfig):
    loader = LOADERS.get(cfg.paths.query_format)
    if loader is None:
        raise UsageError(f"unknown query_format {cfg.paths.query_format!r}; "
                         f"choose from {sorted(LOADERS)}")
    queries = loader(_need(cfg.paths.queries, "queries"))
    gallery = read_embeddings(_need(cfg.paths.gallery or cfg.paths.embeddings, "gallery"))
    refs = read_embeddings(_need(cfg.paths.references, "references")) if cfg.paths.references \
        else None
    return queries, gallery, refs


def _evaluate_checkpoint(cfg: RunConfig, path: Path, queries, gallery, refs) -> MetricsReport:
    payload = load_checkpoint(path)
    net = network_from_checkpoint(payload)
    enc = encoders_from_spec(payload["encoder_spec"])
    return evaluate(net, enc, queries, gallery, refs, cfg.eval)


def cmd_eval(cfg: RunConfig) -> int:
    checkpoint = _need(cfg.paths.checkpoint or cfg.paths.out("checkpoint.pt"), "checkpoint")
    queries, gallery, refs = _eval_inputs(cfg)
    report = _evaluate_checkpoint(cfg, checkpoint, queries, gallery, refs)
    h = config_hash({"eval": dataclasses.asdict(cfg.eval),
                     "checkpoint": load_checkpoint(checkpoint)["config_hash"]})
    write_json(cfg.paths.out("metrics.json"),
               {"kind": "metrics", "format_version": FORMAT_VERSION, "config_hash": h,
                **report.to_dict()})
    table = format_table([("model", report)], ks=cfg.eval.recall_ks)
    cfg.paths.out("metrics.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_ablate_tokens(cfg: RunConfig, ks: Sequence[int]) -> int:
    unlabeled, tset, d_img = _train_inputs(cfg)
    queries, gallery, refs = _eval_inputs(cfg)
    rows = []
    for k in ks:
        run = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, token_count=k))
        out = cfg.paths.out(f"ablation/k{k}")
        out.mkdir(parents=True, exist_ok=True)
        _run_training(run, unlabeled, tset, d_img, out / "checkpoint.pt", out / "history.jsonl")
        report = _evaluate_checkpoint(run, out / "checkpoint.pt", queries, gallery, refs)
        log.info("ablate-tokens: k=%d avg recall %.4f", k, report.avg_recall)
        rows.append((str(k), report))
    table = format_table(rows, label="k", ks=cfg.eval.recall_ks)
    h = cfg.section_hash("model", "train", "eval", ks=list(ks))
    write_json(cfg.paths.out("ablation.json"),
               {"kind": "token_ablation", "format_version": FORMAT_VERSION, "config_hash": h,
                "rows": [{"k": int(name), **rep.to_dict()} for name, rep in rows]})
    cfg.paths.out("ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


# --- fixtures ------------------------------------------------------------------

def cmd_make_fixture(args) -> int:
    from cirlab.toyworld import ToyWorldConfig, build_toy_world, planted_clusters
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.fixture == "clusters":
        embeddings, clusters = planted_clusters(args.n_clusters, seed=args.seed)
        h = config_hash({"fixture": "clusters", "n_clusters": args.n_clusters, "seed": args.seed})
        write_embeddings(out / "embeddings.jsonl", embeddings, "embeddings", h)
        # one query per cluster: first member -> second member, ranked within the cluster
        write_records(out / "queries.jsonl",
                      ({"reference_id": c[0], "query_text": "a similar photo",
                        "ground_truth_ids": [c[1]], "subset_ids": list(c)} for c in clusters),
                      "queries", h)
        log.info("clusters fixture: %d images in %d clusters -> %s", len(embeddings),
                 len(clusters), out)
        return EXIT_OK
    world = build_toy_world(ToyWorldConfig(seed=args.seed, triplet_shift=args.triplet_shift,
                                           duplicate_noise=args.duplicate_noise))
    h = config_hash({"fixture": "toyworld", **dataclasses.asdict(world.config)})
    write_embeddings(out / "unlabeled.jsonl",
                     {f"u{i:05d}": v for i, v in enumerate(world.unlabeled)}, "embeddings", h)
    write_embeddings(out / "triplet_images.jsonl", world.triplet_images, "embeddings", h)
    write_records(out / "triplets.jsonl", (t.to_record() for t in world.triplets),
                  "filtered_triplets", h)
    write_embeddings(out / "gallery.jsonl", world.eval_gallery, "embeddings", h)
    write_embeddings(out / "references.jsonl", world.eval_references, "embeddings", h)
    write_records(out / "queries.jsonl", (q.to_record() for q in world.eval_queries), "queries", h)
    write_json(out / "encoders.json", world.encoders.spec())
    log.info("toy world fixture -> %s", out)
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or YAML run config; flags override it")
    p.add_argument("--log-level", default="INFO")
    for spec in cfgmod.flag_specs():
        kw = {"dest": "set:" + spec.dotted, "default": argparse.SUPPRESS, "metavar": spec.kind.upper()}
        if spec.kind == "list":
            kw["nargs"] = "+"
        p.add_argument(f"--{spec.dotted}", **kw)
    p.add_argument("--workdir", dest="set:paths.workdir", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cirlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    syn = sub.add_parser("syncir", help="triplet synthesis stages")
    stages = syn.add_subparsers(dest="stage", required=True, parser_class=_Parser)
    for name, help_ in [("pairs", "mine subgroups and image pairs"),
                        ("captions", "caption every paired image"),
                        ("queries", "generate edit instructions -> triplets"),
                        ("filter", "semantic filter in language space")]:
        _add_run_flags(stages.add_parser(name, help=help_))

    _add_run_flags(sub.add_parser("train", help="train the mapping network"))
    _add_run_flags(sub.add_parser("eval", help="evaluate a checkpoint"))
    abl = sub.add_parser("ablate-tokens", help="train and evaluate per pseudo-token count")
    _add_run_flags(abl)
    abl.add_argument("--k", dest="k_list", type=int, nargs="+", default=[1, 2, 3, 4, 5, 6, 7, 8])

    fix = sub.add_parser("make-fixture", help="write synthetic input files")
    fix.add_argument("fixture", choices=["clusters", "toyworld"])
    fix.add_argument("--out-dir", required=True)
    fix.add_argument("--seed", type=int, default=0)
    fix.add_argument("--n-clusters", type=int, default=20)
    fix.add_argument("--triplet-shift", type=float, default=None)
    fix.add_argument("--duplicate-noise", type=float, default=None)
    fix.add_argument("--log-level", default="INFO")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    specs = {s.dotted: s for s in cfgmod.flag_specs()}
    overrides = {}
    for key, raw in vars(args).items():
        if key.startswith("set:"):
            dotted = key[4:]
            overrides[dotted] = cfgmod.parse_flag_value(specs[dotted], raw)
    if args.config and not Path(args.config).exists():
        raise UsageError(f"config file not found: {args.config}")
    return cfgmod.resolve(args.config, overrides)


COMMANDS = {"pairs": cmd_pairs, "captions": cmd_captions, "queries": cmd_queries,
            "filter": cmd_filter, "train": cmd_train, "eval": cmd_eval}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        if args.command == "make-fixture":
            return cmd_make_fixture(args)
        try:
            cfg = resolve_config(args)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from exc
        name = args.stage if args.command == "syncir" else args.command
        command = f"syncir-{name}" if args.command == "syncir" else name
        Path(cfg.paths.workdir).mkdir(parents=True, exist_ok=True)
        _snapshot(cfg, command)
        if args.command == "ablate-tokens":
            return cmd_ablate_tokens(cfg, args.k_list)
        return COMMANDS[name](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingInput as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    except CirError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FATAL
    except Exception:  # noqa: BLE001 - last-resort fatal
        log.exception("fatal error")
        return EXIT_FATAL


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
