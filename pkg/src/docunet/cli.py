"""Command-line interface.

    docunet train --config cfg.txt [--seed 3] [--out runs/exp1]
    docunet eval --checkpoint best.dunc --data dev.json [--out preds.json]
    docunet ablate --config cfg.txt --seeds 0,1,2,3,4
    docunet gradcheck
    docunet gen-synthetic --out corpus.json --seed 0
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .config import TrainConfig, load_config
from .data import (
    SyntheticWorldConfig,
    evaluate,
    generate_synthetic,
    load_docred,
    load_relation_map,
    relation_ids,
    train_fact_set,
    write_docred,
)
from .errors import DocuNetError
from .train import (
    ABLATION_VARIANTS,
    ablate,
    build_corpus,
    format_ablation_table,
    model_from_checkpoint,
    train,
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="docunet",
        description="Relation extraction over an entity-pair matrix",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None, help="run directory")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a data file")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--rel-info", default=None)
    p_eval.add_argument("--out", default=None, help="predictions JSON path")

    p_abl = sub.add_parser("ablate", help="run the ablation grid")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--seeds", default="0,1,2,3,4")
    p_abl.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p_abl.add_argument("--out", default=None)

    sub.add_parser("gradcheck", help="finite-difference gradient suite")

    p_gen = sub.add_parser("gen-synthetic", help="write a synthetic corpus")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--docs", type=int, default=250)
    p_gen.add_argument("--cities", type=int, default=4)
    p_gen.add_argument("--regions", type=int, default=3)
    p_gen.add_argument("--countries", type=int, default=3)
    p_gen.add_argument("--rel-info-out", default=None)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except DocuNetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "train":
        return _cmd_train(args)
    if args.command == "eval":
        return _cmd_eval(args)
    if args.command == "ablate":
        return _cmd_ablate(args)
    if args.command == "gradcheck":
        return _cmd_gradcheck()
    if args.command == "gen-synthetic":
        return _cmd_gen(args)
    raise AssertionError(args.command)


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    run_dir = args.out or os.path.join(cfg.out_dir, f"seed{cfg.seed}")
    os.makedirs(run_dir, exist_ok=True)
    train_docs, dev_docs, _ = build_corpus(cfg)
    result = train(cfg, train_docs, dev_docs, run_dir=run_dir)
    print(f"finished: best dev F1 {result.best_f1:.4f} "
          f"(epoch {result.best_epoch}); artifacts in {run_dir}")
    return 0


def _cmd_eval(args) -> int:
    model, _, cfg, _, _ = model_from_checkpoint(args.checkpoint)
    rel_info_path = args.rel_info or cfg.rel_info_path
    if rel_info_path:
        rel_map = load_relation_map(rel_info_path)
    else:
        rel_map = relation_ids(SyntheticWorldConfig())
    docs = load_docred(args.data, rel_map)
    preds = model.predict(docs)
    report = evaluate(preds, docs, train_facts=None)
    print(report.row())
    for label, f1 in report.bucket_f1.items():
        print(f"  entities {label}: F1 {f1:.4f} "
              f"({report.bucket_support[label]} docs)")
    if args.out:
        id_to_rel = {i: r for r, i in rel_map.items()}
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(
                [{"title": t, "h_idx": h, "t_idx": o, "r": id_to_rel.get(r, r)}
                 for t, h, o, r in preds],
                fh, indent=1)
        print(f"wrote {len(preds)} predictions to {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    variants = tuple(v for v in args.variants.split(",") if v)
    run_dir = args.out
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
    table = ablate(cfg, seeds, variants=variants, run_dir=run_dir)
    print(format_ablation_table(table))
    return 0


def _cmd_gradcheck() -> int:
    from .acceptance import gradient_suite

    failures = 0
    for name, err, bound in gradient_suite():
        ok = err <= bound
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} {name}: "
              f"max rel err {err:.3e} (bound {bound:.0e})")
    return 1 if failures else 0


def _cmd_gen(args) -> int:
    world = SyntheticWorldConfig(
        num_docs=args.docs, num_cities=args.cities, num_regions=args.regions,
        num_countries=args.countries, seed=args.seed,
    )
    docs = generate_synthetic(world)
    id_to_rel = {i: r for i, r in enumerate(world.relations)}
    write_docred(docs, args.out, id_to_rel)
    print(f"wrote {len(docs)} documents to {args.out}")
    if args.rel_info_out:
        with open(args.rel_info_out, "w", encoding="utf-8") as fh:
            json.dump({r: i for i, r in id_to_rel.items()}, fh)
        print(f"wrote relation map to {args.rel_info_out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
