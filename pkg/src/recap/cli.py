"""Command-line entry point covering the full pipeline.

Commands: index-build, retrieve, dedup-report, interleave-build, train,
caption, eval, ablate. Exit codes: 0 ok, 1 runtime failure, 2 input/format
error. Failures print {"error": code, "detail": str} on stderr. Output
artifacts embed the fully resolved run configuration and tool version;
report paths also render matplotlib figures next to the JSON output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, corpus as corpus_mod, formats, report
from .errors import ConfigError, InputFormatError, RecapError
from .index import Index, IndexConfig, build, normalize
from .metrics import EvalPair, bleu4, cider_d
from .model import (
    CaptionModel,
    ModelConfig,
    TrainPair,
    beam_search,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .retriever import FilterPolicy, RetrievalQuery, apply_query_dropout, retrieve_filtered
from .model import detokenize, tokenize
from .experiments import (
    make_duplicate_corpus,
    make_suffix_corpus,
    run_filtering_ablation,
    run_prepend_ablation,
)

DEFAULT_RUN_CONFIG = {
    "index": {"mode": "exact", "dim": 64, "nlist": 16, "nprobe": 4,
              "kmeans_iters": 20, "seed": 0},
    "filter": {"drop_same_image": True, "drop_same_caption": True,
               "near_duplicate_threshold": None},
    "model": ModelConfig().to_dict(),
    "training": {"steps": 500, "lr": 1e-3, "batch_size": 8, "policy": "finetune",
                 "k_neighbors": 2, "seed": 0},
    "interleave": {"band_low": 0.4, "band_high": 0.6, "shots": 4,
                   "widen_step": 0.05, "widen_limit": [0.2, 0.8], "synth_seed": 0},
    "beam": {"beam": 3, "max_len": 10},
    "seed": 0,
}


def load_run_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_RUN_CONFIG))
    if path is None:
        return cfg
    try:
        with open(path, "r", encoding="utf-8") as f:
            user = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    for key, value in user.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict):
            for sub, sval in value.items():
                if sub not in cfg[key]:
                    raise ConfigError(f"unknown config key {key}.{sub}")
                cfg[key][sub] = sval
        else:
            cfg[key] = value
    return cfg


def provenance(cfg: dict) -> dict:
    return {"tool_version": __version__, "run_config": cfg}


def write_json(path: str, payload: dict) -> None:
    formats.atomic_write_text(path, json.dumps(payload, indent=2, ensure_ascii=False) + "\n")


def _read_query_embedding(spec: str, dim: int) -> np.ndarray:
    """Either a hex-encoded f32 LE vector or a path to a single-row file."""
    if os.path.exists(spec):
        mat = formats.read_embeddings(spec)
        return normalize(mat[0])
    try:
        raw = bytes.fromhex(spec)
    except ValueError as e:
        raise ConfigError(f"query embedding is neither a file nor hex: {spec!r}") from e
    vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if vec.size != dim:
        raise ConfigError(f"hex query has dim {vec.size}, index dim {dim}")
    return normalize(vec)


# --- command implementations -------------------------------------------------


def cmd_index_build(args, cfg) -> int:
    c = corpus_mod.ingest_manifest(args.embeddings, args.metadata)
    icfg = IndexConfig(mode=args.mode, dim=c.dim, nlist=args.nlist,
                       nprobe=args.nprobe, seed=args.seed,
                       kmeans_iters=cfg["index"]["kmeans_iters"])
    idx = build(c.records, icfg)
    idx.save(args.out)
    print(json.dumps({"count": len(idx), "dim": idx.dim, "mode": icfg.mode,
                      **provenance(cfg)}))
    return 0


def cmd_retrieve(args, cfg) -> int:
    idx = Index.load(args.index)
    q = RetrievalQuery(
        image_embedding=_read_query_embedding(args.query_embedding, idx.dim),
        image_id=args.gt_id,
        ground_truth_caption=args.gt_caption,
    )
    policy = FilterPolicy.none() if args.no_filter else FilterPolicy(
        near_duplicate_threshold=cfg["filter"]["near_duplicate_threshold"],
    )
    result = retrieve_filtered(idx, q, args.k, policy)
    payload = result.to_dict(args.gt_id)
    if args.query_dropout is not None:
        toks = [tokenize(n["caption"]) for n in payload["neighbors"]]
        dropped = apply_query_dropout(result, toks, args.query_dropout, args.seed)
        for n, t in zip(payload["neighbors"], dropped):
            n["caption"] = detokenize(t)
    payload.update(provenance(cfg))
    print(json.dumps(payload, ensure_ascii=False))
    return 0


def cmd_dedup_report(args, cfg) -> int:
    c = corpus_mod.ingest_manifest(args.embeddings, args.metadata)
    rep = corpus_mod.duplicate_caption_ratio(c)
    payload = {**rep.to_dict(), **provenance(cfg)}
    if args.out:
        write_json(args.out, payload)
        report.plot_dedup(payload["top_groups"],
                          os.path.splitext(args.out)[0] + ".png")
    print(json.dumps(payload, ensure_ascii=False))
    return 0


def cmd_interleave_build(args, cfg) -> int:
    c = corpus_mod.ingest_manifest(args.embeddings, args.metadata)
    il = cfg["interleave"]
    samples = corpus_mod.build_interleaved(
        c, band_low=args.band_low, band_high=args.band_high, shots=args.shots,
        widen_step=il["widen_step"], widen_limit=tuple(il["widen_limit"]),
        synth_seed=il["synth_seed"],
    )
    corpus_mod.write_interleaved(samples, args.out)
    print(json.dumps({"samples": len(samples), "skipped": len(c) - len(samples),
                      **provenance(cfg)}))
    return 0


def cmd_train(args, cfg) -> int:
    c = corpus_mod.ingest_manifest(args.embeddings, args.metadata)
    mcfg = ModelConfig(**{**cfg["model"], "image_dim": c.dim, "seed": args.seed})
    model = CaptionModel(mcfg)
    pairs = [TrainPair(r.embedding, r.caption, r.id) for r in c.records]
    retriever_fn = None
    if args.index:
        from .experiments import make_retriever_fn

        idx = Index.load(args.index)
        retriever_fn = make_retriever_fn(idx, k=cfg["training"]["k_neighbors"])
    log_path = os.path.splitext(args.out)[0] + ".log.jsonl"
    result = train(model, pairs, retriever_fn=retriever_fn, policy=args.policy,
                   steps=args.steps, lr=args.lr, seed=args.seed,
                   batch_size=cfg["training"]["batch_size"], log_path=log_path)
    save_checkpoint(model, args.out, step=result.steps)
    report.plot_loss_curve(result.losses, os.path.splitext(args.out)[0] + ".loss.png")
    print(json.dumps({"steps": result.steps, "final_loss": result.losses[-1],
                      "checkpoint": args.out, **provenance(cfg)}))
    return 0


def cmd_caption(args, cfg) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    q = _read_query_embedding(args.query_embedding, model.config.image_dim)
    caps = None
    if args.index:
        idx = Index.load(args.index)
        result = retrieve_filtered(idx, RetrievalQuery(image_embedding=q),
                                   model.config.k_neighbors, FilterPolicy())
        caps = [n.caption for n in result.neighbors]
    text = beam_search(model, q, neighbor_captions=caps,
                       beam=args.beam, max_len=args.max_len)
    print(json.dumps({"caption": text, **provenance(cfg)}, ensure_ascii=False))
    return 0


def cmd_eval(args, cfg) -> int:
    pairs = []
    with open(args.pairs, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            pairs.append(EvalPair(candidate=row["candidate"],
                                  references=tuple(row["references"])))
    payload = {"n": len(pairs), "bleu4": bleu4(pairs), "cider_d": cider_d(pairs),
               **provenance(cfg)}
    if args.out:
        write_json(args.out, payload)
    print(json.dumps(payload))
    return 0


def _format_table(arms: dict) -> str:
    cols = ["arm", "heldout_ce", "exact_copy_rate", "bleu4", "cider_d"]
    rows = [cols] + [
        [name] + [f"{arms[name][c]:.4f}" for c in cols[1:]] for name in arms
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows
    )


def cmd_ablate(args, cfg) -> int:
    results: dict[str, dict] = {}
    seeds = [args.seed + i for i in range(args.n_seeds)]
    for seed in seeds:
        per_seed: dict[str, dict] = {}
        if args.experiment in ("filtering", "all"):
            arms = run_filtering_ablation(seed=seed, steps=args.steps, lr=args.lr)
            per_seed.update({k: v.to_dict() for k, v in arms.items()})
        if args.experiment in ("prepend", "all"):
            arms = run_prepend_ablation(seed=seed, steps=args.steps, lr=args.lr)
            per_seed.update({k: v.to_dict() for k, v in arms.items()})
        results[str(seed)] = per_seed
    payload = {"experiment": args.experiment, "seeds": seeds,
               "results": results, **provenance(cfg)}
    write_json(args.out, payload)
    first = results[str(seeds[0])]
    report.plot_ablation(first, os.path.splitext(args.out)[0] + ".png")
    table = "\n\n".join(
        f"seed {s}\n{_format_table(results[s])}" for s in results
    )
    formats.atomic_write_text(os.path.splitext(args.out)[0] + ".txt", table + "\n")
    print(table)
    return 0


# --- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recap",
                                description="retrieval-augmented captioning toolkit")
    p.add_argument("--config", help="JSON run config; flags take precedence")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    ib = sub.add_parser("index-build", help="build a cosine k-NN index")
    ib.add_argument("--embeddings", required=True)
    ib.add_argument("--metadata", required=True)
    ib.add_argument("--out", required=True)
    ib.add_argument("--mode", choices=["exact", "ivf"], default="exact")
    ib.add_argument("--nlist", type=int, default=16)
    ib.add_argument("--nprobe", type=int, default=4)
    ib.add_argument("--seed", type=int, default=0)
    ib.set_defaults(fn=cmd_index_build)

    rt = sub.add_parser("retrieve", help="query an index with filtering")
    rt.add_argument("--index", required=True)
    rt.add_argument("--query-embedding", required=True,
                    help="hex f32 LE vector or an embeddings.bin with one row")
    rt.add_argument("--gt-caption")
    rt.add_argument("--gt-id", type=int)
    rt.add_argument("-k", type=int, default=2)
    rt.add_argument("--no-filter", action="store_true")
    rt.add_argument("--query-dropout", type=float, default=None, metavar="PMAX")
    rt.add_argument("--seed", type=int, default=0)
    rt.set_defaults(fn=cmd_retrieve)

    dr = sub.add_parser("dedup-report", help="caption duplication statistics")
    dr.add_argument("--embeddings", required=True)
    dr.add_argument("--metadata", required=True)
    dr.add_argument("--out")
    dr.set_defaults(fn=cmd_dedup_report)

    iv = sub.add_parser("interleave-build", help="construct few-shot samples")
    iv.add_argument("--embeddings", required=True)
    iv.add_argument("--metadata", required=True)
    iv.add_argument("--out", required=True)
    iv.add_argument("--band-low", type=float, default=0.4)
    iv.add_argument("--band-high", type=float, default=0.6)
    iv.add_argument("--shots", type=int, default=4)
    iv.set_defaults(fn=cmd_interleave_build)

    tr = sub.add_parser("train", help="train the caption model")
    tr.add_argument("--embeddings", required=True)
    tr.add_argument("--metadata", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--index", help="retrieval index (omit to train without)")
    tr.add_argument("--policy", choices=["pretrain", "finetune"], default="finetune")
    tr.add_argument("--steps", type=int, default=500)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(fn=cmd_train)

    cp = sub.add_parser("caption", help="generate a caption with beam search")
    cp.add_argument("--checkpoint", required=True)
    cp.add_argument("--query-embedding", required=True)
    cp.add_argument("--index")
    cp.add_argument("--beam", type=int, default=3)
    cp.add_argument("--max-len", type=int, default=10)
    cp.set_defaults(fn=cmd_caption)

    ev = sub.add_parser("eval", help="BLEU@4 / CIDEr-D over candidate-reference pairs")
    ev.add_argument("--pairs", required=True,
                    help='JSONL: {"candidate": str, "references": [str]}')
    ev.add_argument("--out")
    ev.set_defaults(fn=cmd_eval)

    ab = sub.add_parser("ablate", help="run the retrieval ablations")
    ab.add_argument("--experiment", choices=["filtering", "prepend", "all"],
                    default="all")
    ab.add_argument("--out", required=True)
    ab.add_argument("--seed", type=int, default=0)
    ab.add_argument("--n-seeds", type=int, default=1)
    ab.add_argument("--steps", type=int, default=1000)
    ab.add_argument("--lr", type=float, default=2e-3)
    ab.set_defaults(fn=cmd_ablate)

    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        return args.fn(args, cfg)
    except InputFormatError as e:
        print(json.dumps({"error": e.code, "detail": str(e)}), file=sys.stderr)
        return 2
    except RecapError as e:
        print(json.dumps({"error": e.code, "detail": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
