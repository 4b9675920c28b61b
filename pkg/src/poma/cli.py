"""Command-line entry point: ``poma <verb> [flags]``.

Exit status 0 on success, 1 on usage errors, 2 on data or format errors.
Every error prints a single diagnostic line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import config as cfgmod
from . import dataset, formats, pipeline, plots, retrieval, trainer
from .errors import ConfigError, PomaError

log = logging.getLogger("poma")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poma", description="Point-map pretraining and retrieval on synthetic scenes.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render a synthetic corpus")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config")

    t = sub.add_parser("pretrain", help="run the warmup or main stage")
    t.add_argument("--stage", choices=["warmup", "main"], required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--manifest")
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--report", help="step report path (default: <out>.report.jsonl)")
    t.add_argument("--no-figures", action="store_true", help="skip the loss-curve PNG")

    e = sub.add_parser("embed", help="build a scene embedding index")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--encoder", choices=["target", "context"])
    e.add_argument("--config")

    r = sub.add_parser("retrieve", help="rank scenes for a text query")
    r.add_argument("--index", required=True)
    r.add_argument("--query", required=True)
    r.add_argument("--top", type=int, default=5)
    r.add_argument("--config")

    lz = sub.add_parser("localize", help="rank the views of one scene for a situation text")
    lz.add_argument("--index", required=True)
    lz.add_argument("--scene", required=True)
    lz.add_argument("--query", required=True)
    lz.add_argument("--k", type=int, default=retrieval.DEFAULT_K)
    lz.add_argument("--manifest", help="with --figure: source of the point maps to draw")
    lz.add_argument("--figure", help="write a top-down view highlighting the retrieved views")
    lz.add_argument("--config")

    ev = sub.add_parser("eval-retrieval", help="recall of ground-truth scenes for a query file")
    ev.add_argument("--index", required=True)
    ev.add_argument("--queries", required=True)
    ev.add_argument("--m", type=int, required=True)
    ev.add_argument("--n", type=int, required=True)
    ev.add_argument("--figure", help="write a recall@N curve (N = 1..index size)")
    ev.add_argument("--config")

    gc = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    gc.add_argument("--config")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--verbose", action="store_true")
    return p


def _values(args, **overrides) -> dict:
    return cfgmod.merge(cfgmod.load_config(args.config), overrides)


def _text_encoder(values: dict, dim: int) -> dataset.ReferenceEncoder:
    return dataset.ReferenceEncoder(dim, cfgmod.extra(values, "text_seed"))


def cmd_generate(args) -> int:
    values = _values(args, seed=args.seed, scenes=args.scenes)
    gen_kw = {}
    if "n_cameras" in values:
        gen_kw["n_cameras"] = values["n_cameras"]
    if "image_size" in values:
        gen_kw["image_size"] = values["image_size"]
    corpus_kw = {k: values[k] for k in ("views_per_scene", "coverage_cell") if k in values}
    ccfg = dataset.CorpusConfig(generator=dataset.GeneratorConfig(**gen_kw),
                                text_dim=values.get("dim", 64),
                                text_seed=cfgmod.extra(values, "text_seed"), **corpus_kw)
    records = dataset.build_corpus(args.scenes, args.seed, ccfg)
    out = Path(args.out)
    manifest = formats.write_corpus(records, out)
    queries = []
    for rec in records:
        for t in rec.heldout_scene_captions[:1]:
            queries.append({"scene_id": rec.scene_id, "texts": [t]})
        if rec.referring_texts:
            queries.append({"scene_id": rec.scene_id, "texts": rec.referring_texts[:3]})
    (out / "queries.jsonl").write_text("".join(json.dumps(q) + "\n" for q in queries))
    print(f"{len(records)}\t{manifest}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    values = _values(args, stage=args.stage, steps=args.steps, lr=args.lr, seed=args.seed,
                     manifest=args.manifest, init=args.init)
    tcfg = cfgmod.train_config(values)
    if "manifest" not in values:
        raise ConfigError("pretrain needs a manifest (--manifest or manifest= in the config)")
    records = formats.read_corpus(values["manifest"])
    if values.get("init"):
        bundle, _ = trainer.load_checkpoint(values["init"])
    else:
        bundle = trainer.ModelBundle(cfgmod.encoder_config(values), seed=tcfg.seed,
                                     text_seed=cfgmod.extra(values, "text_seed"))
    if tcfg.dtype != bundle.log_tau.dtype:
        bundle = bundle.to(tcfg.dtype)
    if tcfg.stage == "main" and values.get("init"):
        # both encoders start from the warm-up context weights
        bundle.start_main_stage()
    bundle, report, opt = trainer.run_stage(bundle, records, tcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trainer.save_checkpoint(bundle.float(), opt, out)
    report_path = Path(args.report or f"{out}.report.jsonl")
    report_path.write_text("".join(line + "\n" for line in report.to_lines()))
    if not args.no_figures and report.steps:
        plots.loss_curves(report, f"{out}.loss.png")
    print(f"{report.steps}\t{report.loss_total[-1] if report.steps else float('nan'):.6g}\t{report.digest}")
    return EXIT_OK


def cmd_embed(args) -> int:
    values = _values(args, encoder=args.encoder)
    bundle, _ = trainer.load_checkpoint(args.ckpt)
    records = formats.read_corpus(args.manifest)
    index = pipeline.build_index(bundle, records, cfgmod.extra(values, "encoder"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    formats.save_index(index, out)
    print(f"{len(index)}\t{out}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    values = _values(args)
    index = formats.load_index(args.index)
    q = dataset.embed_text(_text_encoder(values, index.dim), args.query)
    for rank, (sid, score) in enumerate(retrieval.retrieve(q, index, args.top), 1):
        print(f"{rank}\t{sid}\t{score:.6f}")
    return EXIT_OK


def cmd_localize(args) -> int:
    values = _values(args)
    index = formats.load_index(args.index)
    try:
        entry = index.get(args.scene)
    except KeyError:
        raise PomaError(f"scene {args.scene!r} not in index") from None
    q = dataset.embed_text(_text_encoder(values, index.dim), args.query)
    ranked = retrieval.localize(entry.views, q, args.k)
    for rank, (view, score) in enumerate(ranked, 1):
        print(f"{rank}\t{view}\t{score:.6f}")
    if args.figure:
        if not args.manifest:
            raise ConfigError("--figure needs --manifest to draw the point maps")
        rec = next((r for r in formats.read_corpus(args.manifest) if r.scene_id == args.scene), None)
        if rec is None:
            raise PomaError(f"scene {args.scene!r} not in manifest")
        plots.localization_map([v.point_map for v in rec.views], [v for v, _ in ranked], args.figure)
    return EXIT_OK


def read_queries(path, text: dataset.ReferenceEncoder, mode: str) -> list[retrieval.RetrievalQuery]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            texts = list(obj["texts"])
            emb = retrieval.compose_query(texts, lambda t: dataset.embed_text(text, t), mode)
            out.append(retrieval.RetrievalQuery(texts, emb, obj["scene_id"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise formats.FormatError(f"{path}:{lineno}: malformed query ({exc})") from exc
    return out


def cmd_eval(args) -> int:
    values = _values(args)
    index = formats.load_index(args.index)
    queries = read_queries(args.queries, _text_encoder(values, index.dim),
                           cfgmod.extra(values, "query_mode"))
    value = retrieval.recall_at(queries, index, args.m, args.n)
    print(f"R@{args.m}-{args.n}\t{value:.6f}")
    if args.figure:
        curve = {n: retrieval.recall_at(queries, index, args.m, n) for n in range(1, len(index) + 1)}
        plots.recall_curve(curve, args.figure, args.m)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    values = _values(args)
    enc = cfgmod.encoder_config(values, dim=16, depth=1, heads=2, patch=8, image_size=32,
                                max_views=2, lora_rank=4, lora_alpha=8.0)
    errors = trainer.gradcheck_report(seed=args.seed, eps=cfgmod.extra(values, "gradcheck_eps"),
                                      samples_per_param=cfgmod.extra(values, "gradcheck_samples"),
                                      cfg=enc)
    print(f"{max(errors.values()):.3e}")
    if args.verbose:
        for k in sorted(errors):
            print(f"{k}\t{errors[k]:.3e}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "embed": cmd_embed,
            "retrieve": cmd_retrieve, "localize": cmd_localize, "eval-retrieval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"poma {args.verb}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PomaError, OSError, ValueError) as exc:
        print(f"poma {args.verb}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
