"""``acsa`` command line.

Reports are ``name=value`` lines on stdout (``--pretty`` for a table).
Exit codes: 0 success, 1 failed verification, 2 input/usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .alignment import AttentionConfig
from .corpus import CorpusFormatError, LabelError, dumps_corpus, generate_synthetic, load_corpus
from .gradcheck import run_gradcheck
from .losses import LossWeights
from .model import Params
from .numerics import UsageError
from .retrieval import (
    DEFAULT_KS,
    SimilarityMatrix,
    gallery_cosine,
    positives_from_ids,
    rerank,
    score_corpus,
    topk_eval,
)
from .train import TrainingDiverged, train_toy

EXIT_OK, EXIT_FAILED, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _emit(metrics: dict, pretty: bool, out=None) -> None:
    out = out or sys.stdout
    if pretty:
        width = max(len(k) for k in metrics)
        for k, v in metrics.items():
            out.write(f"{k:<{width}}  {v:.6g}\n" if isinstance(v, float) else f"{k:<{width}}  {v}\n")
    else:
        for k, v in metrics.items():
            out.write(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n")


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be >= 1")
    return ks


def _unit(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _cfg(args) -> AttentionConfig:
    return AttentionConfig(args.lambda1, args.lambda1_prime)


def _load(path):
    if not Path(path).exists():
        raise InputError(f"no such corpus file: {path}")
    return load_corpus(path)


def _params(args):
    return Params.load(args.params) if getattr(args, "params", None) else None


def _scores(args, corpus) -> SimilarityMatrix:
    if getattr(args, "scores", None):
        sim = SimilarityMatrix.load(args.scores)
        texts = {t.id: t for t in corpus.texts}
        images = {im.id: im for im in corpus.images}
        missing = [q for q in sim.query_ids if q not in texts] + [g for g in sim.gallery_ids if g not in images]
        if missing:
            raise InputError(f"score table ids not in corpus: {missing[:5]}")
        return sim
    return score_corpus(corpus.texts, corpus.images, _cfg(args), args.beta, _params(args))


def _positives(sim: SimilarityMatrix, corpus):
    ident = {x.id: x.identity for x in corpus.texts + corpus.images}
    return positives_from_ids([ident[q] for q in sim.query_ids], [ident[g] for g in sim.gallery_ids])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    corpus = generate_synthetic(
        args.identities,
        args.imgs,
        args.txts,
        args.dim,
        args.sigma,
        args.seed,
        m_max=args.m_max,
        map_strength=args.map_strength,
    )
    text = dumps_corpus(corpus)
    if args.out:
        Path(args.out).write_text(text)
        _emit({"images": len(corpus.images), "texts": len(corpus.texts), "path": args.out}, args.pretty)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_score(args) -> int:
    corpus = _load(args.corpus)
    sim = score_corpus(corpus.texts, corpus.images, _cfg(args), args.beta, _params(args))
    if args.out:
        sim.save(args.out)
        _emit({"queries": len(sim.query_ids), "gallery": len(sim.gallery_ids), "path": args.out}, args.pretty)
    else:
        sys.stdout.write(sim.to_table())
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus = _load(args.corpus)
    sim = _scores(args, corpus)
    report = topk_eval(sim, _positives(sim, corpus), args.ks)
    _emit(report.metrics(), args.pretty)
    return EXIT_OK


def cmd_rerank(args) -> int:
    corpus = _load(args.corpus)
    sim = _scores(args, corpus)
    images = {im.id: im for im in corpus.images}
    gg = gallery_cosine([images[g] for g in sim.gallery_ids])
    refined = rerank(sim, gg, args.j, args.w)
    pos = _positives(sim, corpus)
    base = topk_eval(sim, pos, args.ks).metrics()
    after = topk_eval(refined, pos, args.ks).metrics()
    metrics = {f"base_{k}": v for k, v in base.items() if k.startswith("top")}
    metrics.update(after)
    if args.out:
        refined.save(args.out)
    _emit(metrics, args.pretty)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    corpus = _load(args.corpus)
    w = LossWeights(args.mu, args.gamma)
    result = train_toy(corpus, args.epochs, args.lr, w, _cfg(args), args.seed, args.batch_size, args.beta)
    metrics = {}
    for s in result.trace:
        metrics[f"epoch{s.epoch:03d}_loss"] = s.loss
        metrics[f"epoch{s.epoch:03d}_top1"] = s.top1
    metrics["final_loss"] = result.trace[-1].loss if result.trace else float("nan")
    metrics["final_top1"] = result.final_top1
    if args.out:
        result.params.save(args.out)
    _emit(metrics, args.pretty)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(range(args.seed, args.seed + args.seeds), _cfg(args), LossWeights(args.mu, args.gamma), args.h)
    metrics = {f"seed{r.seed}_max_rel_err": r.max_rel_err for r in results}
    worst = max(r.max_rel_err for r in results)
    ok = worst <= args.tol
    metrics.update({"checked": sum(r.n_checked for r in results), "max_rel_err": worst, "passed": int(ok)})
    _emit(metrics, args.pretty)
    return EXIT_OK if ok else EXIT_FAILED


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acsa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True):
        p.add_argument("--pretty", action="store_true", help="human-readable table")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--lambda1", type=float, default=20.0, help="image->text inverse temperature")
        p.add_argument("--lambda1-prime", type=float, default=20.0, help="text->image inverse temperature")
        if corpus:
            p.add_argument("--corpus", required=True)
            p.add_argument("--beta", type=_unit, default=0.5, help="weight of the image->text score")
            p.add_argument("--params", help="trained parameters (.npz) from train-toy")

    p = sub.add_parser("gen-synthetic", help="write a synthetic corpus")
    common(p, corpus=False)
    p.add_argument("--identities", type=_positive_int, default=20)
    p.add_argument("--imgs", type=_positive_int, default=2, help="images per identity")
    p.add_argument("--txts", type=_positive_int, default=2, help="texts per identity")
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--m-max", type=_positive_int, default=10)
    p.add_argument("--map-strength", type=float, default=3.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("score", help="export the text x image similarity table")
    common(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="top-k accuracy of text->image retrieval")
    common(p)
    p.add_argument("--scores", help="similarity table from `score`; scored afresh if omitted")
    p.add_argument("--ks", type=_ks, default=DEFAULT_KS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rerank", help="re-rank with gallery-gallery similarity and evaluate")
    common(p)
    p.add_argument("--scores")
    p.add_argument("--ks", type=_ks, default=DEFAULT_KS)
    p.add_argument("--j", type=_positive_int, default=5, help="neighbourhood size")
    p.add_argument("--w", type=_unit, default=0.3, help="fusion weight")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("train-toy", help="gradient-descent training with held-out top-1 trace")
    common(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--mu", type=float, default=4.0)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--batch-size", type=_positive_int, default=8)
    p.add_argument("--out", help="where to save trained parameters (.npz)")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    common(p, corpus=False)
    p.add_argument("--seeds", type=_positive_int, default=20)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--mu", type=float, default=4.0)
    p.add_argument("--gamma", type=float, default=0.1)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "gen-synthetic":
        if args.dim < 4:
            parser.error("--dim must be >= 4")
        if args.sigma < 0:
            parser.error("--sigma must be >= 0")
    try:
        return args.func(args)
    except (CorpusFormatError, LabelError, UsageError, InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
