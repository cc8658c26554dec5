"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

from .numerics import NumericalError
from .training import ConfigError

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("discap")


def _read_kv(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _dataset_config(path):
    from .synthworld import DatasetConfig

    cfg = DatasetConfig()
    if path is None:
        return cfg
    types = {f.name: f.type for f in dataclasses.fields(DatasetConfig)}
    for k, v in _read_kv(path).items():
        if k not in types:
            raise ConfigError(f"unknown dataset config key {k!r}")
        conv = int if types[k] in (int, "int") else float
        try:
            setattr(cfg, k, conv(v))
        except ValueError:
            raise ConfigError(f"bad value for {k}: {v!r}") from None
    return cfg


def _copy_ckpt(src: Path, dst: Path):
    dst.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src, dst)
    shutil.copyfile(str(src) + ".json", str(dst) + ".json")


# -- subcommands ------------------------------------------------------------------

def cmd_gen_data(args):
    from .synthworld import build_dataset, dataset_hash, save_dataset

    cfg = _dataset_config(args.config)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    save_dataset(build_dataset(cfg), args.out)
    print(f"dataset {dataset_hash(args.out)} -> {args.out}")


def cmd_train_retrieval(args):
    from .evalharness import save_retrieval
    from .retrieval import RetrievalConfig, recall_report, train_retrieval
    from .synthworld import dataset_hash
    from .training import TrainingData

    data = TrainingData.load(args.data)
    cfg = RetrievalConfig(seed=args.seed, epochs=args.epochs)
    try:
        model, history = train_retrieval(data.dataset, data.vocab, cfg)
    except NumericalError as exc:
        if getattr(exc, "last_good", None) is not None:
            save_retrieval(args.out + ".last_good", exc.last_good)
        raise
    rep = recall_report(model, data.dataset.split("val"), data.vocab)
    cid = save_retrieval(args.out, model, {"dataset_hash": dataset_hash(args.data), "loss_history": history,
                                           "recall_val": rep})
    print(f"retrieval {cid}: caption R@1 {rep['caption_retrieval']['R@1']:.3f}, "
          f"image R@1 {rep['image_retrieval']['R@1']:.3f}")


def _train_config(args, **overrides):
    from .training import TrainConfig

    cfg = TrainConfig.parse(Path(args.config).read_text()) if args.config else TrainConfig()
    cfg.dataset = args.data
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    cfg.validate()
    return cfg


def cmd_pretrain(args):
    from .training import run_schedule

    cfg = _train_config(args, variant=args.variant, seed=args.seed, epochs_mle=args.epochs, epochs_scst=0)
    work = Path(args.out + ".run")
    model, _ = run_schedule(cfg, work)
    _copy_ckpt(work / "final.ckpt", Path(args.out))
    print(f"pretrained {model.checkpoint_id} -> {args.out}")


def cmd_train_rl(args):
    from .evalharness import load_retrieval
    from .training import load_generator, run_schedule

    _, meta, _ = load_generator(args.init)
    init_cfg = meta.get("config", {})
    reward = args.reward
    retrieval = None
    if reward.endswith("_disc"):
        if not args.retrieval:
            raise ConfigError(f"--reward {reward} needs --retrieval")
        retrieval = load_retrieval(args.retrieval)
    cfg = _train_config(args, variant=meta.get("variant"), reward_kind=reward, reward_lambda=args.lam,
                        retrieval_ckpt=args.retrieval or "", epochs_mle=int(meta.get("epoch", 0)),
                        epochs_scst=args.epochs,
                        seed=args.seed if args.seed is not None else init_cfg.get("seed"),
                        lr=init_cfg.get("lr") if not args.config else None)
    work = Path(args.out + ".run")
    model, _ = run_schedule(cfg, work, retrieval=retrieval, init=args.init)
    _copy_ckpt(work / "final.ckpt", Path(args.out))
    print(f"trained {model.checkpoint_id} ({reward}, lambda={args.lam}) -> {args.out}")


def cmd_build_pairs(args):
    from .evalharness import decode_split
    from .synthworld import build_distractor_pairs, dataset_hash, save_pairs
    from .textcore import detokenize
    from .training import SplitData, TrainingData, load_generator

    data = TrainingData.load(args.data)
    model, _, _ = load_generator(args.generator)
    split = data.val if args.split == "val" else SplitData(data.dataset.split(args.split), data.vocab)
    texts = [detokenize(c, data.vocab) for c in decode_split(model, split)]
    pairs = build_distractor_pairs(split.records, texts, args.n)
    save_pairs(pairs, args.out, model.checkpoint_id, split=args.split, dataset_id=dataset_hash(args.data))
    print(f"{len(pairs)} pairs -> {args.out}")


def cmd_eval(args):
    from .evalharness import full_report, load_retrieval
    from .synthworld import dataset_hash, load_pairs
    from .training import SplitData, TrainingData, load_generator

    data = TrainingData.load(args.data)
    model, meta, _ = load_generator(args.generator)
    header, pairs = load_pairs(args.pairs)
    split = data.val if header.get("split", "val") == "val" else \
        SplitData(data.dataset.split(header["split"]), data.vocab)
    retrieval = load_retrieval(args.retrieval)
    independent = load_retrieval(args.retrieval_new)
    cfg = meta.get("config", {})
    rep = full_report(model, split, pairs, retrieval, independent, data.vocab,
                      dataset_hash=dataset_hash(args.data), pairs_dataset_hash=header.get("dataset_hash"),
                      seed=int(cfg.get("seed", 0)),
                      config={"reward": cfg.get("reward_kind"), "lambda": cfg.get("reward_lambda"),
                              "variant": model.variant, "pairs_generator": header.get("generator_checkpoint")})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(rep.to_json())
    print(f"acc {rep.acc:.3f} acc_new {rep.acc_new:.3f} cider {rep.cider:.3f} bleu4 {rep.bleu4:.3f} "
          f"distinct {rep.distinct} avg_len {rep.avg_len:.2f}")


def cmd_report(args):
    from .evalharness import EvalReport, format_table

    reports = [EvalReport.from_json(Path(p).read_text()) for p in args.inputs]
    names = args.names or [Path(p).stem for p in args.inputs]
    if len(names) != len(reports):
        raise ConfigError("--names must match --inputs")
    print(format_table(reports, names))


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="discap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="build the synthetic dataset")
    s.add_argument("--config", help="key = value file of dataset settings (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-retrieval", help="train the image/caption embedding model")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=15)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_retrieval)

    s = sub.add_parser("pretrain", help="MLE pretraining of a caption generator")
    s.add_argument("--data", required=True)
    s.add_argument("--variant", choices=("fc", "attn"), default="attn")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int)
    s.add_argument("--config", help="training config file; flags override it")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train-rl", help="self-critical fine-tuning from a pretrained generator")
    s.add_argument("--data", required=True)
    s.add_argument("--init", required=True)
    s.add_argument("--reward", choices=("cider", "cider_disc", "mle_disc"), required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=0.0)
    s.add_argument("--retrieval")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--config", help="training config file; flags override it")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_rl)

    s = sub.add_parser("build-pairs", help="select target/distractor pairs")
    s.add_argument("--data", required=True)
    s.add_argument("--generator", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--split", choices=("val", "test"), default="val")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_pairs)

    s = sub.add_parser("eval", help="score a generator and write report.json")
    s.add_argument("--data", required=True)
    s.add_argument("--generator", required=True)
    s.add_argument("--pairs", required=True)
    s.add_argument("--retrieval", required=True)
    s.add_argument("--retrieval-new", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="side-by-side table of report files")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--names", nargs="+")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
