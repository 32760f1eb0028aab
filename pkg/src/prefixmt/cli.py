"""Command-line entry point: gen-data, train, eval, sweep, inspect-checkpoint.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 invariant
violation (e.g. an oracle hash mismatch).
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .checkpoint import CheckpointError, OracleMismatchError, load_checkpoint, save_checkpoint
from .corpus import (CorpusFormatError, NoiseMode, NoiseSpec, WorldConfig, generate_world, read_corpus,
                     write_corpus)
from .decoding import DecodeConfig, DecodeMode, evaluate
from .experiments import (PipelineConfig, RunCache, run_masked_recovery, run_noising_experiment,
                          run_prefix_sweep)
from .model import ModelConfig, Seq2Seq
from .oracle import alignment_score, build_oracle
from .report import EvalReport
from .training import (ConfigError, InvariantError, Mode, Stage, TrainConfig, model_from_checkpoint,
                       run_single_stage, run_stage1, run_stage2)

log = logging.getLogger("prefixmt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3

MODE_NAMES = {
    "standard": Mode.STANDARD,
    "single-stage": Mode.SINGLE_STAGE,
    "ft": Mode.FINETUNE_ORACLE_TEXT,
    "reg": Mode.REG,
    "multilingual-caption": Mode.MULTILINGUAL_CAPTION,
    "text-only": Mode.TEXT_ONLY,
}
DECODE_NAMES = {"hallucinate": DecodeMode.HALLUCINATE, "image": DecodeMode.IMAGE,
                "prefix-only": DecodeMode.PREFIX_ONLY}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- configuration


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, (list, tuple)):
        return [type(default[0])(x) if default else x for x in raw.replace(",", " ").split()]
    if default is None:
        return int(raw) if raw.strip() else None
    return raw


@dataclass
class RunConfig:
    """Fully resolved settings for one command; echoed into reports and checkpoints."""

    world: WorldConfig = field(default_factory=WorldConfig)
    oracle: dict = field(default_factory=lambda: {"seed": 0, "sigma_a": 0.1, "sigma_b": 0.3})
    model: dict = field(default_factory=lambda: ModelConfig(vocab_size=1).to_dict())
    train: TrainConfig = field(default_factory=TrainConfig)
    stage1_epochs: Optional[int] = None
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    paths: dict = field(default_factory=lambda: {"data": "data/corpus.jsonl", "out_dir": "runs",
                                                 "report_dir": "reports", "cache_dir": ""})
    experiment: dict = field(default_factory=lambda: {"p_grid": [0.0, 0.3], "k_grid": [1, 5, 10, 20, 50],
                                                      "recovery_noise_p": 0.3})

    @property
    def seed(self) -> int:
        return self.train.seed

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "vocab_size": vocab_size})

    def pipeline(self, vocab_size: int) -> PipelineConfig:
        return PipelineConfig(self.model_config(vocab_size), self.train, self.decode, self.stage1_epochs)

    def to_dict(self) -> dict:
        return {"world": dataclasses.asdict(self.world), "oracle": dict(self.oracle),
                "model": {k: v for k, v in self.model.items() if k != "vocab_size"},
                "train": self.train.to_dict(), "stage1_epochs": self.stage1_epochs,
                "decode": self.decode.to_dict(), "paths": dict(self.paths),
                "experiment": dict(self.experiment)}


def _apply(section: str, values: dict[str, str], cfg: RunConfig) -> RunConfig:
    if section == "world":
        base = dataclasses.asdict(cfg.world)
        for k, v in values.items():
            if k not in base:
                raise UsageError(f"unknown key world.{k}")
            base[k] = _coerce(v, base[k])
        return replace(cfg, world=WorldConfig(**base))
    if section in ("oracle", "model", "paths", "experiment"):
        base = dict(getattr(cfg, section))
        for k, v in values.items():
            if k not in base or (section == "model" and k == "vocab_size"):
                raise UsageError(f"unknown key {section}.{k}")
            base[k] = _coerce(v, base[k])
        return replace(cfg, **{section: base})
    if section == "train":
        base = cfg.train.to_dict()
        s1 = cfg.stage1_epochs
        for k, v in values.items():
            if k == "stage1_epochs":
                s1 = int(v) if v.strip() else None
            elif k in base:
                base[k] = _coerce(v, base[k])
            else:
                raise UsageError(f"unknown key train.{k}")
        return replace(cfg, train=TrainConfig(**base), stage1_epochs=s1)
    if section == "decode":
        base = cfg.decode.to_dict()
        for k, v in values.items():
            if k not in base:
                raise UsageError(f"unknown key decode.{k}")
            base[k] = _coerce(v, base[k])
        return replace(cfg, decode=DecodeConfig(**base))
    raise UsageError(f"unknown config section [{section}]")


def load_run_config(path: Optional[str], overrides: list[str] = (), env=None) -> RunConfig:
    """Read an INI-style config, apply ``section.key=value`` overrides, then PREFIXMT_SEED."""
    env = os.environ if env is None else env
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
        except configparser.Error as e:
            raise UsageError(f"malformed config {path}: {e}") from e
        for section in parser.sections():
            cfg = _apply(section, dict(parser[section]), cfg)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        cfg = _apply(section, {name: value}, cfg)
    if env.get("PREFIXMT_SEED"):
        try:
            seed = int(env["PREFIXMT_SEED"])
        except ValueError as e:
            raise UsageError("PREFIXMT_SEED must be an integer") from e
        cfg = replace(cfg, train=replace(cfg.train, seed=seed))
    return cfg


def _oracle(cfg: RunConfig, world):
    o = cfg.oracle
    return build_oracle(world, int(o["seed"]), {"a": float(o["sigma_a"]), "b": float(o["sigma_b"])})


def _load_corpus(cfg: RunConfig, path: Optional[str]):
    path = path or cfg.paths["data"]
    try:
        return read_corpus(path)
    except FileNotFoundError as e:
        raise DataError(f"corpus not found: {path}") from e


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.paths["data"])
    corpus = generate_world(cfg.world)
    write_corpus(corpus, out)
    oracle = _oracle(cfg, corpus.world)
    counts = {s: len(corpus.split(s)) for s in ("train", "valid", "test")}
    summary = {"path": str(out), "records": counts, "vocab_size": len(corpus.vocab),
               "alignment_score": {l: alignment_score(oracle, corpus, l) for l in ("a", "b")},
               "oracle_hash": oracle.hash()}
    print(json.dumps(summary, sort_keys=True, indent=2))
    return EXIT_OK


def _write_log(path: Path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_train(args, cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg, args.data)
    oracle = _oracle(cfg, corpus.world)
    mode = MODE_NAMES[args.mode]
    stage = Stage.STAGE1 if args.stage == 1 else Stage.STAGE2
    if mode is Mode.SINGLE_STAGE:
        stage = Stage.STAGE2
    mcfg = cfg.model_config(len(corpus.vocab))
    if mode is Mode.TEXT_ONLY:
        mcfg = replace(mcfg, k=0)
    epochs = cfg.stage1_epochs if stage is Stage.STAGE1 and cfg.stage1_epochs else cfg.train.epochs
    tcfg = replace(cfg.train, stage=stage, mode=mode, epochs=epochs)
    tcfg.validate_for(stage)
    model = Seq2Seq(mcfg, tcfg.seed)
    resume = None
    if args.resume:
        ckpt = load_checkpoint(args.resume, oracle)
        if ckpt.provenance.get("complete", True):
            # a finished earlier stage initialises this one
            if ckpt.provenance.get("stage") == stage.value and mode is not Mode.SINGLE_STAGE:
                raise UsageError("checkpoint already completed this stage; nothing to resume")
            if ModelConfig.from_dict(ckpt.model_config) != mcfg:
                raise UsageError("resume checkpoint has a different model configuration")
            model.load_arrays(ckpt.params)
        else:
            resume = ckpt
    noise = None
    if args.noise_p:
        noise = NoiseSpec(args.noise_p, tcfg.seed, NoiseMode(args.noise_mode))
    runner = {Stage.STAGE1: run_stage1, Stage.STAGE2: run_stage2}[stage]
    if mode is Mode.SINGLE_STAGE:
        runner = run_single_stage
    ckpt = runner(corpus, model, oracle, tcfg, noise=noise if stage is Stage.STAGE2 else None,
                  resume=resume, stop_after_epoch=args.stop_after_epoch)
    ckpt.extra["run_config"] = cfg.to_dict()
    out = Path(args.out)
    save_checkpoint(ckpt, out)
    _write_log(out.with_suffix(out.suffix + ".log"), ckpt.provenance["history"])
    print(json.dumps({"checkpoint": str(out), "complete": ckpt.provenance["complete"],
                      "epoch": ckpt.provenance["epoch"], "best_valid_bleu": ckpt.provenance["best_score"]},
                     sort_keys=True))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg, args.data)
    oracle = _oracle(cfg, corpus.world)
    ckpt = load_checkpoint(args.checkpoint, oracle)
    model = model_from_checkpoint(ckpt)
    dcfg = replace(cfg.decode, mode=DECODE_NAMES[args.mode])
    noise = None
    if args.noise_p:
        noise = NoiseSpec(args.noise_p, cfg.seed, NoiseMode(args.noise_mode))
    tcfg = ckpt.train_config
    src, tgt = tcfg.get("src_lang", "a"), tcfg.get("tgt_lang", "b")
    use_oracle = None if model.cfg.k == 0 else ckpt.effective_oracle()
    res = evaluate(model, use_oracle, corpus, args.split, dcfg, src_lang=src, tgt_lang=tgt,
                   noise=noise, caption_lang=args.caption_lang)
    report = EvalReport("eval", {"run": cfg.to_dict(), "checkpoint": str(args.checkpoint),
                                 "checkpoint_train_config": tcfg, "split": args.split,
                                 "decode": dcfg.to_dict(), "noise": noise.to_dict() if noise else None},
                        [cfg.seed])
    report.rows.append({"split": args.split, "mode": dcfg.mode.value, "bleu": res.bleu,
                        "n": len(res.hypotheses), "unfinished": res.n_unfinished})
    report.summary = {"bleu": res.bleu}
    text = report.to_text()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg, args.data)
    oracle = _oracle(cfg, corpus.world)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    pcfg = cfg.pipeline(len(corpus.vocab))
    cache = RunCache(cfg.paths["cache_dir"]) if cfg.paths.get("cache_dir") else None
    exp = cfg.experiment
    if args.experiment == "noise":
        report = run_noising_experiment(corpus, oracle, [float(p) for p in exp["p_grid"]], pcfg,
                                        seeds, cache)
    elif args.experiment == "prefix":
        report = run_prefix_sweep(corpus, oracle, [int(k) for k in exp["k_grid"]], pcfg, seeds, cache)
    else:
        report = run_masked_recovery(corpus, oracle, pcfg, seeds, cache,
                                     train_noise_p=float(exp["recovery_noise_p"]))
    report.config["run"] = cfg.to_dict()
    out = args.out
    if out is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = Path(cfg.paths["report_dir"]) / f"{args.experiment}-{stamp}.txt"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_inspect(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    info = {
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "provenance": {k: v for k, v in ckpt.provenance.items() if k != "history"},
        "history": ckpt.provenance.get("history", []),
        "oracle_hash": ckpt.oracle_hash,
        "n_parameters": int(sum(a.size for a in ckpt.params.values())),
        "parameter_groups": sorted({n.split(".", 1)[0] for n in ckpt.params}),
        "optimizer_state": bool(ckpt.optimizer),
        "finetuned_text_languages": sorted(ckpt.oracle_text),
    }
    print(json.dumps(info, sort_keys=True, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prefixmt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="INI config with [world] [oracle] [model] [train] "
                                         "[decode] [paths] [experiment] sections")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
        if data:
            sp.add_argument("--data", help="corpus path (default: paths.data)")

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(g, data=False)
    g.add_argument("--out", help="output corpus path (default: paths.data)")

    t = sub.add_parser("train", help="run one training stage")
    common(t)
    t.add_argument("--stage", type=int, choices=(1, 2), default=1)
    t.add_argument("--mode", choices=sorted(MODE_NAMES), default="standard")
    t.add_argument("--resume", help="checkpoint to continue from (or a finished stage 1 to start stage 2)")
    t.add_argument("--stop-after-epoch", type=int, help="write a resumable checkpoint after this epoch")
    t.add_argument("--noise-p", type=float, default=0.0, help="source token noise probability")
    t.add_argument("--noise-mode", choices=("drop", "mask"), default="drop")
    t.add_argument("--out", required=True, help="checkpoint path")

    e = sub.add_parser("eval", help="score a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", choices=sorted(DECODE_NAMES), default="hallucinate")
    e.add_argument("--split", choices=("train", "valid", "test"), default="test")
    e.add_argument("--caption-lang", choices=("a", "b"), help="output language for prefix-only mode")
    e.add_argument("--noise-p", type=float, default=0.0)
    e.add_argument("--noise-mode", choices=("drop", "mask"), default="drop")
    e.add_argument("--out", help="also write the report here")

    s = sub.add_parser("sweep", help="run an experiment driver across seeds")
    common(s)
    s.add_argument("--experiment", required=True, choices=("noise", "prefix", "recovery"))
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--out", help="report path (default: paths.report_dir/<experiment>-<time>.txt)")

    i = sub.add_parser("inspect-checkpoint", help="summarise a checkpoint file")
    i.add_argument("checkpoint")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "inspect-checkpoint": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(getattr(args, "config", None), getattr(args, "set", []))
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OracleMismatchError, InvariantError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DataError, CorpusFormatError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
