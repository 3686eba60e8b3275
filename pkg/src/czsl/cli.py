"""Experiment driver: ``czsl generate|pretrain|train|evaluate|run|report``."""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import diffcore as dc
from .baselines import BATCH, ITERS, LR, le_fit_infer, visprod_fit_infer
from .dataset import (DatasetError, EmbeddingProvider, ManifestError, Split, generate_synthetic,
                      load_manifest, merge, save_manifest)
from .encoder import Backbone
from .evaluator import EpisodeResult, aggregate, format_table, seed_summary
from .metalearn import (ArchConfig, FeatureBank, Model, NumericError, TrainConfig, evaluate_model,
                        init_params, pretrain_backbone, train)
from .sampler import EpisodeConfig, EpisodeError, SamplerExhaustedError, sample_episode
from .seeding import child_rng, child_seed

log = logging.getLogger("czsl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SAMPLER, EXIT_NUMERIC = 0, 2, 3, 4, 5
METHODS = ("ours", "visprod", "le")
SPLIT_FILES = {Split.TRAIN: "train.manifest", Split.VAL: "val.manifest", Split.TEST: "test.manifest"}

DEFAULTS: dict = {
    "seed": 0,
    "dataset": {
        "dir": "data",
        "n_type1": 12,
        "n_type2": 12,
        "samples_per_composition": 20,
        "image_size": 16,
        "noise_sigma": 0.05,
        "embedding_dim": 32,
    },
    "episode": {"n_primitives": 5, "k_support": 5, "k_query": 5, "max_attempts": 10000},
    "backbone": {
        "epochs": 20,
        "batch_size": 32,
        "lr": 3e-3,
        "weight_decay": 5e-4,
        "channels": [32, 32, 32, 32],
        "pools": [True, True, False, False],
    },
    "method": {
        "name": "ours",
        "gcn_layers": [64, 64],
        "corr_hidden": 64,
        "embed_hidden": 64,
        "baseline_iters": ITERS,
        "baseline_lr": LR,
        "baseline_batch": BATCH,
    },
    "training": {
        "inner_lr": 0.4,
        "outer_lr": 0.1,
        "inner_steps": 1,
        "max_episodes": 10000,
        "weight_decay": 5e-4,
        "second_order": False,
        "bilevel": True,
        "mixup": True,
        "mixup_alpha": 1.0,
        "optimizer": "sgd",
        "val_every": 500,
        "val_episodes": 50,
        "checkpoint_every": 500,
    },
    "evaluation": {"n_test_episodes": 200, "seeds": None, "workers": 1},
    "output": {"dir": "runs/default"},
}


class ConfigError(ValueError):
    pass


class ReportError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def _merge_into(base: dict, over: dict, path: str = "") -> None:
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a section")
            _merge_into(base[k], v, key + ".")
        else:
            base[k] = v


def parse_override(text: str) -> dict:
    """``a.b=1`` -> ``{"a": {"b": 1}}``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def load_config(path=None, overrides=()) -> dict:
    """Defaults < file < overrides; unknown keys raise ``ConfigError``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        _merge_into(cfg, data)
    for o in overrides:
        _merge_into(cfg, parse_override(o))
    check_config(cfg)
    return cfg


def check_config(cfg: dict) -> None:
    if cfg["method"]["name"] not in METHODS:
        raise ConfigError(f"method.name must be one of {METHODS}")
    ds = cfg["dataset"]
    for k in ("n_type1", "n_type2", "samples_per_composition", "image_size", "embedding_dim"):
        if not isinstance(ds[k], int) or ds[k] < 1:
            raise ConfigError(f"dataset.{k} must be a positive integer")
    ep = cfg["episode"]
    for k in ("n_primitives", "k_support", "k_query", "max_attempts"):
        if not isinstance(ep[k], int) or ep[k] < 1:
            raise ConfigError(f"episode.{k} must be a positive integer")
    bb = cfg["backbone"]
    if len(bb["channels"]) != len(bb["pools"]):
        raise ConfigError("backbone.channels and backbone.pools must have equal length")
    ev = cfg["evaluation"]
    if not isinstance(ev["n_test_episodes"], int) or ev["n_test_episodes"] < 2:
        raise ConfigError("evaluation.n_test_episodes must be an integer >= 2")
    if ev["seeds"] is not None and (not isinstance(ev["seeds"], list) or not ev["seeds"]):
        raise ConfigError("evaluation.seeds must be null or a non-empty list")
    try:
        train_config(cfg, 0)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"training: {exc}") from None


def episode_config(cfg) -> EpisodeConfig:
    return EpisodeConfig(**cfg["episode"])


def arch_config(cfg) -> ArchConfig:
    m, bb = cfg["method"], cfg["backbone"]
    return ArchConfig(cfg["dataset"]["embedding_dim"], tuple(m["gcn_layers"]), m["corr_hidden"],
                      m["embed_hidden"], tuple(bb["channels"]), tuple(bool(p) for p in bb["pools"]))


def train_config(cfg, seed: int) -> TrainConfig:
    return TrainConfig(**cfg["training"], seed=int(seed), episode=episode_config(cfg))


def seeds_of(cfg) -> list[int]:
    return [int(s) for s in cfg["evaluation"]["seeds"]] if cfg["evaluation"]["seeds"] else [int(cfg["seed"])]


def _int_seed(root: int, name: str) -> int:
    return int(child_seed(root, name).generate_state(1)[0])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _out(cfg) -> Path:
    p = Path(cfg["output"]["dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_resolved(cfg, name: str = "config.resolved.yaml") -> Path:
    path = _out(cfg) / name
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def cmd_generate(cfg, force: bool = False) -> list[Path]:
    d = cfg["dataset"]
    root = Path(d["dir"])
    paths = [root / f for f in SPLIT_FILES.values()]
    if not force and any(p.exists() for p in paths):
        raise DatasetError(f"dataset files already exist in {root}; pass --force to overwrite")
    root.mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic(d["n_type1"], d["n_type2"], d["samples_per_composition"], d["image_size"],
                            d["noise_sigma"], _int_seed(cfg["seed"], "data"), n_splits=3)
    for split, path in zip(SPLIT_FILES, paths):
        save_manifest(ds.split_view(split), path)
    (root / "dataset.resolved.yaml").write_text(yaml.safe_dump({"seed": cfg["seed"], "dataset": d}, sort_keys=True))
    log.info("wrote %d samples to %s", len(ds), root)
    return paths


def load_dataset(cfg):
    root = Path(cfg["dataset"]["dir"])
    missing = [f for f in SPLIT_FILES.values() if not (root / f).exists()]
    if missing:
        raise DatasetError(f"dataset missing in {root}: {', '.join(missing)} (run `czsl generate`)")
    return merge([load_manifest(root / f) for f in SPLIT_FILES.values()])


def cmd_pretrain(cfg, dataset=None, force: bool = False) -> Backbone:
    """Pretrain on base compositions, or load the cached backbone."""
    out = _out(cfg)
    path, meta_path = out / "backbone.params", out / "backbone.json"
    pools = tuple(bool(p) for p in cfg["backbone"]["pools"])
    if path.exists() and not force:
        bb = Backbone(dc.ParamTree.load(path), pools, pretrained=True, meta=json.loads(meta_path.read_text()))
        _check_backbone(bb, cfg)
        return bb
    dataset = dataset if dataset is not None else load_dataset(cfg)
    b = cfg["backbone"]
    bb, _ = pretrain_backbone(dataset, b["epochs"], b["batch_size"], b["lr"], child_rng(cfg["seed"], "pretrain"),
                              b["weight_decay"], arch_config(cfg))
    bb.params.save(path)
    meta_path.write_text(json.dumps(bb.meta, sort_keys=True))
    return bb


def _check_backbone(bb: Backbone, cfg) -> None:
    chans = list(cfg["backbone"]["channels"])
    got = [bb.params[f"bb.conv{i}.w"].shape[0] for i in range(len(chans)) if f"bb.conv{i}.w" in bb.params]
    if got != chans:
        raise ConfigError(f"cached backbone has channels {got}, config asks for {chans}")


def _seed_dir(cfg, seed: int) -> Path:
    p = _out(cfg) / f"{cfg['method']['name']}-seed{seed}"
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_train(cfg, dataset=None, backbone=None, bank=None, resume: bool = False) -> dict[int, Path]:
    """Meta-train one model per seed; returns the selected-checkpoint paths."""
    if cfg["method"]["name"] != "ours":
        log.info("method %s has no meta-training stage", cfg["method"]["name"])
        return {}
    dataset = dataset if dataset is not None else load_dataset(cfg)
    backbone = backbone or cmd_pretrain(cfg, dataset)
    bank = bank or FeatureBank(dataset, backbone)
    arch = arch_config(cfg)
    out = {}
    for seed in seeds_of(cfg):
        tc = train_config(cfg, seed)
        sd = _seed_dir(cfg, seed)
        provider = EmbeddingProvider.for_dataset(dataset, arch.d_w, cfg["seed"])
        model = Model(init_params(arch, child_rng(seed, "init")), backbone, provider, arch, tc.inner_lr, tc.inner_steps)
        res = train(dataset, model, tc, bank, checkpoint_dir=sd / "checkpoint", resume=resume,
                    log_path=sd / "train_log.tsv")
        res.model.theta.save(sd / "model.params")
        out[seed] = sd / "model.params"
        log.info("seed %d: selected episode %d (val HM %.2f)", seed, res.best_episode, res.best_hm)
    return out


def sample_test_episodes(cfg, dataset, seed: int):
    rng = child_rng(seed, "sampler.test")
    ec = episode_config(cfg)
    return [sample_episode(dataset, Split.TEST, ec, rng) for _ in range(cfg["evaluation"]["n_test_episodes"])]


def _predict_all(cfg, dataset, backbone, bank, episodes, seed: int):
    name = cfg["method"]["name"]
    m = cfg["method"]
    workers = max(1, int(cfg["evaluation"]["workers"]))
    if name == "ours":
        arch = arch_config(cfg)
        theta = dc.ParamTree.load(_seed_dir(cfg, seed) / "model.params")
        tc = train_config(cfg, seed)
        model = Model(theta, backbone, EmbeddingProvider.for_dataset(dataset, arch.d_w, cfg["seed"]), arch,
                      tc.inner_lr, tc.inner_steps)

        def one(i):
            return evaluate_model(model, [episodes[i]], dataset, bank)[0]
    else:
        provider = EmbeddingProvider.for_dataset(dataset, cfg["dataset"]["embedding_dim"], cfg["seed"])

        def one(i):
            rng = child_rng(seed, f"baseline.{i}")
            kw = dict(iters=m["baseline_iters"], lr=m["baseline_lr"], batch=m["baseline_batch"], rng=rng,
                      dataset=dataset, features=bank)
            if name == "visprod":
                pred = visprod_fit_infer(episodes[i], backbone, **kw)
            else:
                pred = le_fit_infer(episodes[i], backbone, provider, **kw)
            return EpisodeResult.from_episode(episodes[i], pred)
    if workers == 1:
        return [one(i) for i in range(len(episodes))]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(one, range(len(episodes))))


def cmd_evaluate(cfg, dataset=None, backbone=None, bank=None) -> list[dict]:
    """Evaluate each seed on its test episodes; appends records to results.jsonl."""
    dataset = dataset if dataset is not None else load_dataset(cfg)
    backbone = backbone or cmd_pretrain(cfg, dataset)
    bank = bank or FeatureBank(dataset, backbone)
    seeds = seeds_of(cfg)
    records, reports = [], []
    for seed in seeds:
        eps = sample_test_episodes(cfg, dataset, seed)
        rep = aggregate(_predict_all(cfg, dataset, backbone, bank, eps, seed))
        reports.append(rep)
        records.append({"kind": "result", "method": cfg["method"]["name"],
                        "k_support": cfg["episode"]["k_support"], "seed": seed, **rep.to_dict()})
        log.info("seed %d: UA %.2f SA %.2f HM %.2f", seed, rep.ua, rep.sa, rep.hm)
    if len(seeds) > 1:
        records.append({"kind": "summary", "method": cfg["method"]["name"],
                        "k_support": cfg["episode"]["k_support"], "seeds": seeds, **seed_summary(reports)})
    path = _out(cfg) / "results.jsonl"
    with path.open("w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return records


def cmd_run(cfg, resume: bool = False) -> list[dict]:
    write_resolved(cfg)
    dataset = load_dataset(cfg)
    backbone = cmd_pretrain(cfg, dataset)
    bank = FeatureBank(dataset, backbone)
    cmd_train(cfg, dataset, backbone, bank, resume=resume)
    return cmd_evaluate(cfg, dataset, backbone, bank)


_REQUIRED = ("method", "k_support", "ua", "sa", "hm", "ua_ci95", "sa_ci95", "hm_ci95", "n_episodes")


def read_records(paths) -> list[dict]:
    out = []
    for path in paths:
        try:
            lines = Path(path).read_text().splitlines()
        except FileNotFoundError:
            raise ReportError(f"result file {path} not found") from None
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReportError(f"{path}:{n}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ReportError(f"{path}:{n}: record is not an object")
            if rec.get("kind", "result") != "result":
                continue
            missing = [k for k in _REQUIRED if k not in rec]
            if missing:
                raise ReportError(f"{path}:{n}: record lacks {', '.join(missing)}")
            out.append(rec)
    if not out:
        raise ReportError("no result records found")
    return out


def cmd_report(paths) -> str:
    return format_table(read_records(paths))


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="czsl", description="Reference-limited compositional zero-shot experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("generate", "pretrain", "train", "evaluate", "run"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key, e.g. --set training.max_episodes=500")
        if name in ("generate", "pretrain"):
            p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name in ("train", "run"):
            p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p = sub.add_parser("report")
    p.add_argument("results", nargs="+", help="results.jsonl files")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(cmd_report(args.results))
            return EXIT_OK
        cfg = load_config(args.config, args.set)
        if args.command == "generate":
            cmd_generate(cfg, args.force)
        elif args.command == "pretrain":
            write_resolved(cfg)
            cmd_pretrain(cfg, force=args.force)
        elif args.command == "train":
            write_resolved(cfg)
            cmd_train(cfg, resume=args.resume)
        elif args.command == "evaluate":
            write_resolved(cfg)
            cmd_evaluate(cfg)
        else:
            records = cmd_run(cfg, resume=args.resume)
            print(format_table([r for r in records if r["kind"] == "result"]))
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DatasetError, ManifestError, ReportError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (SamplerExhaustedError, EpisodeError) as exc:
        log.error("sampler error: %s", exc)
        return EXIT_SAMPLER
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
