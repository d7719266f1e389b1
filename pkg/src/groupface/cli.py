"""Command line entry point: ``groupface {gen-data,train,eval,ablate,export}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint
from .data import (
    SyntheticDataConfig,
    build_dataclass,
    check_disjoint,
    generate_synthetic_dataset,
    load_dataset,
    read_key_values,
    save_dataset,
)
from .evaluation import ABLATION_CONFIGS, AblationSuite, evaluate, export_embeddings, run_ablation
from .metrics import SimilarityConfig
from .model import GroupFaceModel, ModelConfig
from .objectives import LossConfig
from .training import TrainConfig, parse_schedule, train

log = logging.getLogger("groupface")

ALIASES = {"lambda": "lam", "B": "window", "K": "num_groups", "M": "num_identities"}
_SECTIONS = (ModelConfig, LossConfig, TrainConfig)


def split_sections(values: dict[str, str], sections=_SECTIONS) -> list[dict[str, str]]:
    """Route each key to the one config class that owns it; unknown keys are an error."""
    out: list[dict[str, str]] = [{} for _ in sections]
    for key, raw in values.items():
        name = ALIASES.get(key, key)
        owners = [i for i, cls in enumerate(sections) if name in {f.name for f in fields(cls)}]
        if not owners:
            raise KeyError(f"unknown config key {key!r}")
        out[owners[0]][name] = raw
    return out


def training_configs(values: dict[str, str], data, seed: int | None):
    m_vals, l_vals, t_vals = split_sections(values)
    schedule = t_vals.pop("lr_schedule", None)
    train_part = data.train()
    m_vals.setdefault("input_dim", str(data.input_dim))
    m_vals.setdefault("num_identities", str(int(train_part.identity_labels.max()) + 1))
    mcfg = build_dataclass(ModelConfig, m_vals)
    lcfg = build_dataclass(LossConfig, l_vals)
    if seed is not None:
        t_vals["seed"] = str(seed)
    tcfg = build_dataclass(TrainConfig, t_vals)
    if schedule is not None:
        tcfg = TrainConfig(**{**asdict(tcfg), "lr_schedule": parse_schedule(schedule)})
    return mcfg, lcfg, tcfg


def cmd_gen_data(args) -> int:
    values = read_key_values(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    cfg = build_dataclass(SyntheticDataConfig, values)
    data = generate_synthetic_dataset(cfg)
    save_dataset(data, args.out, meta=asdict(cfg))
    print(f"wrote {len(data)} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    values = read_key_values(args.config) if args.config else {}
    data = load_dataset(args.data)
    check_disjoint(data)
    mcfg, lcfg, tcfg = training_configs(values, data, args.seed)
    model = GroupFaceModel(mcfg, seed=tcfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_dump = {"model": mcfg.to_dict(), "loss": asdict(lcfg), "train": asdict(tcfg)}
    (out / "config.json").write_text(json.dumps(config_dump, indent=2) + "\n", encoding="utf-8")
    art = train(model, data, lcfg, tcfg, out_dir=out)
    print(f"final loss {art.losses()[-1]:.6f}; checkpoint {art.checkpoint_path}")
    if art.report is not None:
        print(art.report.to_json())
    return 0


def _similarity(args) -> SimilarityConfig:
    kw = {}
    if args.beta is not None:
        kw["beta"] = args.beta
    if args.gamma is not None:
        kw["gamma"] = args.gamma
    return SimilarityConfig(**kw)


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    check_disjoint(data)
    report = evaluate(
        model,
        data.eval(),
        _similarity(args),
        args.group_similarity,
        seed=args.seed or 0,
        roc_csv=args.roc,
    )
    report.save(args.out)
    print(report.to_json())
    return 0


def load_suite(path, seed: int | None) -> tuple[AblationSuite, object]:
    values = read_key_values(path)
    configs = [c.strip() for c in values.pop("configs", ",".join(ABLATION_CONFIGS)).split(",") if c.strip()]
    unknown = set(configs) - set(ABLATION_CONFIGS)
    if unknown:
        raise KeyError(f"unknown ablation configs {sorted(unknown)}")
    seeds = [int(s) for s in values.pop("seeds", "0,1,2").split(",") if s.strip()]
    data_dir = values.pop("data", None)
    data_keys = {f.name for f in fields(SyntheticDataConfig)} - {"seed"}
    data_vals = {k: values.pop(k) for k in list(values) if k in data_keys}
    if "data_seed" in values:
        data_vals["seed"] = values.pop("data_seed")
    if seed is not None:
        data_vals["seed"] = str(seed)
    sim_vals = {k: values.pop(k) for k in list(values) if k in ("beta", "gamma")}
    m_vals, l_vals, t_vals = split_sections(values)
    if "seed" in t_vals:
        raise KeyError("use 'seeds' (a list) in ablation suites")
    schedule = t_vals.pop("lr_schedule", None)
    tcfg = build_dataclass(TrainConfig, t_vals)
    if schedule is not None:
        tcfg = TrainConfig(**{**asdict(tcfg), "lr_schedule": parse_schedule(schedule)})
    suite = AblationSuite(
        configs=configs,
        seeds=seeds,
        data=build_dataclass(SyntheticDataConfig, data_vals),
        model=build_dataclass(ModelConfig, m_vals),
        loss=build_dataclass(LossConfig, l_vals),
        train=tcfg,
        sim=build_dataclass(SimilarityConfig, sim_vals),
    )
    data = None
    if data_dir is not None:
        data = load_dataset(Path(path).parent / data_dir)
        check_disjoint(data)
    return suite, data


def cmd_ablate(args) -> int:
    suite, data = load_suite(args.suite, args.seed)
    rows = run_ablation(suite, out_csv=args.out, data=data)
    for r in rows:
        if r["seed"] == "mean":
            print(f"{r['config']:>15}  pair_accuracy {r['pair_accuracy']:.4f}  train_label_kl {r['train_label_kl']:.4f}")
    return 0


def cmd_export(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    out = export_embeddings(model, data, args.out)
    print(f"exported {len(data)} records to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groupface", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help="override the seed in the config")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--config", type=Path)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-phase training")
    t.add_argument("--config", type=Path)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--group-similarity", action="store_true")
    e.add_argument("--beta", type=float)
    e.add_argument("--gamma", type=float)
    e.add_argument("--roc", type=Path, help="also write ROC points as CSV")
    e.add_argument("--out", type=Path, required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation suite")
    a.add_argument("--suite", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export", help="export embeddings")
    x.add_argument("--checkpoint", type=Path, required=True)
    x.add_argument("--data", type=Path, required=True)
    x.add_argument("--out", type=Path, required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
