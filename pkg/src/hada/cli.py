"""Command-line interface: ``hada {gen-synth,train,eval,embed,compare}``.

Every run reads one JSON config; flags override individual keys and the
resolved config is echoed to stderr as the run header. ``HADA_SEED`` overrides
the config seed (an explicit ``--seed`` wins over both).

Exit codes: 0 success, 2 config/usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .errors import CheckpointError, ConfigError, HadaError, NumericalError, StoreError
from .evaluation import RetrievalSplit, baseline_b1, embed_items, evaluate
from .experiment import Row, compare, format_table, train_variant
from .featstore import (
    FeatureStore,
    SyntheticConfig,
    SyntheticModel,
    generate_synthetic,
    split_dataset,
    write_embeddings,
    write_store,
)
from .model import ModelConfig, init_params
from .training import TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


@dataclass
class RunConfig:
    store: str = "store"
    out_dir: str = "runs"
    models: list | None = None
    anchor: str | None = None
    variant: str = "hada"
    d_shared: int = 512
    heads: int = 4
    d_out: int = 512
    d_h: int = 256
    head_depth: int = 2
    proj_bias: bool = True
    normalize_anchor: bool = True
    batch_size: int = 20
    epochs: int = 50
    lr_max: float = 1e-4
    lr_min: float = 5e-6
    weight_decay: float = 0.02
    dropout: float = 0.7
    tau_init: float = 0.07
    alpha_init: float = 0.5
    patience: int = 5
    restart_schedule: bool = True
    deterministic_log: bool = False
    mode: str = "weighted"
    split: str = "test"
    seed: int = 0
    synthetic: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path=None, overrides=None):
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "HADA_SEED" in os.environ:
            try:
                doc["seed"] = int(os.environ["HADA_SEED"])
            except ValueError as exc:
                raise ConfigError("HADA_SEED must be an integer") from exc
        doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
        cfg = cls(**doc)
        cfg.train_config().validate()
        return cfg

    def model_config(self, manifest, variant=None):
        return ModelConfig.from_manifest(
            manifest, self.models, d_shared=self.d_shared, heads=self.heads, d_out=self.d_out,
            d_h=self.d_h, head_depth=self.head_depth, proj_bias=self.proj_bias,
            dropout=self.dropout, anchor=self.anchor, variant=variant or self.variant,
            normalize_anchor=self.normalize_anchor, tau_init=self.tau_init,
        )

    def train_config(self, phase=1):
        return TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs, lr_max=self.lr_max, lr_min=self.lr_min,
            weight_decay=self.weight_decay, dropout=self.dropout, tau_init=self.tau_init,
            alpha_init=self.alpha_init, phase=phase, patience=self.patience, seed=self.seed,
            restart_schedule=self.restart_schedule, deterministic_log=self.deterministic_log,
        )

    def synthetic_config(self):
        syn = dict(self.synthetic)
        syn.pop("fractions", None)
        models = syn.pop("models", None)
        allowed = {f.name for f in fields(SyntheticConfig)}
        unknown = sorted(set(syn) - allowed)
        if unknown:
            raise ConfigError(f"unknown synthetic keys: {unknown}")
        if models is not None:
            syn["models"] = [SyntheticModel(**{k: tuple(v) if isinstance(v, list) else v for k, v in m.items()})
                             for m in models]
        syn.setdefault("seed", self.seed)
        return SyntheticConfig(**syn)


def _header(cfg, command):
    print(json.dumps({"command": command, "config": asdict(cfg)}, sort_keys=True), file=sys.stderr)


def _open_store(cfg):
    return FeatureStore.open(cfg.store)


def cmd_gen_synth(args):
    cfg = RunConfig.load(args.config, {"seed": args.seed, "store": args.out})
    syn = dict(cfg.synthetic)
    for key in ("items", "noise", "texts_per_image", "latent_dim"):
        val = getattr(args, key)
        if val is not None:
            syn[key] = val
    cfg.synthetic = syn
    if args.seed is not None:
        cfg.synthetic["seed"] = args.seed
    _header(cfg, "gen-synth")
    records, manifest = generate_synthetic(cfg.synthetic_config())
    fractions = args.fractions or cfg.synthetic.get("fractions", (0.8, 0.1, 0.1))
    manifest = split_dataset(manifest, fractions, cfg.seed)
    write_store(records, manifest, cfg.store)
    counts = {s: len(manifest.images(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.images())} images, {len(manifest.texts())} texts to {cfg.store} {counts}")
    return EXIT_OK


def cmd_train(args):
    if args.phase == 2 and not args.resume:
        print("error: --phase 2 requires --resume CHECKPOINT", file=sys.stderr)
        return EXIT_CONFIG
    cfg = RunConfig.load(args.config, {"seed": args.seed, "out_dir": args.out, "store": args.store,
                                       "variant": args.variant, "epochs": args.epochs,
                                       "deterministic_log": args.deterministic_log or None})
    _header(cfg, "train")
    store = _open_store(cfg)
    if args.resume:
        params, opt = load_checkpoint(args.resume, with_optimizer=True)
    else:
        params, opt = init_params(cfg.model_config(store.manifest), cfg.seed), None
    offset = opt.step if opt is not None else 0
    result = train(store, cfg.train_config(args.phase), params, cfg.out_dir, optimizer=opt, schedule_offset=offset)
    print(f"phase {args.phase}: best val RSum {result.best_rsum:.2f} at epoch {result.best_epoch}; "
          f"checkpoint {result.checkpoint}")
    return EXIT_OK


def _write_report(report, path):
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(report.dumps(), encoding="utf-8")


def _single_row(name, report):
    return Row(name, report)


def cmd_eval(args):
    cfg = RunConfig.load(args.config, {"store": args.store, "split": args.split, "mode": args.mode})
    _header(cfg, "eval")
    store = _open_store(cfg)
    mode = cfg.mode
    if mode == "b1":
        rs = RetrievalSplit.from_manifest(store.manifest, cfg.split)
        reports = []
        for ckpt, model in ((args.ckpt_a, args.model_a), (args.ckpt_b, args.model_b)):
            if ckpt:
                p = load_checkpoint(ckpt)
                reports.append(evaluate(p, store, cfg.split, "weighted" if p.phase == 2 else "fused"))
            elif model:
                reports.append(evaluate(None, store, cfg.split, "single", model))
            else:
                print("error: b1 needs --ckpt-a/--model-a and --ckpt-b/--model-b", file=sys.stderr)
                return EXIT_CONFIG
        report = baseline_b1(reports[0], reports[1], rs)
    elif mode == "single":
        model = args.model or cfg.anchor or store.manifest.model_ids[0]
        if model == "anchor":
            model = cfg.anchor or store.manifest.model_ids[0]
        report = evaluate(None, store, cfg.split, "single", model)
    else:
        if not args.ckpt:
            print(f"error: --mode {mode} requires --ckpt", file=sys.stderr)
            return EXIT_CONFIG
        report = evaluate(load_checkpoint(args.ckpt), store, cfg.split, mode)
    _write_report(report, args.report)
    print(format_table([_single_row(mode, report)]))
    return EXIT_OK


def cmd_embed(args):
    cfg = RunConfig.load(args.config, {"store": args.store, "split": args.split})
    _header(cfg, "embed")
    store = _open_store(cfg)
    params = load_checkpoint(args.ckpt)
    split = None if cfg.split == "all" else cfg.split
    images = sorted(store.manifest.images(split))
    texts = sorted(store.manifest.texts(split))
    mat = np.concatenate([embed_items(params, store, images, "image"),
                          embed_items(params, store, texts, "text")])
    write_embeddings(args.out, images + texts, ["image"] * len(images) + ["text"] * len(texts), mat)
    print(f"wrote {len(images) + len(texts)} embeddings of dim {params.config.d_h} to {args.out}")
    return EXIT_OK


def cmd_compare(args):
    cfg = RunConfig.load(args.config, {"store": args.store, "split": args.split, "seed": args.seed,
                                       "out_dir": args.out})
    _header(cfg, "compare")
    store = _open_store(cfg)
    out = Path(cfg.out_dir)
    if args.hada_ckpt:
        hada = load_checkpoint(args.hada_ckpt)
    else:
        hada = train_variant(store, cfg.model_config(store.manifest), cfg.train_config(), "hada", cfg.seed,
                             out / "hada")
    if args.b2_ckpt:
        b2 = load_checkpoint(args.b2_ckpt)
    else:
        b2 = train_variant(store, cfg.model_config(store.manifest), cfg.train_config(), "b2", cfg.seed, out / "b2")
    rows = compare(store, cfg.split, hada=hada, b2=b2, reference=args.reference)
    table = format_table(rows)
    print(table)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.txt").write_text(table + "\n", encoding="utf-8")
    doc = [{"method": r.name, "delta_rsum": r.delta, **r.report.to_json()} for r in rows]
    (out / "compare.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hada", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic feature store")
    p.add_argument("--config")
    p.add_argument("--items", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--texts-per-image", dest="texts_per_image", type=int)
    p.add_argument("--fractions", type=float, nargs=3)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train one phase")
    p.add_argument("--config")
    p.add_argument("--phase", type=int, choices=(1, 2), default=1)
    p.add_argument("--resume", help="checkpoint to resume from (required for phase 2)")
    p.add_argument("--store")
    p.add_argument("--out")
    p.add_argument("--variant", choices=("hada", "b2"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic-log", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate retrieval on a split")
    p.add_argument("--config")
    p.add_argument("--store")
    p.add_argument("--split")
    p.add_argument("--mode", choices=("fused", "weighted", "b2", "single", "b1"))
    p.add_argument("--ckpt")
    p.add_argument("--model")
    p.add_argument("--ckpt-a", dest="ckpt_a")
    p.add_argument("--ckpt-b", dest="ckpt_b")
    p.add_argument("--model-a", dest="model_a")
    p.add_argument("--model-b", dest="model_b")
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="dump embeddings for external indexers")
    p.add_argument("--config")
    p.add_argument("--store")
    p.add_argument("--split", help="train/val/test or 'all'")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("compare", help="single models vs B1 vs B2 vs HADA")
    p.add_argument("--config")
    p.add_argument("--store")
    p.add_argument("--split")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--hada-ckpt", dest="hada_ckpt")
    p.add_argument("--b2-ckpt", dest="b2_ckpt")
    p.add_argument("--reference", help="row name for the dR column (default: single:<anchor>)")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, StoreError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HadaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
