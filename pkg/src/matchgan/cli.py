"""``matchgan`` command line: train, eval and grid subcommands.

Config files are flat ``dotted.key = value`` lines; values are JSON
literals or bare strings. Every run writes its fully resolved config as
``config.txt`` next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import datagen as dg
from . import labelspace as ls
from . import metrics as M
from .trainer import TrainingConfig, ablation_setup, load_generator, train, translation_grid

log = logging.getLogger("matchgan")

SCHEMAS = {
    "celeba": ls.celeba_schema,
    "rafd": ls.rafd_schema,
    "synthetic": dg.synthetic_schema,
    "synthetic8": dg.synthetic8_schema,
}


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"          # synthetic | image_folder
    schema: str = "synthetic8"
    image_dir: Optional[str] = None
    attribute_file: Optional[str] = None
    test_attribute_file: Optional[str] = None
    crop_size: int = 178
    percent_labelled: float = 0.05
    n_labelled: Optional[int] = None
    n_train: int = 4000                 # synthetic only
    n_test: int = 400
    n_extractor: int = 2000
    noise_amplitude: float = 0.1
    setup: str = "G"
    out: Optional[str] = None
    seed: int = 0
    train: TrainingConfig = field(default_factory=lambda: TrainingConfig(
        total_iters=5000, image_size=32, g_width=16, d_width=16, log_interval=100,
        checkpoint_interval=1000, sample_interval=1000))

    def resolved_train(self) -> TrainingConfig:
        return ablation_setup(self.setup, dataclasses.replace(self.train, seed=self.seed))


# ---- flat key-value config --------------------------------------------------

def flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def dumps_config(exp: ExperimentConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in flatten(exp).items())


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = json.loads(value)
        except json.JSONDecodeError:
            values[key] = value
    return values


def apply_overrides(obj, values: dict, prefix: str = ""):
    """Return a copy of dataclass ``obj`` with dotted-key ``values`` applied."""
    changes = {}
    known = set()
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            sub = {k: x for k, x in values.items() if k.startswith(key + ".")}
            known |= set(sub)
            if sub:
                changes[f.name] = apply_overrides(v, sub, key + ".")
        elif key in values:
            known.add(key)
            changes[f.name] = values[key]
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "decay_start" not in changes and "total_iters" in changes and hasattr(obj, "decay_start"):
        changes["decay_start"] = None
    return dataclasses.replace(obj, **changes)


def config_hash(exp: ExperimentConfig) -> str:
    return hashlib.sha256(dumps_config(exp).encode()).hexdigest()[:12]


# ---- data -------------------------------------------------------------------

@dataclass
class ExperimentData:
    schema: ls.AttributeSchema
    records: list
    source: object
    test_images: np.ndarray
    test_labels: np.ndarray
    extractor_images: Optional[np.ndarray] = None
    extractor_labels: Optional[list] = None


def load_data(exp: ExperimentConfig) -> ExperimentData:
    schema = SCHEMAS[exp.schema]()
    size = exp.train.image_size
    if exp.dataset == "synthetic":
        spec = dg.SyntheticSpec(schema, size, noise_amplitude=exp.noise_amplitude)
        classes = dg.all_classes(schema)
        X, Y = dg.make_synthetic_dataset(spec, classes, exp.n_train, seed=exp.seed * 3 + 1)
        Xt, Yt = dg.make_synthetic_dataset(spec, classes, exp.n_test, seed=exp.seed * 3 + 2)
        Xe, Ye = dg.make_synthetic_dataset(spec, classes, exp.n_extractor, seed=exp.seed * 3 + 3)
        return ExperimentData(schema, list(zip(range(len(Y)), Y)), dg.ArrayImageSource(X),
                              Xt, np.asarray(Yt), Xe, Ye)
    if exp.dataset == "image_folder":
        if not exp.image_dir or not exp.attribute_file:
            raise ValueError("image_folder dataset needs image_dir and attribute_file")
        records = dg.load_image_folder(exp.image_dir, exp.attribute_file, schema)
        source = dg.FolderImageSource(exp.crop_size, size)
        if exp.test_attribute_file:
            test = dg.load_image_folder(exp.image_dir, exp.test_attribute_file, schema)
        else:
            test = []
        Xt = source.get([r for r, _ in test]) if test else np.zeros((0, 3, size, size), np.float32)
        Yt = np.asarray([y for _, y in test]).reshape(len(test), schema.n_attr)
        return ExperimentData(schema, records, source, Xt, Yt)
    raise ValueError(f"unknown dataset {exp.dataset!r}")


def make_partition(exp: ExperimentConfig, data: ExperimentData) -> ls.DatasetPartition:
    return ls.split_semi_supervised(data.records, exp.percent_labelled, exp.seed, data.schema,
                                    n_labelled=exp.n_labelled)


# ---- commands ----------------------------------------------------------------

def resolve(args) -> ExperimentConfig:
    exp = ExperimentConfig()
    if getattr(args, "config", None):
        exp = apply_overrides(exp, parse_config_text(Path(args.config).read_text()))
    flags = {
        "dataset": args.dataset, "percent_labelled": args.percent_labelled, "setup": args.setup,
        "train.weights.lambda_mch": args.lambda_mch, "train.total_iters": args.iters,
        "train.batch_size": args.batch_size, "seed": args.seed, "out": args.out,
    }
    exp = apply_overrides(exp, {k: v for k, v in flags.items() if v is not None})
    if exp.out is None:
        root = os.environ.get("MATCHGAN_OUT", "runs")
        exp = dataclasses.replace(exp, out=str(Path(root) / f"setup{exp.setup}_seed{exp.seed}"))
    if exp.setup.upper() not in "ABCDEFGH" or len(exp.setup) != 1:
        raise ValueError(f"setup must be one of A-H, got {exp.setup!r}")
    return exp


def cmd_train(args) -> int:
    exp = resolve(args)
    out = Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dumps_config(exp))
    data = load_data(exp)
    partition = make_partition(exp, data)
    ls.write_manifest(partition, out / "partition.tsv")
    cfg = exp.resolved_train()
    log.info("training setup %s for %d iterations into %s", exp.setup, cfg.total_iters, out)
    train(cfg, partition, data.source, out_dir=out)
    return 0


def _experiment_for(checkpoint: Path, config: Optional[str]) -> ExperimentConfig:
    path = Path(config) if config else checkpoint.parent / "config.txt"
    return apply_overrides(ExperimentConfig(), parse_config_text(path.read_text()))


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    exp = _experiment_for(ckpt, args.config)
    G, manifest = load_generator(ckpt)
    data = load_data(exp)
    if len(data.test_images) == 0:
        raise ValueError("no test images configured")
    partition = make_partition(exp, data)
    classes = ls.LabelClasses([tuple(c) for c in manifest["classes"]])
    enc = data.schema.encoding
    spec = M.ClassifierSpec(seed=exp.seed)
    lab = partition.labelled_records()
    X_lab = data.source.get([r for r, _ in lab])
    Y_lab = np.asarray([y for _, y in lab])
    if data.extractor_images is not None:
        ext_x, ext_y = data.extractor_images, [classes.class_index.get(tuple(y), -1) for y in data.extractor_labels]
    else:
        ext_x, ext_y = X_lab, [classes.class_index[tuple(y)] for y in Y_lab]
    keep = [i for i, c in enumerate(ext_y) if c >= 0]
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    extractor = None
    if {"fid", "is"} & set(metrics):
        extractor = M.train_extractor(np.asarray(ext_x)[keep], [ext_y[i] for i in keep], classes.K, spec)
    report = []
    h = config_hash(exp)
    for m in metrics:
        if m == "fid":
            pooled, per = M.fid_protocol(G, data.test_images, classes, extractor, per_domain=True)
            report.append({"metric": "fid", "value": pooled, "per_domain": per, "config_hash": h})
        elif m == "is":
            fakes = np.concatenate([M.translate(G, data.test_images, [c] * len(data.test_images))
                                    for c in classes.classes])
            mean, std = M.inception_score(extractor.classify(fakes), folds=10)
            report.append({"metric": "is", "value": mean, "std": std, "config_hash": h})
        elif m == "gan_train":
            v = M.gan_train(G, X_lab, data.test_images, data.test_labels, classes, enc, spec)
            report.append({"metric": "gan_train", "value": v, "config_hash": h})
        elif m == "gan_test":
            v = M.gan_test(G, X_lab, Y_lab, data.test_images, classes, enc, spec)
            report.append({"metric": "gan_test", "value": v, "config_hash": h})
        else:
            raise ValueError(f"unknown metric {m!r}")
    report_path = Path(args.report) if args.report else ckpt.parent / "report.jsonl"
    with open(report_path, "a") as fh:
        for rec in report:
            fh.write(json.dumps(rec) + "\n")
            print(json.dumps(rec))
    return 0


def parse_targets(spec: str, schema: ls.AttributeSchema) -> List[tuple]:
    """``;``-separated targets: bit strings ``1,0,0,1,0`` or attribute names joined by ``+``."""
    targets = []
    for item in (s.strip() for s in spec.split(";")):
        if not item:
            continue
        if all(ch in "01, " for ch in item):
            bits = [int(b) for b in item.replace(",", " ").split()]
        else:
            bits = [0] * schema.n_attr
            for name in item.split("+"):
                bits[schema.index_of(name.strip())] = 1
        targets.append(schema.validate(bits))
    if not targets:
        raise ValueError("empty target list")
    return targets


def cmd_grid(args) -> int:
    ckpt = Path(args.checkpoint)
    G, manifest = load_generator(ckpt)
    s = manifest["schema"]
    schema = ls.AttributeSchema(tuple(s["attribute_names"]), tuple(map(tuple, s["exclusive_groups"])),
                                s["encoding"])
    targets = parse_targets(args.targets, schema)
    size = manifest["config"]["image_size"]
    if args.inputs and args.inputs[0].startswith("synthetic:"):
        n = int(args.inputs[0].split(":", 1)[1])
        spec = dg.SyntheticSpec(schema, size)
        images, _ = dg.make_synthetic_dataset(spec, dg.all_classes(schema), n, seed=args.seed)
    else:
        src = dg.FolderImageSource(args.crop_size, size)
        images = src.get(args.inputs)
    tiles = translation_grid(G, images, targets)
    dg.save_png(dg.tile_grid(tiles), args.output)
    print(f"wrote {args.output}: {tiles.shape[0]}x{tiles.shape[1]} tiles")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matchgan")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--dataset", choices=["synthetic", "image_folder"])
    t.add_argument("--percent-labelled", type=float)
    t.add_argument("--setup", choices=list("ABCDEFGH"))
    t.add_argument("--lambda-mch", type=float)
    t.add_argument("--iters", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="resolved config (default: config.txt beside the checkpoint)")
    e.add_argument("--metrics", default="fid,is,gan_train,gan_test")
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("grid", help="write a translation grid PNG")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--inputs", nargs="+", required=True, help="image files, or synthetic:N")
    g.add_argument("--targets", required=True)
    g.add_argument("--output", default="grid.png")
    g.add_argument("--crop-size", type=int, default=178)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grid)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, ls.LabelSpaceError, dg.DataError) as e:
        print(f"matchgan {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
