"""Semi-supervised training loop: labelled/unlabelled alternation, n_G critic
updates per generator update, linear learning-rate decay and the ablation
switches deciding which data feeds the match loss."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from . import labelspace as ls
from .datagen import random_flip, save_png, tile_grid
from .losses import (LossWeights, classification_loss, cycle_loss, gradient_penalty,
                     total_loss_D, total_loss_G, wasserstein_critic_loss)
from .nets import build_discriminator, build_generator, build_match_head, Generator
from .pretext import (build_fake_triplets, build_real_triplets, euclidean_loss_on,
                      group_positions, match_loss)

log = logging.getLogger(__name__)

MCH_VARIANTS = ("concat_ce", "euclidean_triplet", "off")
POOLS = ("real_labelled", "fake_labelled", "fake_unlabelled")


@dataclass
class TrainingConfig:
    total_iters: int = 200_000
    batch_size: int = 16
    classes_per_batch: int = 4
    d_per_g: int = 5
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    decay_start: Optional[int] = None  # None -> total_iters // 2
    weights: LossWeights = field(default_factory=LossWeights)
    use_mch_real_labelled: bool = True
    use_mch_fake_labelled: bool = True
    use_mch_fake_unlabelled: bool = True
    mch_variant: str = "concat_ce"
    triplet_margin: float = 1.0
    triplet_plan: str = "sampled"
    use_unlabelled: bool = True
    seed: int = 0
    # network builders
    image_size: int = 128
    g_width: int = 64
    g_res: int = 6
    d_width: int = 64
    d_depth: Optional[int] = None
    d_max_width: Optional[int] = None
    dtype: str = "float32"
    flip: bool = False
    # plumbing
    log_interval: int = 100
    checkpoint_interval: int = 10_000
    sample_interval: int = 1_000

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.decay_start is None:
            self.decay_start = self.total_iters // 2
        if self.batch_size % self.classes_per_batch:
            raise ValueError("batch_size must be divisible by classes_per_batch")
        if self.d_per_g < 1:
            raise ValueError("d_per_g must be >= 1")
        if not 0 <= self.decay_start <= self.total_iters:
            raise ValueError("decay_start must lie in [0, total_iters]")
        if self.mch_variant not in MCH_VARIANTS:
            raise ValueError(f"mch_variant must be one of {MCH_VARIANTS}")

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def mch_enabled(self, pool: str) -> bool:
        if self.mch_variant == "off":
            return False
        return getattr(self, f"use_mch_{pool}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def ablation_setup(letter: str, cfg: Optional[TrainingConfig] = None) -> TrainingConfig:
    """Configure one of the ablation setups A-H.

    A/C are the baseline without match loss (A also drops the unlabelled
    pool); B keeps only labelled data with real+fake-labelled triplets;
    D-G vary which pools feed the match loss; H is G with the Euclidean
    triplet loss.
    """
    cfg = cfg or TrainingConfig()
    table = {
        #    real   fake_l fake_u  variant              unlabelled
        "A": (False, False, False, "off", False),
        "B": (True, True, False, "concat_ce", False),
        "C": (False, False, False, "off", True),
        "D": (False, True, True, "concat_ce", True),
        "E": (True, False, False, "concat_ce", True),
        "F": (True, True, False, "concat_ce", True),
        "G": (True, True, True, "concat_ce", True),
        "H": (True, True, True, "euclidean_triplet", True),
    }
    try:
        real, fake_l, fake_u, variant, unlabelled = table[letter.upper()]
    except KeyError:
        raise ValueError(f"unknown ablation setup {letter!r}") from None
    return dataclasses.replace(cfg, use_mch_real_labelled=real, use_mch_fake_labelled=fake_l,
                               use_mch_fake_unlabelled=fake_u, mch_variant=variant,
                               use_unlabelled=unlabelled)


def lr_at(i: int, cfg: TrainingConfig, base: Optional[float] = None) -> float:
    """Constant until ``decay_start``, then linear to zero at ``total_iters``."""
    base = cfg.lr_d if base is None else base
    N, start = cfg.total_iters, cfg.decay_start
    if i <= start:
        return base
    if N == start:
        return 0.0
    return base * max(N - i, 0) / (N - start)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


class Trainer:
    """Holds the networks, optimizers and RNG streams of one training run."""

    def __init__(self, cfg: TrainingConfig, partition: ls.DatasetPartition, source,
                 with_match_head: bool = True):
        self.cfg = cfg
        self.partition = partition if cfg.use_unlabelled else partition.without_unlabelled()
        self.source = source
        self.schema = partition.schema
        self.classes = partition.classes
        n_attr = self.schema.n_attr
        dt = cfg.torch_dtype

        seeds = np.random.SeedSequence(cfg.seed).generate_state(8)
        self.G = build_generator(cfg.image_size, n_attr, cfg.g_width, cfg.g_res, seed=int(seeds[0]), dtype=dt)
        self.D = build_discriminator(cfg.image_size, n_attr, cfg.d_width, cfg.d_depth, cfg.d_max_width,
                                     seed=int(seeds[1]), dtype=dt)
        self.head = None
        if with_match_head:
            self.head = build_match_head(self.D.emb_channels, (self.D.emb_spatial,) * 2,
                                         seed=int(seeds[2]), dtype=dt)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_G = torch.optim.Adam(self.G.parameters(), lr=cfg.lr_g, betas=betas)
        d_params = list(self.D.parameters()) + (list(self.head.parameters()) if self.head else [])
        self.opt_D = torch.optim.Adam(d_params, lr=cfg.lr_d, betas=betas)

        self.rng_data = np.random.default_rng(int(seeds[3]))
        self.rng_targets = np.random.default_rng(int(seeds[4]))
        self.rng_triplets = np.random.default_rng(int(seeds[5]))
        self.rng_flip = np.random.default_rng(int(seeds[6]))
        self.gp_gen = torch.Generator().manual_seed(int(seeds[7]))

        self.iteration = 0
        self.trace: List[Tuple[int, Tuple[str, ...]]] = []
        self.history: List[dict] = []
        self.pool_counts: Dict[str, int] = {p: 0 for p in POOLS}
        self._class_array = torch.as_tensor(self.classes.as_array(), dtype=dt)

        if cfg.mch_variant != "off" and self.head is None and cfg.mch_variant == "concat_ce":
            raise ValueError("concat_ce match loss needs a match head")

    # ---- batches --------------------------------------------------------

    def _images(self, refs) -> torch.Tensor:
        x = self.source.get(refs)
        if self.cfg.flip:
            x = random_flip(x, self.rng_flip)
        return torch.as_tensor(np.ascontiguousarray(x), dtype=self.cfg.torch_dtype)

    def _labels(self, class_ids) -> torch.Tensor:
        return self._class_array[torch.as_tensor(class_ids, dtype=torch.long)]

    def sample_batch(self, odd: bool):
        """Real images, source class ids (None when unlabelled), target class ids."""
        B, k = self.cfg.batch_size, self.cfg.classes_per_batch
        p = self.partition
        if odd or not p.unlabelled:
            refs, labels, _ = ls.sample_labelled_batch(p, B, k, self.rng_data)
            src = [self.classes.class_index[y] for y in labels] if odd else None
        else:
            refs = ls.sample_unlabelled_batch(p.unlabelled, B, self.rng_data)
            src = None
        trg_labels, _ = ls.sample_target_batch(self.classes, B, k, self.rng_targets)
        trg = [self.classes.class_index[y] for y in trg_labels]
        return self._images(refs), src, trg

    # ---- one iteration --------------------------------------------------

    def _mch(self, emb, class_ids, real: bool):
        build = build_real_triplets if real else build_fake_triplets
        triplets = build(group_positions(class_ids), self.rng_triplets, self.cfg.triplet_plan)
        if self.cfg.mch_variant == "euclidean_triplet":
            return euclidean_loss_on(emb, triplets, self.cfg.triplet_margin), len(triplets)
        return match_loss(self.head, emb, triplets), len(triplets)

    def train_step(self) -> dict:
        cfg, w = self.cfg, self.cfg.weights
        i = self.iteration + 1
        odd = i % 2 == 1
        lr_g = lr_at(i, cfg, cfg.lr_g)
        lr_d = lr_at(i, cfg, cfg.lr_d)
        for g in self.opt_G.param_groups:
            g["lr"] = lr_g
        for g in self.opt_D.param_groups:
            g["lr"] = lr_d

        x, src, trg = self.sample_batch(odd)
        y_trg = self._labels(trg)
        y_src = self._labels(src) if src is not None else None
        terms = ["adv_D"]
        record = {"iteration": i, "lr_g": lr_g, "lr_d": lr_d}

        # critic update
        self.D.requires_grad_(True)
        with torch.no_grad():
            fake = self.G(x, y_trg)
        emb_r, adv_r, cls_r = self.D(x)
        adv_f = self.D.adv(fake)
        gp = gradient_penalty(self.D.adv, x, fake, generator=self.gp_gen)
        parts = {"adv": wasserstein_critic_loss(adv_r, adv_f) + w.lambda_gp * gp}
        record["D/adv"] = parts["adv"].item()
        record["D/gp"] = gp.item()
        if odd:
            parts["cls"] = classification_loss(cls_r, y_src, self.schema.encoding)
            terms.append("cls_D")
            if cfg.mch_enabled("real_labelled"):
                parts["mch"], n = self._mch(emb_r, src, real=True)
                self.pool_counts["real_labelled"] += n
                terms.append("mch_D")
        loss_d = total_loss_D(parts, w, odd)
        self.opt_D.zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt_D.step()
        for k, v in parts.items():
            if k != "adv":
                record[f"D/{k}"] = v.item()
        record["D/total"] = loss_d.item()

        # generator update
        if i % cfg.d_per_g == 0:
            self.D.requires_grad_(False)
            if self.head is not None:
                self.head.requires_grad_(False)
            fake = self.G(x, y_trg)
            emb_f, adv_f, cls_f = self.D(fake)
            gparts = {"adv": -adv_f.mean(), "cls": classification_loss(cls_f, y_trg, self.schema.encoding)}
            terms += ["adv_G", "cls_G"]
            pool = "fake_labelled" if odd else "fake_unlabelled"
            if cfg.mch_enabled(pool):
                gparts["mch"], n = self._mch(emb_f, trg, real=False)
                self.pool_counts[pool] += n
                terms.append("mch_G")
            if odd:
                gparts["cyc"] = cycle_loss(self.G, x, y_src, y_trg, fake=fake)
                terms.append("cyc")
            loss_g = total_loss_G(gparts, w, odd)
            self.opt_G.zero_grad(set_to_none=True)
            loss_g.backward()
            self.opt_G.step()
            self.D.requires_grad_(True)
            if self.head is not None:
                self.head.requires_grad_(True)
            for k, v in gparts.items():
                record[f"G/{k}"] = v.item()
            record["G/total"] = loss_g.item()

        self.iteration = i
        self.trace.append((i, tuple(terms)))
        return record

    def loss_values(self, record: dict) -> List[float]:
        return [v for k, v in record.items() if "/" in k]

    # ---- checkpoints ----------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "manifest": {
                "config": self.cfg.to_dict(),
                "n_attr": self.schema.n_attr,
                "schema": {"attribute_names": list(self.schema.attribute_names),
                           "exclusive_groups": [list(g) for g in self.schema.exclusive_groups],
                           "encoding": self.schema.encoding.value},
                "classes": [list(c) for c in self.classes.classes],
                "with_match_head": self.head is not None,
            },
            "G": self.G.state_dict(),
            "D": self.D.state_dict(),
            "head": self.head.state_dict() if self.head is not None else None,
            "opt_G": self.opt_G.state_dict(),
            "opt_D": self.opt_D.state_dict(),
            "iteration": self.iteration,
            "rng": {name: _rng_state(getattr(self, f"rng_{name}"))
                    for name in ("data", "targets", "triplets", "flip")},
            "gp_gen": self.gp_gen.get_state(),
            "pool_counts": dict(self.pool_counts),
        }

    def save_checkpoint(self, path) -> None:
        torch.save(self.state_dict(), path)

    def load_state_dict(self, state: dict) -> None:
        self.G.load_state_dict(state["G"])
        self.D.load_state_dict(state["D"])
        if self.head is not None and state["head"] is not None:
            self.head.load_state_dict(state["head"])
        self.opt_G.load_state_dict(state["opt_G"])
        self.opt_D.load_state_dict(state["opt_D"])
        self.iteration = int(state["iteration"])
        for name, st in state["rng"].items():
            _set_rng_state(getattr(self, f"rng_{name}"), st)
        self.gp_gen.set_state(state["gp_gen"])
        self.pool_counts = dict(state["pool_counts"])

    def load_checkpoint(self, path) -> None:
        self.load_state_dict(torch.load(path, weights_only=False))


def read_manifest(path) -> dict:
    return torch.load(path, weights_only=False)["manifest"]


def load_generator(path) -> Tuple[Generator, dict]:
    """Rebuild the generator stored in a checkpoint; returns ``(G, manifest)``."""
    state = torch.load(path, weights_only=False)
    m = state["manifest"]
    c = m["config"]
    dt = {"float32": torch.float32, "float64": torch.float64}[c["dtype"]]
    G = build_generator(c["image_size"], m["n_attr"], c["g_width"], c["g_res"], dtype=dt)
    G.load_state_dict(state["G"])
    G.eval()
    return G, m


def label_tile(label, size: int) -> np.ndarray:
    """Legend tile: one horizontal stripe per attribute, white when set."""
    n = len(label)
    tile = -np.ones((3, size, size), dtype=np.float32)
    edges = np.linspace(0, size, n + 1).astype(int)
    for j, b in enumerate(label):
        if b:
            tile[:, edges[j] + 1:max(edges[j + 1] - 1, edges[j] + 2), 1:-1] = 1.0
    return tile


def translation_grid(G: Generator, images: np.ndarray, targets) -> np.ndarray:
    """Rows are target labels, columns a legend tile followed by each translated input.

    Returns tiles shaped ``[len(targets), len(images) + 1, 3, H, W]``.
    """
    if len(targets) == 0:
        raise ValueError("need at least one target label")
    param = next(G.parameters())
    x = torch.as_tensor(np.asarray(images), dtype=param.dtype)
    size = x.shape[-1]
    rows = []
    with torch.no_grad():
        for y in targets:
            yt = torch.as_tensor(np.asarray([y] * len(x)), dtype=param.dtype)
            out = G(x, yt).numpy()
            rows.append(np.concatenate([label_tile(y, size)[None], out]))
    return np.stack(rows)


def train(cfg: TrainingConfig, partition: ls.DatasetPartition, source, out_dir=None,
          hooks: Optional[List[Callable[[Trainer, dict], None]]] = None,
          trainer: Optional[Trainer] = None, with_match_head: bool = True) -> Trainer:
    """Run ``cfg.total_iters`` iterations (resuming ``trainer`` if given).

    With ``out_dir``, writes ``metrics.jsonl`` every ``log_interval``
    iterations, ``ckpt_<i>.pt`` every ``checkpoint_interval`` and
    ``samples_<i>.png`` every ``sample_interval``. Each hook is called as
    ``hook(trainer, record)`` after every iteration.
    """
    trainer = trainer or Trainer(cfg, partition, source, with_match_head)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a")
        grid_refs = [refs[0] for _, refs in sorted(trainer.partition.labelled.items())][:8]
        grid_images = source.get(grid_refs)
    t0 = time.time()
    try:
        while trainer.iteration < cfg.total_iters:
            record = trainer.train_step()
            i = record["iteration"]
            record["wall_time"] = time.time() - t0
            bad = [k for k, v in record.items() if "/" in k and not math.isfinite(v)]
            if bad:
                log.warning("non-finite losses at iteration %d: %s", i, bad)
            if i % cfg.log_interval == 0 or i == cfg.total_iters:
                trainer.history.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record) + "\n")
                    metrics_fh.flush()
                log.info("iter %d %s", i, {k: round(v, 4) for k, v in record.items() if "/" in k})
            for hook in hooks or ():
                hook(trainer, record)
            if out is not None and i % cfg.checkpoint_interval == 0:
                trainer.save_checkpoint(out / f"ckpt_{i}.pt")
            if out is not None and i % cfg.sample_interval == 0:
                trainer.G.eval()
                tiles = translation_grid(trainer.G, grid_images, trainer.classes.classes)
                trainer.G.train()
                save_png(tile_grid(tiles), out / f"samples_{i}.png")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out is not None:
        trainer.save_checkpoint(out / "final.pt")
    return trainer
