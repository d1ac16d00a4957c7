"""Triplet construction over class-grouped batches and the match losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Hashable, List, Mapping, Sequence, Tuple

import numpy as np
import torch

from .nets import MatchHead

PROB_EPS = 1e-7


class DegenerateBatch(ValueError):
    pass


class EmptyTripletSet(ValueError):
    pass


@dataclass(frozen=True)
class Triplet:
    anchor: Any
    positive: Any
    negative: Any
    anchor_class: Hashable
    negative_class: Hashable


def group_positions(class_ids: Sequence[Hashable]) -> Dict[Hashable, List[int]]:
    """Batch positions grouped by class, in order of first appearance."""
    groups: Dict[Hashable, List[int]] = {}
    for pos, c in enumerate(class_ids):
        groups.setdefault(c, []).append(pos)
    return groups


def build_triplets(groups: Mapping[Hashable, Sequence[Any]], rng: np.random.Generator,
                   plan: str = "sampled") -> List[Triplet]:
    """Triplets (anchor, positive, negative) from class-grouped members.

    Plans:

    ``sampled`` (default)
        every member anchors once; its positive is drawn uniformly from the
        rest of its group and its negative from one uniformly drawn other
        class. Yields one triplet per batch member.
    ``per_class``
        as ``sampled`` but one negative from *every* other class.
    ``exhaustive``
        all (anchor, positive != anchor, negative) combinations.

    Singleton groups fall back to using the anchor as its own positive.
    """
    keys = [c for c in groups if len(groups[c]) > 0]
    if len(keys) != len(groups):
        raise DegenerateBatch("empty class group")
    if len(keys) < 2:
        raise DegenerateBatch("triplets need at least two classes in the batch")
    out: List[Triplet] = []
    for c in keys:
        members = list(groups[c])
        others = [k for k in keys if k != c]
        for i, anchor in enumerate(members):
            rest = [j for j in range(len(members)) if j != i] or [i]
            if plan == "exhaustive":
                for j in rest:
                    for k in others:
                        for neg in groups[k]:
                            out.append(Triplet(anchor, members[j], neg, c, k))
                continue
            pos = members[rest[int(rng.integers(len(rest)))]]
            if plan == "sampled":
                neg_classes = [others[int(rng.integers(len(others)))]]
            elif plan == "per_class":
                neg_classes = others
            else:
                raise ValueError(f"unknown triplet plan {plan!r}")
            for k in neg_classes:
                neg_group = groups[k]
                out.append(Triplet(anchor, pos, neg_group[int(rng.integers(len(neg_group)))], c, k))
    return out


def build_real_triplets(batch_groups, rng, plan: str = "sampled") -> List[Triplet]:
    """Triplets over real labelled images grouped by their source class."""
    return build_triplets(batch_groups, rng, plan)


def build_fake_triplets(fake_groups, rng, plan: str = "sampled") -> List[Triplet]:
    """Triplets over generated images grouped by the target class they were translated to."""
    return build_triplets(fake_groups, rng, plan)


def triplet_index(triplets: Sequence[Triplet]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if not triplets:
        raise EmptyTripletSet("no triplets")
    a, p, n = zip(*((t.anchor, t.positive, t.negative) for t in triplets))
    as_long = lambda v: torch.as_tensor(v, dtype=torch.long)
    return as_long(a), as_long(p), as_long(n)


def match_loss_from_probs(p_pos: torch.Tensor, p_neg: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    """mean of -[log P(match | positive pair) + log(1 - P(match | negative pair))]."""
    if p_pos.numel() == 0:
        raise EmptyTripletSet("no triplets")
    p_pos = p_pos.clamp(eps, 1 - eps)
    p_neg = p_neg.clamp(eps, 1 - eps)
    return -(torch.log(p_pos) + torch.log1p(-p_neg)).mean()


def triplet_match_probs(head: MatchHead, emb: torch.Tensor, triplets: Sequence[Triplet]):
    """P(matched) for the (anchor, positive) and (anchor, negative) pair of each triplet.

    Triplet members are integer positions into ``emb``.
    """
    a, p, n = triplet_index(triplets)
    ea = emb[a]
    p_pos = head(ea, emb[p])[:, 0]
    p_neg = head(ea, emb[n])[:, 0]
    return p_pos, p_neg


def match_loss(head: MatchHead, emb: torch.Tensor, triplets: Sequence[Triplet]) -> torch.Tensor:
    return match_loss_from_probs(*triplet_match_probs(head, emb, triplets))


def match_loss_D(D, head: MatchHead, images: torch.Tensor, triplets: Sequence[Triplet]) -> torch.Tensor:
    """Match loss over real labelled images; members of ``triplets`` index ``images``."""
    return match_loss(head, D.embed(images), triplets)


def match_loss_G(G, D, head: MatchHead, sources: torch.Tensor, target_labels: torch.Tensor,
                 triplets: Sequence[Triplet]) -> torch.Tensor:
    """Match loss over translations ``G(sources, target_labels)``; gradients reach G."""
    return match_loss(head, D.embed(G(sources, target_labels)), triplets)


def euclidean_triplet_loss(emb_a: torch.Tensor, emb_p: torch.Tensor, emb_n: torch.Tensor,
                           margin: float = 1.0) -> torch.Tensor:
    """Hinge triplet loss on squared Euclidean distances of flattened embeddings."""
    a, p, n = (e.flatten(1) if e.dim() > 1 else e[None] for e in (emb_a, emb_p, emb_n))
    d_pos = ((a - p) ** 2).sum(dim=1)
    d_neg = ((a - n) ** 2).sum(dim=1)
    return torch.clamp(d_pos - d_neg + margin, min=0).mean()


def euclidean_loss_on(emb: torch.Tensor, triplets: Sequence[Triplet], margin: float = 1.0) -> torch.Tensor:
    a, p, n = triplet_index(triplets)
    return euclidean_triplet_loss(emb[a], emb[p], emb[n], margin)
