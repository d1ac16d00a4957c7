"""Attribute label encodings, the discrete class set, semi-supervised splits
and the per-iteration batch samplers used by the trainer."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

Label = Tuple[int, ...]
ImageRef = Hashable


class LabelSpaceError(ValueError):
    pass


class EmptyPool(LabelSpaceError):
    pass


class DegenerateLabelSpace(LabelSpaceError):
    pass


class InsufficientData(LabelSpaceError):
    pass


class ClassUnderflow(LabelSpaceError):
    pass


class InvalidLabel(LabelSpaceError):
    pass


class Encoding(str, Enum):
    MULTI_LABEL_BINARY = "multi_label_binary"
    ONE_HOT = "one_hot"


@dataclass(frozen=True)
class AttributeSchema:
    attribute_names: Tuple[str, ...]
    exclusive_groups: Tuple[Tuple[int, ...], ...] = ()
    encoding: Encoding = Encoding.MULTI_LABEL_BINARY

    def __post_init__(self):
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))
        object.__setattr__(self, "exclusive_groups",
                           tuple(tuple(int(i) for i in g) for g in self.exclusive_groups))
        object.__setattr__(self, "encoding", Encoding(self.encoding))
        n = self.n_attr
        if n < 1:
            raise LabelSpaceError("schema needs at least one attribute")
        seen = set()
        for group in self.exclusive_groups:
            for i in group:
                if not 0 <= i < n:
                    raise LabelSpaceError(f"group index {i} out of range for {n} attributes")
                if i in seen:
                    raise LabelSpaceError("exclusive groups must be pairwise disjoint")
                seen.add(i)
        if self.encoding is Encoding.ONE_HOT:
            if len(self.exclusive_groups) != 1 or sorted(self.exclusive_groups[0]) != list(range(n)):
                raise LabelSpaceError("one_hot encoding needs a single group covering every index")

    @property
    def n_attr(self) -> int:
        return len(self.attribute_names)

    def validate(self, label: Sequence[int]) -> Label:
        """Return ``label`` as a tuple after checking length, values and group exclusivity."""
        bits = tuple(int(b) for b in label)
        if len(bits) != self.n_attr:
            raise InvalidLabel(f"expected {self.n_attr} bits, got {len(bits)}")
        if any(b not in (0, 1) for b in bits):
            raise InvalidLabel(f"label bits must be 0/1: {bits}")
        for group in self.exclusive_groups:
            on = sum(bits[i] for i in group)
            if on > 1 or (self.encoding is Encoding.ONE_HOT and on != 1):
                raise InvalidLabel(f"label {bits} violates exclusive group {group}")
        return bits

    def index_of(self, name: str) -> int:
        try:
            return self.attribute_names.index(name)
        except ValueError:
            raise KeyError(name) from None


def celeba_schema() -> AttributeSchema:
    return AttributeSchema(("Black_Hair", "Blond_Hair", "Brown_Hair", "Male", "Young"),
                           exclusive_groups=((0, 1, 2),))


RAFD_EXPRESSIONS = ("angry", "contemptuous", "disgusted", "fearful",
                    "happy", "neutral", "sad", "surprised")


def rafd_schema() -> AttributeSchema:
    return AttributeSchema(RAFD_EXPRESSIONS, exclusive_groups=(tuple(range(8)),),
                           encoding=Encoding.ONE_HOT)


@dataclass
class LabelClasses:
    classes: List[Label]
    class_index: Dict[Label, int] = field(default_factory=dict)

    def __post_init__(self):
        self.classes = [tuple(c) for c in self.classes]
        self.class_index = {c: i for i, c in enumerate(self.classes)}
        if len(self.class_index) != len(self.classes):
            raise LabelSpaceError("duplicate label classes")
        if len(self.classes) < 2:
            raise DegenerateLabelSpace("need at least two distinct label classes")

    @property
    def K(self) -> int:
        return len(self.classes)

    def __len__(self):
        return len(self.classes)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.classes, dtype=np.float32)


@dataclass
class DatasetPartition:
    labelled: Dict[int, List[ImageRef]]
    unlabelled: List[ImageRef]
    schema: AttributeSchema
    classes: LabelClasses

    @property
    def n_labelled(self) -> int:
        return sum(len(v) for v in self.labelled.values())

    def labelled_records(self) -> List[Tuple[ImageRef, Label]]:
        return [(ref, self.classes.classes[c]) for c, refs in sorted(self.labelled.items())
                for ref in refs]

    def check(self, dataset_labels: Optional[Dict[ImageRef, Label]] = None) -> None:
        """Assert pool disjointness and, given ground truth, that every filed label is right."""
        lab = [r for refs in self.labelled.values() for r in refs]
        if len(set(lab)) != len(lab) or set(lab) & set(self.unlabelled):
            raise LabelSpaceError("labelled and unlabelled pools overlap")
        if dataset_labels is not None:
            for c, refs in self.labelled.items():
                for r in refs:
                    if tuple(dataset_labels[r]) != self.classes.classes[c]:
                        raise LabelSpaceError(f"{r!r} filed under the wrong class")

    def without_unlabelled(self) -> "DatasetPartition":
        return DatasetPartition({c: list(v) for c, v in self.labelled.items()}, [],
                                self.schema, self.classes)


def enumerate_classes(labelled_examples: Sequence[Tuple[ImageRef, Sequence[int]]],
                      schema: Optional[AttributeSchema] = None) -> LabelClasses:
    """Distinct observed label vectors, in order of first appearance."""
    if not labelled_examples:
        raise EmptyPool("no labelled examples")
    seen: Dict[Label, None] = {}
    for _, label in labelled_examples:
        bits = schema.validate(label) if schema is not None else tuple(int(b) for b in label)
        seen.setdefault(bits, None)
    if len(seen) < 2:
        raise DegenerateLabelSpace(f"only {len(seen)} distinct label vector(s); triplets need two")
    return LabelClasses(list(seen))


def split_semi_supervised(dataset: Sequence[Tuple[ImageRef, Sequence[int]]],
                          percent_labelled: float, seed: int,
                          schema: Optional[AttributeSchema] = None,
                          n_labelled: Optional[int] = None) -> DatasetPartition:
    """Sub-sample a labelled pool spread as evenly over classes as populations allow.

    Classes are visited round-robin in descending population order (ties by
    first appearance) until the quota is filled; members within a class are
    taken in a seeded random order. ``n_labelled`` overrides the fraction.
    """
    if n_labelled is None:
        if not 0 < percent_labelled <= 1:
            raise ValueError("percent_labelled must be in (0, 1]")
        quota = int(round(percent_labelled * len(dataset)))
    else:
        quota = int(n_labelled)
    if not dataset:
        raise EmptyPool("empty dataset")
    if schema is None:
        schema = AttributeSchema(tuple(f"attr{i}" for i in range(len(dataset[0][1]))))
    quota = min(max(quota, 0), len(dataset))

    by_class: Dict[Label, List[ImageRef]] = {}
    for ref, label in dataset:
        by_class.setdefault(schema.validate(label), []).append(ref)
    rng = np.random.default_rng(seed)
    order = sorted(by_class, key=lambda c: -len(by_class[c]))  # stable: ties keep first appearance
    shuffled = {c: [by_class[c][j] for j in rng.permutation(len(by_class[c]))] for c in order}

    taken = {c: 0 for c in order}
    remaining = quota
    while remaining > 0:
        progressed = False
        for c in order:
            if remaining == 0:
                break
            if taken[c] < len(shuffled[c]):
                taken[c] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break

    counts = [taken[c] for c in order]
    if 0 in counts and max(counts) >= 2:
        raise InsufficientData("a class received no labelled examples while others received several")

    chosen = {c: shuffled[c][:taken[c]] for c in order if taken[c] > 0}
    observed = [c for c in by_class if c in chosen]  # first-appearance order
    classes = LabelClasses(observed)
    labelled = {classes.class_index[c]: chosen[c] for c in observed}
    picked = {r for refs in chosen.values() for r in refs}
    unlabelled = [ref for ref, _ in dataset if ref not in picked]
    return DatasetPartition(labelled, unlabelled, schema, classes)


def _check_bk(B: int, k: int, K: int) -> int:
    if k < 1 or k > K:
        raise ValueError(f"k={k} must be in [1, {K}]")
    if B % k:
        raise ValueError(f"batch size {B} must be divisible by classes per batch {k}")
    return B // k


def sample_labelled_batch(partition: DatasetPartition, B: int, k: int,
                          rng: np.random.Generator, with_replacement: bool = True):
    """Draw k classes uniformly without replacement and B/k labelled images from each.

    Returns ``(refs, labels, class_subset)``; refs are grouped class by class
    in the order of ``class_subset``.
    """
    available = sorted(c for c, refs in partition.labelled.items() if refs)
    per = _check_bk(B, k, len(available))
    chosen = [available[i] for i in rng.choice(len(available), size=k, replace=False)]
    refs: List[ImageRef] = []
    labels: List[Label] = []
    for c in chosen:
        pool = partition.labelled[c]
        if len(pool) >= per:
            idx = rng.choice(len(pool), size=per, replace=False)
        elif with_replacement:
            idx = rng.choice(len(pool), size=per, replace=True)
        else:
            raise ClassUnderflow(f"class {c} has {len(pool)} examples, batch needs {per}")
        refs.extend(pool[i] for i in idx)
        labels.extend([partition.classes.classes[c]] * per)
    return refs, labels, chosen


def sample_target_batch(classes: LabelClasses, B: int, k: int, rng: np.random.Generator):
    """B target labels, B/k for each of k uniformly drawn classes."""
    per = _check_bk(B, k, classes.K)
    chosen = [int(c) for c in rng.choice(classes.K, size=k, replace=False)]
    labels = [classes.classes[c] for c in chosen for _ in range(per)]
    return labels, chosen


def sample_unlabelled_batch(refs: Sequence[ImageRef], B: int, rng: np.random.Generator):
    replace = len(refs) < B
    return [refs[i] for i in rng.choice(len(refs), size=B, replace=replace)]


# ---- text formats -------------------------------------------------------

def read_attribute_file(path, schema: AttributeSchema):
    """Parse a CelebA-style attribute file.

    The first line names the attributes; each following line is
    ``filename v_1 ... v_n`` with values in {-1, 1}. A leading count line, as
    in the official CelebA release, is skipped. Returns ``(filename, label)``
    pairs projected onto the schema's attributes.
    """
    from .datagen import MalformedAttributeLine, UnknownAttributeName

    lines = Path(path).read_text().splitlines()
    start = 0
    if lines and lines[0].strip().isdigit():
        start = 1
    if start >= len(lines):
        raise MalformedAttributeLine(start + 1, "missing header")
    header = lines[start].split()
    try:
        cols = [header.index(name) for name in schema.attribute_names]
    except ValueError as e:
        missing = [n for n in schema.attribute_names if n not in header]
        raise UnknownAttributeName(missing[0]) from e
    records = []
    for lineno, line in enumerate(lines[start + 1:], start=start + 2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != len(header) + 1:
            raise MalformedAttributeLine(lineno, f"expected {len(header) + 1} fields, got {len(parts)}")
        try:
            values = [int(v) for v in parts[1:]]
        except ValueError:
            raise MalformedAttributeLine(lineno, "non-integer attribute value") from None
        if any(v not in (-1, 1) for v in values):
            raise MalformedAttributeLine(lineno, "attribute values must be -1 or 1")
        bits = tuple(1 if values[c] == 1 else 0 for c in cols)
        records.append((parts[0], bits))
    return records


def write_manifest(partition: DatasetPartition, path) -> None:
    with open(path, "w") as fh:
        for c in sorted(partition.labelled):
            for ref in partition.labelled[c]:
                fh.write(f"{ref}\t{c}\n")
        for ref in partition.unlabelled:
            fh.write(f"{ref}\tUNLABELLED\n")


def read_manifest(path, schema: AttributeSchema, classes: LabelClasses,
                  ref_type=str) -> DatasetPartition:
    labelled: Dict[int, List[ImageRef]] = {}
    unlabelled: List[ImageRef] = []
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        ref, tag = line.rsplit("\t", 1)
        if tag == "UNLABELLED":
            unlabelled.append(ref_type(ref))
        else:
            labelled.setdefault(int(tag), []).append(ref_type(ref))
    return DatasetPartition(labelled, unlabelled, schema, classes)

