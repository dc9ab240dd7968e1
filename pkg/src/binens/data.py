"""Datasets, byte-level tokenization, synthetic tasks and a token-perturbation augmenter."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
VOCAB_SIZE = 257  # 256 byte values shifted by one, plus the pad id
TASK_KINDS = ("parity-of-marker", "keyword-vs-keyword", "majority-byte")
SUBSTITUTION_RATE = 0.05


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    id: int
    text: bytes
    label: int
    weight_slot: int


@dataclass
class Dataset:
    examples: list
    num_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in ("train", "dev"):
            raise DatasetError(f"split must be 'train' or 'dev', got {self.split!r}")
        ids = [e.id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise DatasetError("example ids must be unique")
        for e in self.examples:
            if not 0 <= e.label < self.num_classes:
                raise DatasetError(f"example {e.id}: label {e.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.int64)

    @property
    def texts(self) -> list:
        return [e.text for e in self.examples]


@dataclass
class Encoded:
    """Token-id view of a dataset, ready for batching."""

    ids: np.ndarray          # [m, S] int64
    mask: np.ndarray         # [m, S] bool
    labels: np.ndarray       # [m] int64
    slots: np.ndarray        # [m] index into SampleWeights
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Encoded":
        idx = np.asarray(idx)
        return Encoded(self.ids[idx], self.mask[idx], self.labels[idx], self.slots[idx], self.num_classes)


def tokenize(text: bytes, max_seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Bytes shifted by +1 (0 is pad), truncated or padded to ``max_seq_len``."""
    if max_seq_len < 1:
        raise ValueError("max_seq_len must be >= 1")
    if isinstance(text, str):
        text = text.encode("utf-8")
    raw = np.frombuffer(text[:max_seq_len], dtype=np.uint8).astype(np.int64) + 1
    ids = np.zeros(max_seq_len, dtype=np.int64)
    ids[:raw.size] = raw
    mask = np.zeros(max_seq_len, dtype=bool)
    mask[:raw.size] = True
    return ids, mask


def detokenize(ids, mask=None) -> bytes:
    ids = np.asarray(ids)
    keep = ids != PAD_ID if mask is None else np.asarray(mask, bool)
    return bytes((ids[keep] - 1).astype(np.uint8).tolist())


def encode(dataset: Dataset, max_seq_len: int) -> Encoded:
    m = len(dataset)
    ids = np.zeros((m, max_seq_len), dtype=np.int64)
    mask = np.zeros((m, max_seq_len), dtype=bool)
    for i, ex in enumerate(dataset.examples):
        ids[i], mask[i] = tokenize(ex.text, max_seq_len)
    slots = np.array([e.weight_slot for e in dataset.examples], dtype=np.int64)
    return Encoded(ids, mask, dataset.labels, slots, dataset.num_classes)


# ---------------------------------------------------------------------------
# TSV
# ---------------------------------------------------------------------------


def load_tsv(path, split: str = "train", num_classes: int | None = None) -> Dataset:
    """Read ``text<TAB>label`` lines; ids follow line order."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    examples = []
    with open(path, "r", encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetError(f"{path}:{lineno}: expected 'text<TAB>label', found {len(parts) - 1} tabs")
            text, label = parts
            try:
                y = int(label)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: unparseable label {label!r}") from None
            if y < 0:
                raise DatasetError(f"{path}:{lineno}: negative label {y}")
            n = len(examples)
            examples.append(Example(n, text.encode("utf-8"), y, n))
    if not examples:
        raise DatasetError(f"{path}: empty dataset")
    k = max(e.label for e in examples) + 1
    if num_classes is not None:
        if k > num_classes:
            raise DatasetError(f"{path}: label {k - 1} exceeds num_classes={num_classes}")
        k = num_classes
    return Dataset(examples, max(k, 2), split)


def save_tsv(dataset: Dataset, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for ex in dataset.examples:
            text = ex.text.decode("utf-8")
            if "\t" in text or "\n" in text or "\r" in text:
                raise DatasetError(f"example {ex.id}: text contains a tab or newline")
            fh.write(f"{text}\t{ex.label}\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

_FILLER = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz ", dtype=np.uint8)
_KEYWORDS = [b"CAT", b"DOG", b"OWL", b"EEL", b"YAK", b"ELK", b"APE", b"BEE"]
_MARKERS = np.frombuffer(b"XYZQWVJK", dtype=np.uint8)


def _clean_label(kind: str, text: bytes, K: int) -> int:
    """The noiseless labelling rule of each synthetic task."""
    if kind == "keyword-vs-keyword":
        for k in range(K):
            if _KEYWORDS[k] in text:
                return k
        raise AssertionError("no keyword present")
    arr = np.frombuffer(text, dtype=np.uint8)
    if kind == "majority-byte":
        counts = [(arr == _MARKERS[k]).sum() for k in range(K)]
        return int(np.argmax(counts))
    return int((arr == _MARKERS[0]).sum() % K)


def _sample_text(kind: str, rng: np.random.Generator, K: int, length: int) -> bytes:
    body = rng.choice(_FILLER, size=length)
    if kind == "keyword-vs-keyword":
        k = int(rng.integers(K))
        kw = np.frombuffer(_KEYWORDS[k], dtype=np.uint8)
        pos = int(rng.integers(0, length - len(kw) + 1))
        body[pos:pos + len(kw)] = kw
        return body.tobytes()
    if kind == "majority-byte":
        while True:
            n_marks = int(rng.integers(3, max(4, length // 2)))
            marks = rng.choice(_MARKERS[:K], size=n_marks)
            counts = np.bincount(marks, minlength=256)[_MARKERS[:K]]
            top = np.sort(counts)[::-1]
            if top[0] > top[1]:
                break
        pos = rng.choice(length, size=n_marks, replace=False)
        body[pos] = marks
        return body.tobytes()
    n_marks = int(rng.integers(0, max(2, length // 3)))
    pos = rng.choice(length, size=n_marks, replace=False)
    body[pos] = _MARKERS[0]
    return body.tobytes()


def make_synthetic_task(kind: str, m: int, K: int = 2, seed: int = 0, noise_rate: float = 0.0,
                        length: int = 24, split: str = "train") -> Dataset:
    """Deterministic toy classification task whose clean label is a known function of the text.

    ``noise_rate`` of the labels (Bernoulli per example) are replaced by a
    different class, so the Bayes accuracy is ``1 - noise_rate``.

    * ``keyword-vs-keyword``: one of K uppercase keywords is embedded in
      lowercase filler; the label is the keyword's index.
    * ``majority-byte``: K marker bytes are scattered; the label is the most
      frequent one (ties are never generated).
    * ``parity-of-marker``: label is the count of one marker byte mod K.
    """
    errs = []
    if kind not in TASK_KINDS:
        errs.append(f"unknown task kind {kind!r}")
    if m < 10:
        errs.append("m must be >= 10")
    if not 0 <= noise_rate < 0.5:
        errs.append("noise_rate must be in [0, 0.5)")
    if K < 2 or K > len(_KEYWORDS):
        errs.append(f"K must be in [2, {len(_KEYWORDS)}]")
    if length < 8:
        errs.append("length must be >= 8")
    if errs:
        raise DatasetError("; ".join(errs))
    rng = np.random.default_rng(seed)
    examples, flipped = [], 0
    for i in range(m):
        text = _sample_text(kind, rng, K, length)
        y = _clean_label(kind, text, K)
        if noise_rate > 0 and rng.random() < noise_rate:
            y = int((y + rng.integers(1, K)) % K)
            flipped += 1
        examples.append(Example(i, text, y, i))
    meta = {"kind": kind, "m": m, "K": K, "seed": seed, "noise_rate": noise_rate, "length": length,
            "bayes_accuracy": 1.0 - noise_rate, "flipped": flipped}
    return Dataset(examples, K, split, meta)


def clean_labels(dataset: Dataset) -> np.ndarray:
    kind = dataset.meta["kind"]
    return np.array([_clean_label(kind, e.text, dataset.num_classes) for e in dataset.examples])


def augment(dataset: Dataset, factor: int, seed: int = 0, rate: float = SUBSTITUTION_RATE) -> Dataset:
    """Stand-in augmenter: ``factor - 1`` perturbed copies per example.

    Each byte is replaced, with probability ``rate``, by a different random
    byte; labels are copied unchanged.  Copies get fresh ids and weight
    slots appended after the originals.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return dataset
    rng = np.random.default_rng(seed)
    out = list(dataset.examples)
    next_id = max(e.id for e in out) + 1
    next_slot = max(e.weight_slot for e in out) + 1
    for ex in dataset.examples:
        for _ in range(factor - 1):
            arr = np.frombuffer(ex.text, dtype=np.uint8).copy()
            hit = rng.random(arr.size) < rate
            # shift by 1..255 so every substitution really changes the byte
            arr[hit] = (arr[hit].astype(np.int64) + rng.integers(1, 256, hit.sum())) % 256
            out.append(Example(next_id, arr.tobytes(), ex.label, next_slot))
            next_id += 1
            next_slot += 1
    meta = dict(dataset.meta, augment_factor=factor, augment_seed=seed)
    return Dataset(out, dataset.num_classes, dataset.split, meta)
