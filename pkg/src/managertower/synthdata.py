"""Deterministic synthetic image-caption pairs with a learnable matching rule.

An image is a G x G grid of patch vectors. A random multiset of 1-3
prototype patterns is planted into distinct cells; every other cell holds
only noise. The caption lists the planted pattern tokens in sorted order:

    BOS "a" p1 "and" p2 "and" p3 EOS

Record layout for serialization, in field order: pair_id, grid (flat
row-major floats, cells x patch_dim), caption (token ids), multiset
(sorted pattern indices).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .encoders import BOS, EOS, NUM_SPECIALS, PAD
from .errors import ConfigError, ContractError
from .objectives import PairBatch
from .tensor import Rng

BINARY_MAGIC = b"MTSYN001"


@dataclass
class PatternSpec:
    patterns: int = 8
    grid: int = 4
    patch_dim: int = 16
    noise_std: float = 0.1
    min_items: int = 1
    max_items: int = 3
    max_len: int = 12
    seed: int = 1234
    prototypes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.validate()
        rng = Rng(self.seed).child("prototypes")
        self.prototypes = rng.normal(0.0, 1.0, size=(self.patterns, self.patch_dim))
        if self.patterns > 1:
            diff = self.prototypes[:, None] - self.prototypes[None]
            dist = np.sqrt((diff ** 2).sum(-1))[~np.eye(self.patterns, dtype=bool)]
            if dist.min() <= 4 * self.noise_std:
                raise ConfigError(f"prototypes too close for noise_std {self.noise_std}",
                                  "data.noise_std")

    def validate(self, path: str = "data") -> None:
        if self.patterns < 1:
            raise ConfigError("need at least one pattern", path + ".patterns")
        if not 1 <= self.min_items <= self.max_items:
            raise ConfigError("need 1 <= min_items <= max_items", path + ".min_items")
        if self.max_items > self.grid * self.grid:
            raise ConfigError("more items than grid cells", path + ".max_items")
        if self.caption_len(self.max_items) > self.max_len:
            raise ConfigError(f"captions of {self.max_items} items exceed max_len {self.max_len}",
                              path + ".max_len")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0", path + ".noise_std")

    @property
    def cells(self) -> int:
        return self.grid * self.grid

    @property
    def filler_a(self) -> int:
        return NUM_SPECIALS + self.patterns

    @property
    def filler_and(self) -> int:
        return NUM_SPECIALS + self.patterns + 1

    @property
    def vocab(self) -> int:
        """Smallest vocabulary holding specials, pattern tokens and fillers."""
        return NUM_SPECIALS + self.patterns + 2

    @staticmethod
    def caption_len(items: int) -> int:
        return 2 * items + 2

    def token(self, pattern: int) -> int:
        return NUM_SPECIALS + pattern


@dataclass
class SamplePair:
    pair_id: int
    grid: np.ndarray        # [cells, patch_dim]
    caption: np.ndarray     # token ids, BOS ... EOS, unpadded
    multiset: tuple         # sorted pattern indices planted in the grid
    caption_multiset: tuple = ()

    def __post_init__(self):
        if not self.caption_multiset:
            self.caption_multiset = tuple(self.multiset)


def encode_caption(multiset, spec: PatternSpec) -> np.ndarray:
    ids = [BOS, spec.filler_a]
    for i, p in enumerate(sorted(multiset)):
        if i:
            ids.append(spec.filler_and)
        ids.append(spec.token(p))
    ids.append(EOS)
    return np.array(ids, dtype=np.int64)


def decode_caption(caption, spec: PatternSpec) -> tuple:
    lo, hi = NUM_SPECIALS, NUM_SPECIALS + spec.patterns
    return tuple(sorted(int(t) - lo for t in caption if lo <= t < hi))


def generate_pair(spec: PatternSpec, rng: Rng, pair_id: int = 0) -> SamplePair:
    k = int(rng.integers(spec.min_items, spec.max_items + 1))
    items = tuple(sorted(int(x) for x in rng.integers(0, spec.patterns, size=k)))
    cells = rng.permutation(spec.cells)[:k]
    grid = np.zeros((spec.cells, spec.patch_dim))
    for cell, p in zip(cells, items):
        grid[cell] = spec.prototypes[p]
    if spec.noise_std > 0:
        grid = grid + rng.normal(0.0, spec.noise_std, size=grid.shape)
    return SamplePair(pair_id, grid, encode_caption(items, spec), items)


def make_dataset(spec: PatternSpec, size: int, rng: Rng) -> list[SamplePair]:
    """Pair i is drawn from its own child stream, so shards are reproducible."""
    return [generate_pair(spec, rng.child(i), i) for i in range(size)]


def make_negative(pair: SamplePair, pool: list[SamplePair], rng: Rng) -> SamplePair:
    """Swap in the caption of a uniformly chosen pool member with another multiset."""
    if len(pool) < 2:
        raise ContractError("negative sampling needs a pool of at least 2")
    candidates = [c for c in pool if c.multiset != pair.multiset]
    if not candidates:
        raise ContractError("every pool member has the anchor's multiset")
    donor = candidates[int(rng.integers(0, len(candidates)))]
    return SamplePair(pair.pair_id, pair.grid, donor.caption.copy(), pair.multiset,
                      donor.multiset)


def pad_captions(captions, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    ids = np.full((len(captions), max_len), PAD, dtype=np.int64)
    mask = np.zeros((len(captions), max_len), dtype=bool)
    for i, c in enumerate(captions):
        if len(c) > max_len:
            raise ContractError(f"caption of length {len(c)} exceeds max_len {max_len}")
        ids[i, :len(c)] = c
        mask[i, :len(c)] = True
    return ids, mask


def collate(pairs: list[SamplePair], labels, max_len: int) -> PairBatch:
    ids, mask = pad_captions([p.caption for p in pairs], max_len)
    return PairBatch(
        images=np.stack([p.grid for p in pairs]),
        ids=ids,
        text_mask=mask,
        labels=np.asarray(labels, dtype=np.int64),
        multisets=[p.multiset for p in pairs],
        caption_multisets=[p.caption_multiset for p in pairs],
        pair_ids=np.array([p.pair_id for p in pairs], dtype=np.int64),
    )


class BatchStream:
    """Shuffled-epoch batches addressable by global batch index.

    Batch k depends only on (seed path, k), so a resumed run sees exactly the
    batches an uninterrupted one would. The negative count per batch is
    floor(r*B) plus one with probability frac(r*B), which keeps the label
    mean unbiased with far less spread than independent coin flips.
    """

    def __init__(self, dataset: list[SamplePair], batch_size: int, spec: PatternSpec,
                 rng: Rng, neg_ratio: float = 0.5, drop_last: bool = True):
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "trainer.batch_size")
        if not 0.0 <= neg_ratio <= 1.0:
            raise ConfigError("neg_ratio must lie in [0, 1]", "data.neg_ratio")
        if not dataset:
            raise ContractError("empty dataset")
        self.dataset, self.batch_size, self.spec = dataset, batch_size, spec
        self.rng, self.neg_ratio = rng, neg_ratio
        n = len(dataset)
        self.per_epoch = n // batch_size if drop_last else math.ceil(n / batch_size)
        if self.per_epoch == 0:
            raise ContractError(f"dataset of {n} cannot fill a batch of {batch_size}")

    def batch_at(self, k: int) -> PairBatch:
        epoch, j = divmod(k, self.per_epoch)
        order = self.rng.child("epoch", epoch).permutation(len(self.dataset))
        idx = order[j * self.batch_size:(j + 1) * self.batch_size]
        pairs = [self.dataset[i] for i in idx]
        rng = self.rng.child("batch", k)
        b = len(pairs)
        exact = self.neg_ratio * b
        n_neg = int(exact) + int(rng.random() < exact - int(exact))
        neg = np.zeros(b, dtype=bool)
        neg[rng.permutation(b)[:n_neg]] = True
        out = [make_negative(p, self.dataset, rng.child("neg", i)) if neg[i] else p
               for i, p in enumerate(pairs)]
        return collate(out, (~neg).astype(np.int64), self.spec.max_len)

    def __iter__(self) -> Iterator[PairBatch]:
        k = 0
        while True:
            yield self.batch_at(k)
            k += 1


def batch_iter(dataset, batch_size: int, spec: PatternSpec, rng: Rng,
               neg_ratio: float = 0.5) -> Iterator[PairBatch]:
    return iter(BatchStream(dataset, batch_size, spec, rng, neg_ratio))


def eval_batches(dataset, batch_size: int, spec: PatternSpec, rng: Rng,
                 neg_ratio: float = 0.5) -> list[PairBatch]:
    """One pass over ``dataset`` in order, keeping a ragged final batch."""
    stream = BatchStream(dataset, batch_size, spec, rng, neg_ratio, drop_last=False)
    out = []
    for j in range(stream.per_epoch):
        pairs = dataset[j * batch_size:(j + 1) * batch_size]
        r = rng.child("eval", j)
        exact = neg_ratio * len(pairs)
        n_neg = int(exact) + int(r.random() < exact - int(exact))
        neg = np.zeros(len(pairs), dtype=bool)
        neg[r.permutation(len(pairs))[:n_neg]] = True
        rows = [make_negative(p, dataset, r.child("neg", i)) if neg[i] else p
                for i, p in enumerate(pairs)]
        out.append(collate(rows, (~neg).astype(np.int64), spec.max_len))
    return out


# ---------------------------------------------------------------- serialization

def _record(p: SamplePair) -> dict:
    return {"pair_id": int(p.pair_id), "grid": [float(v) for v in p.grid.ravel()],
            "caption": [int(t) for t in p.caption], "multiset": list(p.multiset)}


def save_jsonl(pairs: list[SamplePair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(_record(p), separators=(",", ":")) + "\n")


def load_jsonl(path, patch_dim: int) -> list[SamplePair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            grid = np.array(r["grid"], dtype=np.float64).reshape(-1, patch_dim)
            out.append(SamplePair(int(r["pair_id"]), grid, np.array(r["caption"], dtype=np.int64),
                                  tuple(r["multiset"])))
    return out


def save_binary(pairs: list[SamplePair], path) -> None:
    """Little-endian bulk form: magic, u64 count, then per record
    u64 pair_id, u32 cells, u32 patch_dim, f64 grid, u32 caption length,
    i64 caption, u32 multiset length, i64 multiset."""
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<Q", len(pairs)))
        for p in pairs:
            cells, dim = p.grid.shape
            fh.write(struct.pack("<QII", p.pair_id, cells, dim))
            fh.write(np.ascontiguousarray(p.grid, dtype="<f8").tobytes())
            fh.write(struct.pack("<I", len(p.caption)))
            fh.write(np.asarray(p.caption, dtype="<i8").tobytes())
            fh.write(struct.pack("<I", len(p.multiset)))
            fh.write(np.asarray(p.multiset, dtype="<i8").tobytes())


def load_binary(path) -> list[SamplePair]:
    data = Path(path).read_bytes()
    if data[:8] != BINARY_MAGIC:
        raise ContractError(f"{path}: not a synthetic-pair file")
    (count,), off = struct.unpack_from("<Q", data, 8), 16
    out = []
    for _ in range(count):
        pair_id, cells, dim = struct.unpack_from("<QII", data, off)
        off += 16
        grid = np.frombuffer(data, "<f8", cells * dim, off).reshape(cells, dim).astype(np.float64)
        off += 8 * cells * dim
        (n_cap,) = struct.unpack_from("<I", data, off)
        off += 4
        cap = np.frombuffer(data, "<i8", n_cap, off).astype(np.int64)
        off += 8 * n_cap
        (n_ms,) = struct.unpack_from("<I", data, off)
        off += 4
        ms = tuple(int(v) for v in np.frombuffer(data, "<i8", n_ms, off))
        off += 8 * n_ms
        out.append(SamplePair(int(pair_id), grid, cap, ms))
    return out
