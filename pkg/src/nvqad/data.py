"""Synthetic corpora, teacher-generated data and the NVDS dataset file format.

Every generator is keyed by ``(seed, sequence index, position)`` through the
counter-based RNG in :mod:`nvqad.rng`, so corpora are identical whether
sequences are produced one at a time or in a batch, and on any platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from nvqad import rng

__all__ = [
    "PROVENANCES",
    "Dataset",
    "SyntheticSource",
    "markov_table",
    "gen_ground_truth",
    "gen_from_teacher",
    "gen_random",
    "pack_and_split",
    "mix_datasets",
    "iterate_batches",
    "save_dataset",
    "load_dataset",
    "load_token_file",
]

PROVENANCES = ("ground_truth", "teacher_generated", "random", "file", "mix")
VAL_STREAM_OFFSET = 1 << 40
BOS = 0


@dataclass
class Dataset:
    """Fixed-length token windows ``(n, seq_len)`` with a split and provenance tag."""

    tokens: np.ndarray
    vocab_size: int
    provenance: str = "ground_truth"
    split: str = "train"

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise ValueError("dataset tokens must be 2-D (n_windows, seq_len)")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size):
            raise ValueError(f"token id out of range [0, {self.vocab_size})")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.tokens.size


@dataclass(frozen=True)
class SyntheticSource:
    """Parameters of a synthetic language.

    ``markov``: an order-2 chain whose next-token distribution depends on the
    previous token and the class of the token before it (``n_classes`` token
    classes). Each of the ``n_classes * vocab_size`` states has ``branching``
    successors with random weights raised to ``sharpness``.

    ``grammar``: sentences drawn from ``n_rules`` random templates over the
    token classes, each slot filled with a Zipf-distributed token of its class
    and terminated by token 0.
    """

    kind: str = "markov"
    vocab_size: int = 256
    n_classes: int = 4
    branching: int = 8
    sharpness: float = 1.0
    n_rules: int = 16
    seed: int = 1234

    def __post_init__(self):
        if self.kind not in ("markov", "grammar"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if not 1 <= self.branching <= self.vocab_size:
            raise ValueError("branching must be in [1, vocab_size]")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")


def _token_classes(source: SyntheticSource) -> np.ndarray:
    return rng.integers(source.seed, 0, np.arange(source.vocab_size), source.n_classes)


def markov_table(source: SyntheticSource):
    """Return ``(token_class, successors, probs)``.

    State index is ``class(prev2) * V + prev1``; ``successors[s]`` lists the
    ``branching`` possible next tokens and ``probs[s]`` their probabilities.
    """
    V, C, k = source.vocab_size, source.n_classes, source.branching
    cls = _token_classes(source)
    n_states = C * V
    keys = rng.uniform(source.seed, 1, np.arange(n_states * V, dtype=np.uint64)).reshape(n_states, V)
    succ = np.argsort(keys, axis=1, kind="stable")[:, :k]
    w = -np.log1p(-rng.uniform(source.seed, 2, np.arange(n_states * k, dtype=np.uint64)))
    w = w.reshape(n_states, k) ** source.sharpness
    probs = w / w.sum(axis=1, keepdims=True)
    return cls, succ, probs


def _draw(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def _gen_markov(source: SyntheticSource, n_seq: int, seq_len: int, seed: int, first: int, burn_in: int = 16):
    V = source.vocab_size
    cls, succ, probs = markov_table(source)
    cdf = np.cumsum(probs, axis=1)
    streams = np.arange(first, first + n_seq, dtype=np.uint64)
    prev2 = rng.integers(seed, streams, np.zeros(n_seq, dtype=np.uint64), V)
    prev1 = rng.integers(seed, streams, np.ones(n_seq, dtype=np.uint64), V)
    out = np.empty((n_seq, seq_len), dtype=np.int64)
    for pos in range(burn_in + seq_len):
        state = cls[prev2] * V + prev1
        u = rng.uniform(seed, streams, np.full(n_seq, pos + 2, dtype=np.uint64))
        nxt = succ[state, _draw(cdf[state], u)]
        if pos >= burn_in:
            out[:, pos - burn_in] = nxt
        prev2, prev1 = prev1, nxt
    return out


def _grammar_tables(source: SyntheticSource):
    V, C = source.vocab_size, source.n_classes
    cls = _token_classes(source)
    cls[BOS] = -1
    members = [np.flatnonzero(cls == c) for c in range(C)]
    members = [m if m.size else np.array([1 % V]) for m in members]
    lengths = 3 + rng.integers(source.seed, 3, np.arange(source.n_rules), 6)
    max_len = int(lengths.max())
    rules = rng.integers(source.seed, 4, np.arange(source.n_rules * max_len), C).reshape(source.n_rules, max_len)
    zipf = [1.0 / np.arange(1, m.size + 1) for m in members]
    cdfs = [np.cumsum(z) / z.sum() for z in zipf]
    return members, cdfs, rules, lengths


def _gen_grammar(source: SyntheticSource, n_seq: int, seq_len: int, seed: int, first: int):
    members, cdfs, rules, lengths = _grammar_tables(source)
    streams = np.arange(first, first + n_seq, dtype=np.uint64)
    rule = rng.integers(seed, streams, np.zeros(n_seq, dtype=np.uint64), len(rules))
    slot = rng.integers(seed, streams, np.ones(n_seq, dtype=np.uint64), 4) % lengths[rule]
    out = np.empty((n_seq, seq_len), dtype=np.int64)
    for pos in range(seq_len):
        u = rng.uniform(seed, streams, np.full(n_seq, 2 * pos + 2, dtype=np.uint64))
        done = slot >= lengths[rule]
        tok = np.full(n_seq, BOS, dtype=np.int64)
        for c, (m, cdf) in enumerate(zip(members, cdfs)):
            sel = ~done & (rules[rule, np.minimum(slot, rules.shape[1] - 1)] == c)
            if sel.any():
                idx = np.minimum(np.searchsorted(cdf, u[sel], side="right"), m.size - 1)
                tok[sel] = m[idx]
        out[:, pos] = tok
        u2 = rng.uniform(seed, streams, np.full(n_seq, 2 * pos + 3, dtype=np.uint64))
        new_rule = np.minimum((u2 * len(rules)).astype(np.int64), len(rules) - 1)
        rule = np.where(done, new_rule, rule)
        slot = np.where(done, 0, slot + 1)
    return out


def gen_ground_truth(
    source: SyntheticSource,
    n_tokens: int,
    seed: int,
    seq_len: int = 65,
    split: str = "train",
) -> Dataset:
    """Sample ``ceil(n_tokens / seq_len)`` independent windows from ``source``.

    Train and val draw from disjoint stream-index ranges, so the two splits
    never share a sequence for the same seed.
    """
    if n_tokens <= 0:
        raise ValueError("n_tokens must be positive")
    n_seq = -(-n_tokens // seq_len)
    first = VAL_STREAM_OFFSET if split == "val" else 0
    if source.kind == "markov":
        toks = _gen_markov(source, n_seq, seq_len, seed, first)
    else:
        toks = _gen_grammar(source, n_seq, seq_len, seed, first)
    return Dataset(toks, source.vocab_size, "ground_truth", split)


def gen_random(n_tokens: int, seed: int, vocab_size: int = 256, seq_len: int = 65) -> Dataset:
    """I.i.d. uniform token windows."""
    if n_tokens <= 0:
        raise ValueError("n_tokens must be positive")
    n_seq = -(-n_tokens // seq_len)
    counter = np.arange(n_seq * seq_len, dtype=np.uint64)
    toks = rng.integers(seed, 7, counter, vocab_size).reshape(n_seq, seq_len)
    return Dataset(toks, vocab_size, "random", "train")


def gen_from_teacher(
    teacher,
    n_tokens: int,
    prompt_mode: str = "bos_only",
    seq_len: int = 65,
    temperature: float = 1.0,
    top_p: float = 1.0,
    seed: int = 0,
    prompts=None,
    batch_size: int = 256,
) -> Dataset:
    """Sample windows from ``teacher``.

    ``bos_only`` starts every window with token 0; ``prefix_set`` cycles
    through ``prompts`` (lists of token ids), continuing each one to
    ``seq_len`` tokens.
    """
    n_seq = -(-n_tokens // seq_len)
    if prompt_mode == "bos_only":
        prefixes = [[BOS]] * n_seq
    elif prompt_mode == "prefix_set":
        if not prompts:
            raise ValueError("prefix_set mode needs a non-empty prompt list")
        prefixes = [list(prompts[i % len(prompts)]) for i in range(n_seq)]
    else:
        raise ValueError(f"unknown prompt_mode {prompt_mode!r}")
    out = np.empty((n_seq, seq_len), dtype=np.int64)
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prefixes):
        if not 1 <= len(p) < seq_len:
            raise ValueError("prompt length must be in [1, seq_len)")
        by_len.setdefault(len(p), []).append(i)
    for plen, idx in sorted(by_len.items()):
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            pre = np.array([prefixes[i] for i in chunk], dtype=np.int64)
            out[chunk] = _sample_rows(teacher, pre, chunk, seq_len - plen, temperature, top_p, seed)
    return Dataset(out, teacher.config.vocab_size, "teacher_generated", "train")


def _sample_rows(teacher, prefix, rows, steps, temperature, top_p, seed):
    """Batched sampling where row ``r`` uses stream ``rows[r]``."""
    from nvqad import model as M

    rows = np.asarray(rows)
    # contiguous row ids map directly onto sample()'s stream_offset convention
    if np.all(np.diff(rows) == 1):
        return M.sample(teacher, prefix, steps, temperature, top_p, seed, stream_offset=int(rows[0]))
    return np.concatenate(
        [M.sample(teacher, prefix[j : j + 1], steps, temperature, top_p, seed, stream_offset=int(r)) for j, r in enumerate(rows)]
    )


def pack_and_split(sequences, seq_len: int, val_fraction: float, vocab_size: int = 256, provenance: str = "file"):
    """Concatenate sequences, chunk into ``seq_len`` windows and split off the tail as validation.

    Returns ``(train, val)``; ``val`` holds ``round(n_windows * val_fraction)``
    windows taken from the end.
    """
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    if isinstance(sequences, np.ndarray) and sequences.ndim == 2:
        flat = sequences.reshape(-1)
    else:
        parts = [np.asarray(s, dtype=np.int64).reshape(-1) for s in sequences]
        flat = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    n_win = flat.size // seq_len
    if n_win < 1:
        raise ValueError(f"need at least {seq_len} tokens for one window, got {flat.size}")
    windows = flat[: n_win * seq_len].reshape(n_win, seq_len)
    n_val = int(round(n_win * val_fraction))
    train = Dataset(windows[: n_win - n_val], vocab_size, provenance, "train")
    val = Dataset(windows[n_win - n_val :], vocab_size, provenance, "val")
    return train, val


def mix_datasets(datasets, weights, n_windows: int, seed: int) -> Dataset:
    """Draw ``n_windows`` windows from several datasets in the given proportions."""
    if len(datasets) != len(weights) or not datasets:
        raise ValueError("need one weight per dataset")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("mixture weights must be non-negative with a positive sum")
    counts = np.floor(w / w.sum() * n_windows).astype(int)
    counts[np.argmax(w)] += n_windows - counts.sum()
    seq_len = datasets[0].seq_len
    parts = []
    for i, (ds, c) in enumerate(zip(datasets, counts)):
        if ds.seq_len != seq_len:
            raise ValueError("all mixed datasets must share seq_len")
        if c == 0:
            continue
        pick = rng.integers(seed, 100 + i, np.arange(c), len(ds))
        parts.append(ds.tokens[pick])
    toks = np.concatenate(parts)
    order = np.argsort(rng.uniform(seed, 99, np.arange(len(toks))), kind="stable")
    return Dataset(toks[order], datasets[0].vocab_size, "mix", "train")


def iterate_batches(dataset: Dataset, batch_size: int, seed: int):
    """Endless stream of ``(batch_size, seq_len)`` arrays; reshuffled every epoch."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    epoch = 0
    while True:
        order = np.argsort(rng.uniform(seed, 1000 + epoch, np.arange(n)), kind="stable")
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < batch_size:
                idx = np.resize(idx, batch_size)
            yield dataset.tokens[idx]
        epoch += 1


# -- NVDS files -----------------------------------------------------------------

_MAGIC = b"NVDS"
_VERSION = 1


def save_dataset(path, ds: Dataset) -> None:
    if ds.vocab_size > 65536:
        raise ValueError("NVDS stores u16 token ids")
    header = _MAGIC + struct.pack(
        "<HIIBI", _VERSION, ds.vocab_size, ds.seq_len, PROVENANCES.index(ds.provenance), len(ds)
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(ds.tokens.astype("<u2").tobytes())


def load_dataset(path, split: str = "train") -> Dataset:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not an NVDS dataset")
    version, vocab, seq_len, prov, count = struct.unpack_from("<HIIBI", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported NVDS version {version}")
    off = 4 + struct.calcsize("<HIIBI")
    toks = np.frombuffer(data, dtype="<u2", count=count * seq_len, offset=off)
    return Dataset(toks.reshape(count, seq_len).astype(np.int64), vocab, PROVENANCES[prov], split)


def load_token_file(path, seq_len: int, vocab_size: int, val_fraction: float = 0.1):
    """Whitespace-separated token ids from a text file, packed and split."""
    with open(path) as f:
        ids = np.array(f.read().split(), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"token id out of range [0, {vocab_size})")
    return pack_and_split([ids], seq_len, val_fraction, vocab_size, "file")
