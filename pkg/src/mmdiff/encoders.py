"""Patch, calendar and text encoders producing width-``d_model`` sequences."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .container import read_container
from .data import TextContext, parse_timestamp
from .errors import ConfigError, InputError, ShapeError
from .tensor import Tensor

N_CALENDAR_FEATURES = 6
TEXT_BUCKETS = 4096
TEXT_MAX_TOKENS = 256


@dataclass(frozen=True)
class PatchConfig:
    P: int = 16
    S: int = 8
    d_model: int = 64

    def __post_init__(self):
        if not 1 <= self.S <= self.P:
            raise ConfigError(f"need 1 <= stride <= patch length, got S={self.S}, P={self.P}")

    def padded_length(self, n: int) -> int:
        if n < 1:
            raise InputError("cannot patch an empty series")
        if n <= self.P:
            return self.P
        return self.P + math.ceil((n - self.P) / self.S) * self.S

    def num_patches(self, n: int) -> int:
        return (self.padded_length(n) - self.P) // self.S + 1


def patch_index(n: int, cfg: PatchConfig) -> np.ndarray:
    """``[M, P]`` source row for every patch slot, right-padding with the last row."""
    padded = cfg.padded_length(n)
    M = (padded - cfg.P) // cfg.S + 1
    pos = np.arange(M)[:, None] * cfg.S + np.arange(cfg.P)[None, :]
    return np.minimum(pos, n - 1)


def patchify(series, cfg: PatchConfig) -> Tensor:
    """Split ``[len, C]`` or ``[B, len, C]`` into overlapping patches.

    Returns ``[..., M, C * P]`` with each patch flattened channel-major.
    """
    series = T.as_tensor(series)
    squeeze = series.ndim == 2
    if squeeze:
        series = T.reshape(series, (1,) + series.shape)
    if series.ndim != 3:
        raise ShapeError(f"patchify expects [len, C] or [B, len, C], got {series.shape}")
    B, n, C = series.shape
    idx = patch_index(n, cfg)
    M = idx.shape[0]
    p = T.getitem(series, (slice(None), idx))  # [B, M, P, C]
    p = T.reshape(T.transpose(p, (0, 1, 3, 2)), (B, M, C * cfg.P))
    return T.reshape(p, (M, C * cfg.P)) if squeeze else p


def step_embedding(k, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer diffusion steps, ``[len(k), dim]``."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = k[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(k), 1))], axis=1)
    return emb


def mlp2(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(T.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return T.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def embed_patches(patches: Tensor, params: dict[str, Tensor], k=None) -> Tensor:
    """Shared two-layer MLP per patch, plus positional and diffusion-step terms."""
    patches = T.as_tensor(patches)
    w1 = params["patch.w1"]
    if patches.shape[-1] != w1.shape[0]:
        raise ShapeError(f"patch width {patches.shape[-1]} does not match MLP input {w1.shape[0]}")
    z = mlp2(patches, params, "patch")
    M = patches.shape[-2]
    pos = params["patch.pos"]
    if M > pos.shape[0]:
        raise ShapeError(f"{M} patches exceed positional table of {pos.shape[0]}")
    z = z + T.getitem(pos, slice(0, M))
    if k is not None:
        emb = step_embedding(k, z.shape[-1])
        if z.ndim == 3:
            emb = emb[:, None, :]
        else:
            emb = emb[0]
        z = z + emb
    return z


# -- calendar ---------------------------------------------------------------------------
def calendar_features(dt: datetime) -> np.ndarray:
    """Day-of-week, day-of-month, month, ISO week, and position within the year as sin/cos."""
    year_len = 366 if (dt.year % 4 == 0 and (dt.year % 100 != 0 or dt.year % 400 == 0)) else 365
    doy = dt.timetuple().tm_yday
    frac = (doy - 1 + (dt.hour * 3600 + dt.minute * 60 + dt.second) / 86400.0) / year_len
    week = dt.isocalendar()[1]
    return np.array([
        dt.weekday() / 6.0,
        (dt.day - 1) / 30.0,
        (dt.month - 1) / 11.0,
        min((week - 1) / 52.0, 1.0),
        math.sin(2 * math.pi * frac),
        math.cos(2 * math.pi * frac),
    ])


def calendar_matrix(stamps: Sequence) -> np.ndarray:
    rows = []
    for i, s in enumerate(stamps):
        if isinstance(s, str):
            try:
                s = parse_timestamp(s)
            except InputError:
                raise InputError(f"timestamp row {i}: unparseable value {s!r}") from None
        rows.append(calendar_features(s))
    return np.array(rows).reshape(len(rows), N_CALENDAR_FEATURES)


def encode_timestamps(features, params: dict[str, Tensor]) -> Tensor:
    """Calendar feature rows ``[..., L, 6]`` to embeddings ``[..., L, d_model]``."""
    return mlp2(T.as_tensor(features), params, "time")


# -- text ---------------------------------------------------------------------------------
_TOKEN_RE = re.compile(r"[a-z0-9]+")
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def bucket(token: str, n_buckets: int = TEXT_BUCKETS) -> int:
    return fnv1a_64(token.encode("utf-8")) % n_buckets


@dataclass
class TextBatch:
    """Padded text tokens for a batch.

    ``ids`` index the hashed-bucket table; ``vectors`` (if set) carry
    precomputed embeddings instead. ``empty`` marks samples with no text,
    which are replaced by the null text token.
    """

    ids: np.ndarray  # [B, N] int
    ages: np.ndarray  # [B, N] int
    mask: np.ndarray  # [B, N] bool
    empty: np.ndarray  # [B] bool
    vectors: np.ndarray | None = None  # [B, N, E]

    def __len__(self) -> int:
        return self.ids.shape[0]

    def subset(self, idx) -> "TextBatch":
        v = None if self.vectors is None else self.vectors[idx]
        return TextBatch(self.ids[idx], self.ages[idx], self.mask[idx], self.empty[idx], v)


class TextEncoder(Protocol):
    def tokenize_context(self, ctx: TextContext) -> tuple[list[int], list[int], np.ndarray | None]:
        """Return (bucket ids, ages, optional vectors) for one context."""
        ...


class HashedBowEncoder:
    """Lowercase alphanumeric tokens hashed with 64-bit FNV-1a into fixed buckets."""

    def __init__(self, n_buckets: int = TEXT_BUCKETS, max_tokens: int = TEXT_MAX_TOKENS):
        self.n_buckets = n_buckets
        self.max_tokens = max_tokens

    def tokenize_context(self, ctx: TextContext):
        ids, ages = [], []
        for i, r in enumerate(ctx.reports):
            toks = [bucket(t, self.n_buckets) for t in tokenize(r.text)]
            ids.extend(toks)
            ages.extend([ctx.ages[i] if ctx.ages else 0] * len(toks))
        # keep the most recent tokens
        return ids[-self.max_tokens:], ages[-self.max_tokens:], None


class PrecomputedTextEncoder:
    """One externally computed vector per report, read from a named-array container.

    Arrays are named ``report/<index>`` where ``index`` is the report's
    position in the sorted report list.
    """

    def __init__(self, path: str | Path):
        meta, arrays = read_container(path)
        self.vectors: dict[int, np.ndarray] = {}
        for name, arr in arrays.items():
            if not name.startswith("report/"):
                continue
            self.vectors[int(name.split("/", 1)[1])] = np.asarray(arr, dtype=np.float64).reshape(-1)
        if not self.vectors:
            raise InputError(f"{path}: no report/<index> arrays found")
        dims = {v.shape[0] for v in self.vectors.values()}
        if len(dims) != 1:
            raise InputError(f"{path}: report vectors have differing widths {sorted(dims)}")
        self.dim = dims.pop()

    def tokenize_context(self, ctx: TextContext):
        ids, ages, vecs = [], [], []
        for i, r in enumerate(ctx.reports):
            if r.index not in self.vectors:
                raise InputError(f"no precomputed embedding for report {r.index}")
            ids.append(0)
            ages.append(ctx.ages[i] if ctx.ages else 0)
            vecs.append(self.vectors[r.index])
        v = np.array(vecs).reshape(len(vecs), self.dim)
        return ids, ages, v


def text_batch(contexts: Sequence[TextContext], encoder=None) -> TextBatch:
    encoder = encoder or HashedBowEncoder()
    toks = [encoder.tokenize_context(c) for c in contexts]
    B = len(toks)
    N = max([1] + [len(t[0]) for t in toks])
    ids = np.zeros((B, N), dtype=np.int64)
    ages = np.zeros((B, N), dtype=np.int64)
    mask = np.zeros((B, N), dtype=bool)
    vectors = None
    has_vectors = any(t[2] is not None for t in toks)
    if has_vectors:
        dim = next(t[2].shape[1] for t in toks if t[2] is not None)
        vectors = np.zeros((B, N, dim))
    for i, (tid, tage, tvec) in enumerate(toks):
        n = len(tid)
        ids[i, :n] = tid
        ages[i, :n] = tage
        mask[i, :n] = True
        if has_vectors and n:
            vectors[i, :n] = tvec
    empty = ~mask.any(axis=1)
    return TextBatch(ids, ages, mask, empty, vectors)


def hashed_bow_encode(ctx: TextContext, params: dict[str, Tensor], encoder: HashedBowEncoder | None = None) -> Tensor:
    """Embed one context as ``[N_tok, d_model]``; empty text gives the single null row."""
    emb, _ = embed_text(text_batch([ctx], encoder), params, np.zeros(1, dtype=bool))
    n = int(max(1, len((encoder or HashedBowEncoder()).tokenize_context(ctx)[0])))
    return T.reshape(T.getitem(emb, (0, slice(0, n))), (n, emb.shape[-1]))


def embed_text(tb: TextBatch, params: dict[str, Tensor], drop: np.ndarray, use_recency: bool = True) -> tuple[Tensor, np.ndarray]:
    """Token embeddings ``[B, N, d]`` and the effective key mask.

    Samples that are empty or dropped get the null text row in slot 0 and
    nothing else.
    """
    if tb.vectors is not None:
        emb = T.linear(tb.vectors, params["text.proj_w"], params["text.proj_b"])
    else:
        n_rows = params["text.table"].shape[0]
        if tb.ids.size and tb.ids.max() >= n_rows:
            raise ShapeError(f"text bucket id {int(tb.ids.max())} exceeds the {n_rows}-row bucket table")
        emb = T.take_rows(params["text.table"], tb.ids)
    if use_recency and "text.age" in params:
        table = params["text.age"]
        emb = emb + T.take_rows(table, np.minimum(tb.ages, table.shape[0] - 1))
    use_null = np.asarray(tb.empty | np.asarray(drop, dtype=bool))
    B, N = tb.ids.shape
    slot0 = np.zeros((B, N), dtype=bool)
    slot0[:, 0] = True
    keep = (tb.mask & ~use_null[:, None]).astype(np.float64)[..., None]
    null_slot = (slot0 & use_null[:, None]).astype(np.float64)[..., None]
    d = emb * keep + T.reshape(params["null.d"], (1, 1, -1)) * null_slot
    mask = np.where(use_null[:, None], slot0, tb.mask)
    return d, mask
