"""Demonstration corpora, chunk slicing, and the portable corpus file format.

File layout (all integers little-endian)::

    b"ALIASIM1" | u32 version | u32 record count
    per record: u32 header length | UTF-8 JSON header
                | f64 payload arrays, in header["arrays"] order | u32 CRC32(payload)
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import env as E
from .rng import RngState, as_rng

log = logging.getLogger(__name__)

MAGIC = b"ALIASIM1"
VERSION = 1


class FormatError(IOError):
    """Corpus file is malformed, truncated, corrupted, or from another version."""


@dataclass
class EpisodeRecord:
    task: str
    seed: int
    observations: np.ndarray   # (T, obs_dim)
    actions: np.ndarray        # (T, d_a)
    z: np.ndarray              # (T,) int
    phase: np.ndarray          # (T,) int
    windows: list[tuple[int, int]] = field(default_factory=list)
    success: bool = False

    def __len__(self) -> int:
        return len(self.actions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EpisodeRecord):
            return NotImplemented
        return (self.task == other.task and self.seed == other.seed
                and self.windows == other.windows and self.success == other.success
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("observations", "actions", "z", "phase")))


@dataclass
class ChunkSample:
    obs: np.ndarray            # o_t
    instruction: int           # task id, never z
    history: np.ndarray        # (K, obs_dim), oldest first
    chunk: np.ndarray          # (H, d_a)
    in_ambiguity: bool
    z: int


@dataclass
class ChunkBatch:
    """Column-stacked chunk samples; what the trainer consumes."""

    obs: np.ndarray            # (S, obs_dim)
    instruction: np.ndarray    # (S,) int
    history: np.ndarray        # (S, K, obs_dim)
    chunk: np.ndarray          # (S, H, d_a)
    in_ambiguity: np.ndarray   # (S,) bool
    z: np.ndarray              # (S,) int
    episode: np.ndarray        # (S,) int
    t: np.ndarray              # (S,) int

    def __len__(self) -> int:
        return len(self.obs)

    def __getitem__(self, idx) -> "ChunkBatch | ChunkSample":
        if isinstance(idx, (int, np.integer)):
            return ChunkSample(self.obs[idx], int(self.instruction[idx]), self.history[idx],
                               self.chunk[idx], bool(self.in_ambiguity[idx]), int(self.z[idx]))
        return ChunkBatch(*(getattr(self, k)[idx] for k in _BATCH_FIELDS))


_BATCH_FIELDS = ("obs", "instruction", "history", "chunk", "in_ambiguity", "z", "episode", "t")


# ---------------------------------------------------------------- generation

def run_expert_episode(spec: E.TaskSpec, z: int, rng: RngState, noise: float | None = None,
                       task: str | None = None) -> EpisodeRecord:
    """Roll the scripted expert for ``spec.episode_len`` steps with Gaussian action noise."""
    noise = spec.noise if noise is None else noise
    gen = rng.child("noise").generator()
    s = E.initial_state(spec, z, rng.child("init"))
    T = spec.episode_len
    obs = np.zeros((T, spec.obs_dim))
    acts = np.zeros((T, spec.action_dim))
    phases = np.zeros(T, dtype=np.int64)
    for t in range(T):
        obs[t] = E.observe(s, spec)
        phases[t] = s.phase
        a = E.expert_action(s, spec).reshape(spec.n_effectors, E.ACTION_DIM_PER_EFFECTOR)
        if noise > 0:
            a[:, :2] += gen.normal(0.0, noise, (spec.n_effectors, 2))
        acts[t] = a.reshape(-1)
        s = E.step(s, acts[t], spec)
    rec = EpisodeRecord(task or spec.name, rng.seed, obs, acts,
                        np.full(T, z, dtype=np.int64), phases, success=E.success(s, spec))
    rec.windows = ambiguity_windows(rec, spec)
    return rec


def generate_corpus(spec: E.TaskSpec, episodes: int, seed=0,
                    noise: float | None = None) -> list[EpisodeRecord]:
    """Scripted-expert demonstrations with intents assigned round-robin."""
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    root = as_rng(seed)
    return [run_expert_episode(spec, i % spec.num_intents, root.child("episode", i), noise)
            for i in range(episodes)]


def ambiguity_windows(episode: EpisodeRecord, spec: E.TaskSpec) -> list[tuple[int, int]]:
    return E.mask_to_windows(E.in_window_mask(episode.observations, spec))


def intent_counts(episodes: Iterable[EpisodeRecord], num_intents: int) -> list[int]:
    counts = [0] * num_intents
    for ep in episodes:
        counts[int(ep.z[0])] += 1
    return counts


# ---------------------------------------------------------------- chunking

def history_window(observations: np.ndarray, t: int, K: int) -> np.ndarray:
    """o_{t-K..t-1}, left-padded with o_0 when t < K (t = 0 yields K copies of o_0)."""
    idx = np.clip(np.arange(t - K, t), 0, None)
    return observations[idx]


def chunk_window(actions: np.ndarray, t: int, H: int) -> np.ndarray:
    """a_{t..t+H-1}, right-padded by repeating the last action."""
    idx = np.minimum(np.arange(t, t + H), len(actions) - 1)
    return actions[idx]


def chunkify(episodes: Sequence[EpisodeRecord], K: int = 16, H: int = 8, stride: int = 1,
             instruction: int | None = None, spec: E.TaskSpec | None = None) -> ChunkBatch:
    """One sample per ``stride`` steps of every episode.

    The instruction id comes from ``instruction`` or ``spec``; it is constant
    per task so it carries no information about ``z``.
    """
    if K < 1 or H < 1 or stride < 1:
        raise ValueError("K, H and stride must all be at least 1")
    if instruction is None:
        instruction = spec.instruction if spec is not None else 0
    cols: dict[str, list] = {k: [] for k in _BATCH_FIELDS}
    for ei, ep in enumerate(episodes):
        T = len(ep)
        if T == 0:
            log.warning("skipping empty episode %d", ei)
            continue
        inwin = np.zeros(T, dtype=bool)
        for a, b in ep.windows:
            inwin[a:b + 1] = True
        for t in range(0, T, stride):
            cols["obs"].append(ep.observations[t])
            cols["instruction"].append(instruction)
            cols["history"].append(history_window(ep.observations, t, K))
            cols["chunk"].append(chunk_window(ep.actions, t, H))
            cols["in_ambiguity"].append(inwin[t])
            cols["z"].append(int(ep.z[t]))
            cols["episode"].append(ei)
            cols["t"].append(t)
    if not cols["obs"]:
        raise ValueError("no samples: every episode was empty")
    return ChunkBatch(
        np.array(cols["obs"]), np.array(cols["instruction"], dtype=np.int64),
        np.array(cols["history"]), np.array(cols["chunk"]),
        np.array(cols["in_ambiguity"], dtype=bool), np.array(cols["z"], dtype=np.int64),
        np.array(cols["episode"], dtype=np.int64), np.array(cols["t"], dtype=np.int64),
    )


# ---------------------------------------------------------------- persistence

_EPISODE_ARRAYS = ("observations", "actions", "z", "phase")


def _write_record(fh, header: dict, arrays: list[np.ndarray]) -> None:
    header = dict(header, arrays=[list(a.shape) for a in arrays])
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    fh.write(struct.pack("<I", len(hb)))
    fh.write(hb)
    fh.write(payload)
    fh.write(struct.pack("<I", zlib.crc32(payload)))


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise FormatError("file is truncated")
    return b


def _read_record(fh) -> tuple[dict, list[np.ndarray]]:
    (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
    try:
        header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("record header is not valid JSON") from exc
    shapes = [tuple(s) for s in header.pop("arrays")]
    sizes = [int(np.prod(s)) * 8 for s in shapes]
    payload = _read_exact(fh, sum(sizes))
    (crc,) = struct.unpack("<I", _read_exact(fh, 4))
    if zlib.crc32(payload) != crc:
        raise FormatError("payload checksum mismatch")
    arrays, off = [], 0
    for shape, n in zip(shapes, sizes):
        arrays.append(np.frombuffer(payload, dtype="<f8", count=n // 8, offset=off)
                      .reshape(shape).astype(np.float64))
        off += n
    return header, arrays


def _write_container(path, records: list[tuple[dict, list[np.ndarray]]]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(records)))
        for header, arrays in records:
            _write_record(fh, header, arrays)


def _read_container(path) -> list[tuple[dict, list[np.ndarray]]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"bad magic bytes {magic!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise FormatError(f"unsupported corpus version {version}")
        records = [_read_record(fh) for _ in range(count)]
        if fh.read(1):
            raise FormatError("trailing bytes after the last record")
    return records


def save_corpus(episodes: Sequence[EpisodeRecord], path) -> None:
    records = []
    for ep in episodes:
        header = {"kind": "episode", "task": ep.task, "seed": ep.seed,
                  "windows": [list(w) for w in ep.windows], "success": bool(ep.success)}
        records.append((header, [np.asarray(getattr(ep, k), dtype=np.float64)
                                 for k in _EPISODE_ARRAYS]))
    _write_container(path, records)


def load_corpus(path) -> list[EpisodeRecord]:
    out = []
    for header, arrays in _read_container(path):
        if header.get("kind") != "episode":
            raise FormatError("file does not hold episode records")
        obs, acts, z, phase = arrays
        out.append(EpisodeRecord(header["task"], int(header["seed"]), obs, acts,
                                 z.astype(np.int64), phase.astype(np.int64),
                                 [tuple(w) for w in header["windows"]], bool(header["success"])))
    return out


def save_samples(batch: ChunkBatch, path) -> None:
    arrays = [np.asarray(getattr(batch, k), dtype=np.float64) for k in _BATCH_FIELDS]
    _write_container(path, [({"kind": "samples", "count": len(batch)}, arrays)])


def load_samples(path) -> ChunkBatch:
    records = _read_container(path)
    if len(records) != 1 or records[0][0].get("kind") != "samples":
        raise FormatError("file does not hold a sample batch")
    a = dict(zip(_BATCH_FIELDS, records[0][1]))
    for k in ("instruction", "z", "episode", "t"):
        a[k] = a[k].astype(np.int64)
    a["in_ambiguity"] = a["in_ambiguity"].astype(bool)
    return ChunkBatch(**a)


def write_manifest(path, files: Sequence[str], spec: E.TaskSpec, seed: int,
                   episodes: int, config: dict | None = None) -> None:
    manifest = {"files": list(files), "task_specs": [spec.to_dict()],
                "generation": {"seed": seed, "episodes": episodes},
                "config": config or {}}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
