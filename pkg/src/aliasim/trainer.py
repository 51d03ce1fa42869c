"""Optimization loop, learning-rate schedule, and checkpoint files."""
from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import env as E
from .dataset import ChunkBatch, FormatError, chunkify
from .flow import TrainingError, flow_loss
from .model import VARIANTS, ChunkPolicy, PolicyConfig, build_variant
from .nn import ConfigError
from .rng import RngState, as_rng

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ALIASCKPT"
CKPT_VERSION = 1
SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    schedule: str = "cosine"
    clip: float = 1.0
    seed: int = 0
    variant: str = "intent"
    log_every: int = 10
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.clip <= 0:
            raise ConfigError("clip must be > 0")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def learning_rate(step: int, config: TrainConfig) -> float:
    """Rate for update ``step`` (0-based). Cosine reaches exactly 0 on the last update."""
    if config.schedule == "constant":
        return config.lr
    last = max(config.steps - 1, 1)
    frac = min(max(step / last, 0.0), 1.0)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay, applied to weight matrices only."""

    def __init__(self, params: list[tuple[str, "object"]], betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data -= lr * self.wd * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    grads = [p.grad for _, p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if not math.isfinite(total):
        raise TrainingError("non-finite gradient norm")
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


@dataclass
class LossPoint:
    step: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    model: ChunkPolicy
    losses: list[LossPoint]
    steps_done: int
    rng: RngState
    aborted: str | None = None


def train(model: ChunkPolicy, samples: ChunkBatch, config: TrainConfig,
          on_log: Callable[[LossPoint], None] | None = None,
          cache_history: bool = True) -> TrainResult:
    """Mini-batch flow-matching training with AdamW, clipping and the chosen schedule.

    Batches come from an epoch-wise shuffle of ``samples``. Losses are
    recorded every ``log_every`` updates and at the final one. On a
    non-finite loss the parameters are rolled back to the last good update
    and the result carries the abort reason.
    """
    if config.steps > 0 and len(samples) == 0:
        raise ConfigError("cannot train on an empty dataset")
    rng = as_rng(config.seed).child("train")
    order_gen = rng.child("order").generator()
    flow_gen = rng.child("flow").generator()
    params = model.parameters()
    opt = AdamW(params, config.betas, config.adam_eps, config.weight_decay)
    evidence = None
    if cache_history and model.history is not None and config.steps > 0:
        evidence = model.encode_history(samples.obs, samples.history)

    losses: list[LossPoint] = []
    perm, cursor = np.zeros(0, dtype=np.int64), 0
    n = len(samples)
    for step in range(config.steps):
        if cursor + config.batch_size > len(perm):
            # reshuffle, keeping the unused tail so every sample is seen once per epoch
            perm = np.concatenate([perm[cursor:], order_gen.permutation(n)])
            cursor = 0
            while len(perm) < config.batch_size:
                perm = np.concatenate([perm, order_gen.permutation(n)])
        idx = perm[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        batch = samples[idx]
        ev = (evidence[0][idx], evidence[1][idx]) if evidence is not None else None
        lr = learning_rate(step, config)
        model.zero_grad()
        backup = [p.data.copy() for _, p in params]
        try:
            loss = flow_loss(model, batch, flow_gen, evidence=ev)
            loss.backward()
            clip_grad_norm(params, config.clip)
        except TrainingError as exc:
            log.error("aborting at step %d: %s", step, exc)
            return TrainResult(model, losses, step, rng, aborted=str(exc))
        opt.step(lr)
        if not all(np.isfinite(p.data).all() for _, p in params):
            for (_, p), b in zip(params, backup):
                p.data[...] = b
            return TrainResult(model, losses, step, rng, aborted="non-finite parameters after update")
        if step % config.log_every == 0 or step == config.steps - 1:
            pt = LossPoint(step, float(loss.data), lr)
            losses.append(pt)
            if on_log:
                on_log(pt)
    model.zero_grad()
    return TrainResult(model, losses, config.steps, rng)


def train_on_corpus(spec: E.TaskSpec, corpus, config: TrainConfig, on_log=None,
                    **model_kw) -> TrainResult:
    """Build ``config.variant`` for ``spec``, chunk the corpus, and train it."""
    model = build_variant(config.variant, spec, seed=config.seed, **model_kw)
    samples = chunkify(corpus, model.config.K, model.config.H, spec=spec)
    return train(model, samples, config, on_log)


def write_loss_csv(path, losses: list[LossPoint]) -> None:
    lines = ["step,loss,lr"] + [f"{p.step},{p.loss!r},{p.lr!r}" for p in losses]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    policy: dict                     # PolicyConfig.to_dict()
    params: dict                     # name -> array
    frozen: dict                     # name -> array
    seed: int = 0
    step: int = 0
    rng: dict = field(default_factory=dict)
    task: dict | None = None
    train: dict | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ChunkPolicy, seed: int, step: int = 0, rng: RngState | None = None,
                   task: E.TaskSpec | None = None, train: TrainConfig | None = None,
                   extra: dict | None = None) -> "Checkpoint":
        return cls(model.config.to_dict(),
                   {n: t.data.copy() for n, t in model.parameters()},
                   {n: t.data.copy() for n, t in model.frozen_tensors()},
                   seed, step, rng.to_dict() if rng else {},
                   task.to_dict() if task else None,
                   train.to_dict() if train else None, dict(extra or {}))

    def build(self) -> ChunkPolicy:
        """Reconstruct the model and overwrite every tensor with the stored values."""
        model = ChunkPolicy(PolicyConfig.from_dict(self.policy), self.seed)
        for section, tensors in (("params", model.parameters()), ("frozen", model.frozen_tensors())):
            stored = getattr(self, section)
            names = [n for n, _ in tensors]
            if sorted(names) != sorted(stored):
                raise FormatError(f"checkpoint {section} do not match the model graph")
            for name, t in tensors:
                arr = stored[name]
                if arr.shape != t.data.shape:
                    raise FormatError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
                t.data = arr.copy()
        return model

    def task_spec(self) -> E.TaskSpec | None:
        return E.TaskSpec.from_dict(self.task) if self.task else None


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries, chunks, offset = [], [], 0
    for section in ("params", "frozen"):
        for name, arr in getattr(ckpt, section).items():
            a = np.asarray(arr, dtype="<f8")
            entries.append({"name": name, "section": section, "shape": list(a.shape), "offset": offset})
            chunks.append(a.tobytes(order="C"))
            offset += a.size
    header = {"format_version": CKPT_VERSION, "tensors": entries, "policy": ckpt.policy,
              "seed": ckpt.seed, "step": ckpt.step, "rng": ckpt.rng, "task": ckpt.task,
              "train": ckpt.train, "extra": ckpt.extra}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb + b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    fixed = len(CKPT_MAGIC) + 8
    if len(raw) < fixed + 4 or raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[len(CKPT_MAGIC):fixed])
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise FormatError("checkpoint checksum mismatch")
    try:
        header = json.loads(raw[fixed:fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("checkpoint header is not valid JSON") from exc
    payload = raw[fixed + hlen:-4]
    sections: dict[str, dict] = {"params": {}, "frozen": {}}
    total = 0
    for e in header["tensors"]:
        size = int(np.prod(e["shape"]))
        start = e["offset"] * 8
        if start + size * 8 > len(payload):
            raise FormatError(f"tensor {e['name']} runs past the payload")
        sections[e["section"]][e["name"]] = (
            np.frombuffer(payload, dtype="<f8", count=size, offset=start)
            .reshape(e["shape"]).astype(np.float64))
        total += size
    if total * 8 != len(payload):
        raise FormatError("payload size does not match the tensor table")
    return Checkpoint(header["policy"], sections["params"], sections["frozen"], header["seed"],
                      header["step"], header["rng"], header["task"], header["train"],
                      header.get("extra", {}))
