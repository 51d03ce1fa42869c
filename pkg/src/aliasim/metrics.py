"""Evaluation instruments: chunk consistency, mode switching, success, and the
retrieval-based aliasing diagnostic, plus the closed-loop rollout harness."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import env as E
from .dataset import EpisodeRecord, history_window
from .rng import RngState, as_rng

REPORT_COLUMNS = ("task", "family", "variant", "metric", "value", "count", "seed", "r")


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------- scalar metrics

def icc_l2(chunk_a, chunk_b, r: int) -> float:
    """Mean squared disagreement on the steps two consecutive chunks share.

    ``chunk_a`` is planned at t and ``chunk_b`` at t + r, so absolute step
    t + j sits at index j of ``chunk_a`` and index j - r of ``chunk_b``.
    """
    a = np.asarray(chunk_a, dtype=np.float64)
    b = np.asarray(chunk_b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape != b.shape:
        raise MetricError(f"chunk shapes differ: {a.shape} vs {b.shape}")
    H = a.shape[0]
    if not 1 <= r < H:
        raise MetricError(f"replan interval r={r} leaves no overlap with H={H}")
    diff = a[r:] - b[:H - r]
    return float((diff * diff).sum() / (H - r))


def _check_distribution(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise MetricError(f"{name} must be a non-empty vector")
    if (p < 0).any() or not np.isfinite(p).all():
        raise MetricError(f"{name} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > 1e-9:
        raise MetricError(f"{name} sums to {p.sum()!r}, not 1")
    return p


def p_switch(p_t, p_tr) -> float:
    """Probability two independent draws from ``p_t`` and ``p_tr`` name different intents."""
    a = _check_distribution(p_t, "p_t")
    b = _check_distribution(p_tr, "p_tr")
    if a.shape != b.shape:
        raise MetricError("distributions cover different intent sets")
    return float(1.0 - np.dot(a, b))


def percentile_nearest_rank(values, q: float) -> float:
    """Smallest value with at least q percent of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if len(v) == 0:
        raise MetricError("percentile of an empty sample")
    if not 0 <= q <= 100:
        raise MetricError("q must lie in [0, 100]")
    rank = max(1, math.ceil(q / 100.0 * len(v)))
    return float(v[rank - 1])


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise MetricError("cosine distance undefined for a zero vector")
    return float(1.0 - np.dot(u, v) / (nu * nv))


# ---------------------------------------------------------------- aliasing diagnostic

class Protocol(str, Enum):
    INTRA_EPISODE = "intra-episode"
    CROSS_EPISODE = "cross-episode"


@dataclass(frozen=True)
class DiagnosticConfig:
    k: int = 5
    gap: int = 20
    protocol: Protocol = Protocol.CROSS_EPISODE

    def __post_init__(self):
        if self.k < 1:
            raise MetricError("k must be at least 1")
        if self.protocol == Protocol.INTRA_EPISODE and self.gap < 1:
            raise MetricError("intra-episode retrieval needs gap >= 1")

    @classmethod
    def for_family(cls, family, k: int = 5, gap: int = 20) -> "DiagnosticConfig":
        if E.Family(family) == E.Family.BACK_AND_FORTH:
            return cls(k, gap, Protocol.INTRA_EPISODE)
        return cls(k, gap, Protocol.CROSS_EPISODE)

    def describe(self) -> str:
        if self.protocol == Protocol.INTRA_EPISODE:
            return f"intra-episode, gap {self.gap}"
        return "cross-episode"


@dataclass
class DiagnosticResult:
    ratio: float                  # mean fraction of top-k neighbours with another label
    median_same: float            # median distance to the nearest same-label candidate
    median_diff: float
    queries: int
    skipped: int
    protocol: str


def alias_diagnostic(corpus: Sequence[EpisodeRecord], spec: E.TaskSpec,
                     embedder: Callable[[np.ndarray], np.ndarray],
                     config: DiagnosticConfig | None = None) -> DiagnosticResult:
    """Top-k cosine retrieval among in-window frames; how often do neighbours disagree?

    Candidates are the in-window frames of the same episode at least ``gap``
    steps away (intra-episode) or of every other episode (cross-episode).
    Queries with fewer than k candidates are skipped and counted.
    """
    config = config or DiagnosticConfig.for_family(spec.family)
    frames, labels, ep_ids, steps = [], [], [], []
    for i, ep in enumerate(corpus):
        for a, b in ep.windows:
            for t in range(a, b + 1):
                frames.append(ep.observations[t])
                labels.append(E.intent_label(spec, int(ep.z[t]), int(ep.phase[t])))
                ep_ids.append(i)
                steps.append(t)
    if not frames:
        raise MetricError("corpus has no in-window frames")
    X = np.asarray(embedder(np.asarray(frames)), dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if (norms == 0).any():
        raise MetricError("embedder produced a zero vector")
    X = X / norms
    labels, ep_ids, steps = np.asarray(labels), np.asarray(ep_ids), np.asarray(steps)
    dist = 1.0 - X @ X.T

    ratios, near_same, near_diff, skipped = [], [], [], 0
    for q in range(len(X)):
        if config.protocol == Protocol.INTRA_EPISODE:
            cand = (ep_ids == ep_ids[q]) & (np.abs(steps - steps[q]) >= config.gap)
        else:
            cand = ep_ids != ep_ids[q]
        idx = np.flatnonzero(cand)
        if len(idx) < config.k:
            skipped += 1
            continue
        d = dist[q, idx]
        order = np.argsort(d, kind="stable")[:config.k]
        diff = labels[idx] != labels[q]
        ratios.append(float(diff[order].mean()))
        if (~diff).any():
            near_same.append(float(d[~diff].min()))
        if diff.any():
            near_diff.append(float(d[diff].min()))
    if not ratios:
        raise MetricError("every query lacked enough candidates")
    return DiagnosticResult(
        float(np.mean(ratios)),
        float(np.median(near_same)) if near_same else float("nan"),
        float(np.median(near_diff)) if near_diff else float("nan"),
        len(ratios), skipped, config.describe())


# ---------------------------------------------------------------- policies

class Policy:
    """Closed-loop chunk planner over a batch of parallel episodes.

    ``plan`` receives current observations [B, obs_dim], history windows
    [B, K, obs_dim], the true world states (only oracles may look), and one
    generator per episode; it returns chunks [B, H, d_a] in raw action units.
    """

    name = "policy"
    H = 8
    K = 16

    def plan(self, obs, history, states, gens) -> np.ndarray:
        raise NotImplementedError

    def sample(self, obs, history, states, gens, n_draws: int) -> np.ndarray:
        """``n_draws`` independent chunks per episode: [B, n_draws, H, d_a]."""
        return np.stack([self.plan(obs, history, states, gens) for _ in range(n_draws)], axis=1)


class ExpertPolicy(Policy):
    name = "expert"

    def __init__(self, spec: E.TaskSpec, H: int = 8, K: int = 16):
        self.spec, self.H, self.K = spec, H, K

    def plan(self, obs, history, states, gens):
        return np.stack([E.expert_chunk(s, self.spec, self.H) for s in states])


class ConstantPolicy(Policy):
    """Emits the same chunk every time (zero chunk by default)."""

    name = "constant"

    def __init__(self, spec: E.TaskSpec, H: int = 8, chunk=None):
        self.H = H
        self.chunk = np.zeros((H, spec.action_dim)) if chunk is None else np.asarray(chunk, float)

    def plan(self, obs, history, states, gens):
        return np.broadcast_to(self.chunk, (len(obs), *self.chunk.shape)).copy()


class RandomPolicy(Policy):
    name = "random"

    def __init__(self, spec: E.TaskSpec, H: int = 8):
        self.spec, self.H = spec, H
        self.scale = np.tile([spec.a_max, spec.a_max, 1.0], spec.n_effectors)

    def plan(self, obs, history, states, gens):
        return np.stack([g.uniform(-1, 1, (self.H, self.spec.action_dim)) * self.scale for g in gens])


class ModelPolicy(Policy):
    """Flow-matching chunk sampler; the model's own noise comes from each episode's generator."""

    def __init__(self, model, instruction: int, steps: int = 10):
        from . import flow
        self._flow = flow
        self.model, self.instruction, self.steps = model, instruction, steps
        self.H, self.K = model.config.H, model.config.K
        self.name = model.config.variant

    def _context(self, obs, history):
        from .tensor import no_grad
        with no_grad():
            instr = np.full(len(obs), self.instruction, dtype=np.int64)
            return self.model.context(obs, instr, history)

    def _integrate(self, C, eps):
        return self.model.denormalize(self._flow.sample_chunk(self.model, C, self.steps, eps=eps))

    def plan(self, obs, history, states, gens):
        C = self._context(obs, history)
        eps = np.stack([g.standard_normal((self.H, self.model.config.d_a)) for g in gens])
        return self._integrate(C, eps)

    def sample(self, obs, history, states, gens, n_draws):
        from .tensor import Tensor
        C = self._context(obs, history)
        B = len(obs)
        Crep = Tensor(np.repeat(C.data, n_draws, axis=0))
        eps = np.concatenate([g.standard_normal((n_draws, self.H, self.model.config.d_a)) for g in gens])
        return self._integrate(Crep, eps).reshape(B, n_draws, self.H, -1)


# ---------------------------------------------------------------- intent estimation

@dataclass
class IntentEstimate:
    probs: np.ndarray
    ties: int


def classify_chunk(chunk, state: E.WorldState, spec: E.TaskSpec) -> tuple[int, bool]:
    """Nearest scripted continuation over every candidate intent; ties go to the lowest z."""
    chunk = np.asarray(chunk, dtype=np.float64)
    d = np.array([np.linalg.norm(chunk - E.expert_chunk(E.twin_state(state, spec, z), spec, len(chunk)))
                  for z in range(spec.num_intents)])
    best = int(np.argmin(d))
    return best, int((d == d[best]).sum()) > 1


def estimate_intent_distribution(chunks, state: E.WorldState, spec: E.TaskSpec,
                                 classifier=classify_chunk) -> IntentEstimate:
    """Empirical intent frequencies of ``chunks`` [n_draws, H, d_a] drawn at one decision step."""
    chunks = np.asarray(chunks)
    if len(chunks) < 1:
        raise MetricError("n_draws must be at least 1")
    counts = np.zeros(spec.num_intents)
    ties = 0
    for c in chunks:
        z, tie = classifier(c, state, spec)
        counts[z] += 1
        ties += int(tie)
    return IntentEstimate(counts / counts.sum(), ties)


# ---------------------------------------------------------------- rollouts

@dataclass(frozen=True)
class IccConfig:
    r: int = 4
    windows_only: bool = True

    def check(self, H: int) -> None:
        if not 1 <= self.r < H:
            raise MetricError(f"replan interval r={self.r} must satisfy 1 <= r < H={H}")


@dataclass
class Rollout:
    z: int
    observations: np.ndarray
    chunks: dict                 # decision step -> chunk (raw units)
    success: bool
    windows: list
    intent_probs: dict = field(default_factory=dict)


def rollout(policy: Policy, spec: E.TaskSpec, episodes: int, seed=0, r: int = 4,
            n_draws: int = 0, first_episode: int = 0) -> list[Rollout]:
    """Closed-loop episodes, all advanced in lockstep so the policy sees one batch.

    Episode i starts from intent i mod M with randomness drawn from the run
    seed and i alone, so results do not depend on how episodes are grouped.
    With ``n_draws`` > 0, every decision step that the observations so far
    place inside an ambiguity window also gets an intent-distribution probe.
    """
    if episodes < 1:
        raise MetricError("episodes must be at least 1")
    IccConfig(r).check(policy.H)
    root = as_rng(seed)
    ids = list(range(first_episode, first_episode + episodes))
    zs = [i % spec.num_intents for i in ids]
    states = [E.initial_state(spec, z, root.child("episode", i, "init")) for i, z in zip(ids, zs)]
    gens = [root.child("episode", i, "policy").generator() for i in ids]
    T = spec.episode_len
    obs = np.zeros((episodes, T, spec.obs_dim))
    chunks = [dict() for _ in ids]
    probes = [dict() for _ in ids]
    current = None
    for t in range(T):
        for b, s in enumerate(states):
            obs[b, t] = E.observe(s, spec)
        if t % r == 0:
            hist = np.stack([history_window(obs[b, :t + 1], t, policy.K) for b in range(episodes)])
            current = np.asarray(policy.plan(obs[:, t], hist, states, gens), dtype=np.float64)
            for b in range(episodes):
                chunks[b][t] = current[b]
            if n_draws > 0:
                live = [b for b in range(episodes) if E.in_window_mask(obs[b, :t + 1], spec)[t]]
                if live:
                    draws = policy.sample(obs[live, t], hist[live], [states[b] for b in live],
                                          [gens[b] for b in live], n_draws)
                    for j, b in enumerate(live):
                        probes[b][t] = estimate_intent_distribution(draws[j], states[b], spec)
        j = t % r
        for b in range(episodes):
            states[b] = E.step(states[b], current[b, j], spec)
    out = []
    for b in range(episodes):
        windows = E.mask_to_windows(E.in_window_mask(obs[b], spec))
        out.append(Rollout(zs[b], obs[b], chunks[b], E.success(states[b], spec), windows, probes[b]))
    return out


def _in_windows(t: int, windows) -> bool:
    return any(a <= t <= b for a, b in windows)


def icc_values(rollouts: Sequence[Rollout], r: int, windows_only: bool = True) -> np.ndarray:
    """ICC-L2 of every consecutive chunk pair; the pair counts when the earlier
    chunk's decision step lies inside an ambiguity window."""
    vals = []
    for ro in rollouts:
        for t in sorted(ro.chunks):
            if t + r not in ro.chunks:
                continue
            if windows_only and not _in_windows(t, ro.windows):
                continue
            vals.append(icc_l2(ro.chunks[t], ro.chunks[t + r], r))
    return np.asarray(vals)


def p_switch_values(rollouts: Sequence[Rollout], r: int) -> tuple[np.ndarray, int]:
    vals, ties = [], 0
    for ro in rollouts:
        for t, est in ro.intent_probs.items():
            ties += est.ties
            nxt = ro.intent_probs.get(t + r)
            if nxt is not None and _in_windows(t, ro.windows):
                vals.append(p_switch(est.probs, nxt.probs))
    return np.asarray(vals), ties


def success_rate(policy: Policy, spec: E.TaskSpec, episodes: int, seed=0, r: int = 4) -> float:
    return float(np.mean([ro.success for ro in rollout(policy, spec, episodes, seed, r)]))


# ---------------------------------------------------------------- reports

@dataclass
class MetricReport:
    """Flat metric table for one (task, variant, seed, r)."""

    task: str
    family: str
    variant: str
    seed: int
    r: int
    metrics: dict = field(default_factory=dict)     # name -> (value, count)
    meta: dict = field(default_factory=dict)

    def add(self, name: str, value: float, count: int) -> None:
        self.metrics[name] = (float(value), int(count))

    def value(self, name: str) -> float:
        return self.metrics[name][0]

    def rows(self) -> list[dict]:
        return [dict(task=self.task, family=self.family, variant=self.variant, metric=m,
                     value=_fmt(v), count=c, seed=self.seed, r=self.r)
                for m, (v, c) in self.metrics.items()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()

    def to_json(self) -> str:
        body = dict(task=self.task, family=self.family, variant=self.variant, seed=self.seed,
                    r=self.r, metrics={m: {"value": v, "count": c} for m, (v, c) in self.metrics.items()},
                    meta=self.meta)
        return json.dumps(body, indent=2, sort_keys=True, allow_nan=True)


def _fmt(v: float) -> str:
    return repr(float(v))


def summarize_rollouts(rollouts: Sequence[Rollout], spec: E.TaskSpec, variant: str, seed: int,
                       r: int, task: str | None = None) -> MetricReport:
    rep = MetricReport(task or spec.name, E.Family(spec.family).value, variant, seed, r)
    rep.add("success_rate", np.mean([ro.success for ro in rollouts]), len(rollouts))
    icc = icc_values(rollouts, r)
    if len(icc):
        rep.add("icc_l2_mean", icc.mean(), len(icc))
        rep.add("icc_l2_std", icc.std(), len(icc))
        rep.add("icc_l2_p90", percentile_nearest_rank(icc, 90), len(icc))
    else:
        for m in ("icc_l2_mean", "icc_l2_std", "icc_l2_p90"):
            rep.add(m, float("nan"), 0)
        rep.meta["icc_flag"] = "no ambiguity windows encountered"
    ps, ties = p_switch_values(rollouts, r)
    if any(ro.intent_probs for ro in rollouts):
        rep.add("p_switch_mean", ps.mean() if len(ps) else float("nan"), len(ps))
        rep.meta["intent_ties"] = ties
    rep.meta["icc_units"] = "raw action units"
    return rep


def read_report_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows and text.strip():
        header = text.strip().splitlines()[0].split(",")
    else:
        header = list(rows[0].keys()) if rows else []
    if tuple(header) != REPORT_COLUMNS:
        raise MetricError(f"report columns {header} != {list(REPORT_COLUMNS)}")
    return rows
