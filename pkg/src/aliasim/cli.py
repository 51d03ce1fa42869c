"""Command-line runner: gen-data, diagnose, train, eval, compare.

Every verb reads the same flat ``key=value`` run configuration. Values come
from the built-in defaults, then ``--config FILE``, then ``ALIASIM_SEED``
(seed only), then ``--set key=value`` flags. Unknown keys are rejected.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset as D
from . import env as E
from . import metrics as Mx
from . import trainer as Tr
from .flow import TrainingError
from .model import VARIANTS, build_variant

log = logging.getLogger("aliasim")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

# key -> (default, parser, help)
_INT, _FLOAT, _STR = int, float, str


def _bool(v: str) -> bool:
    t = str(v).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v):
    return None if str(v).strip().lower() in ("", "none") else int(v)


def _opt_float(v):
    return None if str(v).strip().lower() in ("", "none") else float(v)


KEYS = {
    # task
    "family": ("crossing_path", _STR, "task family: back_and_forth, crossing_path, bimanual, multi_goal"),
    "pads": (None, _opt_int, "crossing_path pad count (2 or 4)"),
    "n_goals": (None, _opt_int, "multi_goal object count (2 or 3)"),
    "episode_len": (None, _opt_int, "episode horizon override"),
    "goal_radius": (None, _opt_float, "arrival / grasp radius override"),
    "noise": (None, _opt_float, "expert action-noise std override"),
    "dwell": (None, _opt_int, "dwell-step override"),
    # data
    "episodes": (100, _INT, "demonstrations to generate"),
    "K": (16, _INT, "history window length"),
    "H": (8, _INT, "chunk horizon"),
    # model
    "variant": ("intent", _STR, "one of " + ", ".join(VARIANTS)),
    "d": (64, _INT, "model width"),
    "heads": (4, _INT, "attention heads"),
    "raw_k": (4, _INT, "frames kept by the raw-history baselines"),
    # training (lr 1e-3 for from-scratch desk-scale training; large pretrained runs use ~1e-5)
    "steps": (2000, _INT, "optimizer updates"),
    "batch_size": (64, _INT, "mini-batch size"),
    "lr": (1e-3, _FLOAT, "peak learning rate"),
    "weight_decay": (0.01, _FLOAT, "decoupled weight decay on weight matrices"),
    "schedule": ("cosine", _STR, "constant or cosine"),
    "clip": (1.0, _FLOAT, "global gradient-norm bound"),
    # evaluation
    "r": (4, _INT, "replan interval"),
    "eval_episodes": (100, _INT, "closed-loop evaluation episodes"),
    "sampler_steps": (10, _INT, "Euler steps per sampled chunk"),
    "n_draws": (0, _INT, "chunks drawn per in-window decision step for the mode-switch estimate"),
    "oracle": (False, _bool, "evaluate the scripted expert instead of a checkpoint"),
    "plots": (False, _bool, "also write PNG plots (needs matplotlib)"),
    "diag_k": (5, _INT, "neighbours per diagnostic query"),
    "diag_gap": (20, _INT, "minimum step gap for intra-episode retrieval"),
    # run
    "seed": (0, _INT, "run seed"),
    "out": ("runs", _STR, "output directory"),
}

_TASK_OVERRIDES = ("pads", "n_goals", "episode_len", "goal_radius", "noise", "dwell")


class CliConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def to_dict(self) -> dict:
        return dict(self.values)

    def task(self) -> E.TaskSpec:
        ov = {k: self.values[k] for k in _TASK_OVERRIDES if self.values[k] is not None}
        return E.make_task(self.values["family"], self.values["seed"], **ov)

    def train_config(self) -> Tr.TrainConfig:
        v = self.values
        return Tr.TrainConfig(steps=v["steps"], batch_size=v["batch_size"], lr=v["lr"],
                              weight_decay=v["weight_decay"], schedule=v["schedule"],
                              clip=v["clip"], seed=v["seed"], variant=v["variant"])

    def model_kw(self) -> dict:
        v = self.values
        return {"K": v["K"], "H": v["H"], "d": v["d"], "d_h": v["d"], "heads": v["heads"],
                "raw_k": v["raw_k"]}


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def resolve_config(file_values: dict | None = None, flags: dict | None = None,
                   environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    raw: dict = {}
    raw.update(file_values or {})
    if environ.get("ALIASIM_SEED") not in (None, ""):
        raw["seed"] = environ["ALIASIM_SEED"]
    raw.update(flags or {})
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise CliConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, (default, parse, _) in KEYS.items():
        if key not in raw:
            values[key] = default
            continue
        try:
            values[key] = parse(raw[key])
        except (TypeError, ValueError) as exc:
            raise CliConfigError(f"bad value for {key}: {raw[key]!r}") from exc
    if values["variant"] not in VARIANTS:
        raise CliConfigError(f"unknown variant {values['variant']!r}")
    if values["episodes"] < 1:
        raise CliConfigError("episodes must be at least 1")
    if values["eval_episodes"] < 1:
        raise CliConfigError("eval_episodes must be at least 1")
    if not 1 <= values["r"] < values["H"]:
        raise CliConfigError("r must satisfy 1 <= r < H")
    if values["n_draws"] < 0 or values["sampler_steps"] < 1:
        raise CliConfigError("n_draws must be >= 0 and sampler_steps >= 1")
    return RunConfig(values)


# ---------------------------------------------------------------- helpers

def _out_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _check_corpus_task(corpus, spec: E.TaskSpec) -> None:
    names = {ep.task for ep in corpus}
    if names != {spec.name}:
        raise CliConfigError(f"corpus holds task(s) {sorted(names)} but the config resolves to {spec.name!r}")


# ---------------------------------------------------------------- verbs

def cmd_gen_data(cfg: RunConfig) -> int:
    spec = cfg.task()
    corpus = D.generate_corpus(spec, cfg.episodes, seed=cfg.seed)
    out = _out_dir(cfg)
    D.save_corpus(corpus, out / "corpus.bin")
    D.write_manifest(out / "manifest.json", ["corpus.bin"], spec, cfg.seed, cfg.episodes, cfg.to_dict())
    counts = D.intent_counts(corpus, spec.num_intents)
    print(f"wrote {len(corpus)} episodes of {spec.name} to {out / 'corpus.bin'}")
    for z, c in enumerate(counts):
        print(f"  intent {z}: {c}")
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig, corpus_path: str) -> int:
    spec = cfg.task()
    corpus = D.load_corpus(corpus_path)
    _check_corpus_task(corpus, spec)
    dcfg = Mx.DiagnosticConfig.for_family(spec.family, cfg.diag_k, cfg.diag_gap)
    embedder = build_variant("intent", spec, seed=cfg.seed, K=cfg.K).history.embed_frames
    res = Mx.alias_diagnostic(corpus, spec, embedder, dcfg)
    rep = Mx.MetricReport(spec.name, E.Family(spec.family).value, "expert-corpus", cfg.seed, 0)
    rep.add("diag_ratio", res.ratio, res.queries)
    rep.add("diag_median_same", res.median_same, res.queries)
    rep.add("diag_median_diff", res.median_diff, res.queries)
    rep.meta.update(protocol=res.protocol, k=dcfg.k, skipped=res.skipped, config=cfg.to_dict())
    out = _out_dir(cfg)
    (out / "diagnostic.csv").write_text(rep.to_csv())
    (out / "diagnostic.json").write_text(rep.to_json() + "\n")
    print(f"{spec.name}: different-intent ratio {res.ratio:.3f} over {res.queries} queries "
          f"({res.protocol}, k={dcfg.k}, skipped {res.skipped})")
    return EXIT_OK


def cmd_train(cfg: RunConfig, corpus_path: str) -> int:
    spec = cfg.task()
    corpus = D.load_corpus(corpus_path)
    _check_corpus_task(corpus, spec)
    tcfg = cfg.train_config()
    model = build_variant(tcfg.variant, spec, seed=cfg.seed, **cfg.model_kw())
    samples = D.chunkify(corpus, cfg.K, cfg.H, spec=spec)
    res = Tr.train(model, samples, tcfg,
                   on_log=lambda p: log.info("step %d loss %.5f lr %.3g", p.step, p.loss, p.lr))
    out = _out_dir(cfg)
    ckpt = Tr.Checkpoint.from_model(res.model, cfg.seed, res.steps_done, res.rng, spec, tcfg,
                                    extra={"config": cfg.to_dict(), "aborted": res.aborted})
    Tr.save_checkpoint(ckpt, out / "checkpoint.ckpt")
    Tr.write_loss_csv(out / "loss.csv", res.losses)
    _write_json(out / "train_config.json", {"config": cfg.to_dict(), "steps_done": res.steps_done,
                                            "aborted": res.aborted})
    if cfg.plots:
        _plot_loss(out / "loss.png", res.losses)
    if res.aborted:
        print(f"training diverged at step {res.steps_done}: {res.aborted}; "
              f"last good weights saved", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {tcfg.variant} for {res.steps_done} steps; final logged loss "
          f"{res.losses[-1].loss:.5f}" if res.losses else f"wrote initial weights ({tcfg.variant})")
    return EXIT_OK


def _eval_slice(args) -> list[Mx.Rollout]:
    ckpt_path, cfg_values, first, count = args
    cfg = RunConfig(cfg_values)
    spec = cfg.task()
    policy = _make_policy(cfg, spec, ckpt_path)
    return Mx.rollout(policy, spec, count, seed=cfg.seed, r=cfg.r, n_draws=cfg.n_draws,
                      first_episode=first)


def _make_policy(cfg: RunConfig, spec: E.TaskSpec, ckpt_path) -> Mx.Policy:
    if cfg.oracle:
        return Mx.ExpertPolicy(spec, cfg.H, cfg.K)
    ckpt = Tr.load_checkpoint(ckpt_path)
    if ckpt.task != spec.to_dict():
        raise CliConfigError(f"checkpoint was trained on {ckpt.task and ckpt.task.get('name')!r}, "
                             f"which differs from the configured task {spec.name!r}")
    return Mx.ModelPolicy(ckpt.build(), spec.instruction, cfg.sampler_steps)


def cmd_eval(cfg: RunConfig, ckpt_path: str | None, jobs: int = 1) -> int:
    spec = cfg.task()
    if not cfg.oracle and not ckpt_path:
        raise CliConfigError("eval needs a checkpoint path unless oracle=true")
    policy = _make_policy(cfg, spec, ckpt_path)     # validates before forking
    variant = "expert" if cfg.oracle else policy.name
    n = cfg.eval_episodes
    if jobs <= 1:
        rollouts = Mx.rollout(policy, spec, n, seed=cfg.seed, r=cfg.r, n_draws=cfg.n_draws)
    else:
        bounds = np.linspace(0, n, min(jobs, n) + 1).astype(int)
        work = [(ckpt_path, cfg.to_dict(), int(a), int(b - a)) for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(max_workers=len(work)) as pool:
            rollouts = [ro for part in pool.map(_eval_slice, work) for ro in part]
    rep = Mx.summarize_rollouts(rollouts, spec, variant, cfg.seed, cfg.r)
    rep.meta["config"] = cfg.to_dict()
    out = _out_dir(cfg)
    (out / "report.csv").write_text(rep.to_csv())
    (out / "report.json").write_text(rep.to_json() + "\n")
    if cfg.plots:
        _plot_icc(out / "icc.png", Mx.icc_values(rollouts, cfg.r), variant)
    for m, (v, c) in rep.metrics.items():
        print(f"{spec.name:16s} {variant:12s} {m:16s} {v:.5f}  (n={c})")
    return EXIT_OK


def load_reports(paths) -> list[dict]:
    rows = []
    for p in paths:
        try:
            rows.extend(Mx.read_report_csv(Path(p).read_text()))
        except Mx.MetricError as exc:
            raise CliConfigError(f"{p}: {exc}") from exc
    return rows


def compare_table(rows: list[dict], metric: str = "success_rate", labels=None) -> tuple[list[str], list[list]]:
    """One line per report label with per-family averages and their overall mean.

    ``labels`` are the report identities (variant by default); the first is the
    reference for the delta column.
    """
    fams = [f.value for f in E.FAMILY_ORDER]
    by: dict[str, dict[str, list[float]]] = {}
    order: list[str] = []
    for row in rows:
        if row["metric"] != metric:
            continue
        label = row["_label"] if "_label" in row else row["variant"]
        if label not in by:
            by[label] = {f: [] for f in fams}
            order.append(label)
        if row["family"] not in by[label]:
            raise CliConfigError(f"unknown family {row['family']!r} in report")
        by[label][row["family"]].append(float(row["value"]))
    header = ["method"] + [E.FAMILY_TITLES[E.Family(f)] for f in fams] + ["Avg.", "delta Avg."]
    table, ref = [], None
    for label in order:
        cells = [float(np.mean(v)) if v else float("nan") for v in by[label].values()]
        present = [c for c in cells if not np.isnan(c)]
        avg = float(np.mean(present)) if present else float("nan")
        ref = avg if ref is None else ref
        table.append([label] + cells + [avg, avg - ref])
    return header, table


def format_table(header, table) -> str:
    cells = [header] + [[r[0]] + [("-" if np.isnan(v) else f"{v:.4f}") for v in r[1:]] for r in table]
    widths = [max(len(str(row[i])) for row in cells) for i in range(len(header))]
    return "\n".join("  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths))) for row in cells)


def cmd_compare(cfg: RunConfig, paths, metric: str) -> int:
    if len(paths) < 2:
        raise CliConfigError("compare needs at least two reports")
    per_file = [load_reports([p]) for p in paths]
    names = [rows[0]["variant"] if rows else "" for rows in per_file]
    rows = []
    for i, part in enumerate(per_file):
        for row in part:
            # the same variant reported twice gets a positional suffix
            row["_label"] = f"{row['variant']}#{i}" if names.count(row["variant"]) > 1 else row["variant"]
            rows.append(row)
    header, table = compare_table(rows, metric)
    out = _out_dir(cfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [h for h in header[1:]])
    for r in table:
        w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    (out / "compare.csv").write_text(buf.getvalue())
    text = format_table(header, table)
    (out / "compare.txt").write_text(f"metric: {metric}\n{text}\n")
    print(f"metric: {metric}")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------- plots

def _pyplot():
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise CliConfigError("plots=true needs matplotlib (pip install 'artifact[plots]')") from exc
    return plt


def _plot_loss(path, losses) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot([p.step for p in losses], [p.loss for p in losses])
    ax.set_xlabel("step")
    ax.set_ylabel("flow loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_icc(path, values, label) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    if len(values):
        ax.hist(values, bins=30)
    ax.set_xlabel("ICC-L2 in ambiguity windows")
    ax.set_title(label)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k + '=' + str(KEYS[k][0]):<26} {KEYS[k][2]}" for k in KEYS)
    p = argparse.ArgumentParser(prog="aliasim", formatter_class=argparse.RawDescriptionHelpFormatter,
                                description="Aliased point-mass tasks: data, diagnosis, training, evaluation.",
                                epilog="config keys (defaults):\n" + keys)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen-data", help="generate an expert corpus")
    d = sub.add_parser("diagnose", help="aliasing diagnostic on a corpus")
    d.add_argument("corpus")
    t = sub.add_parser("train", help="train a policy variant")
    t.add_argument("corpus")
    e = sub.add_parser("eval", help="closed-loop evaluation")
    e.add_argument("checkpoint", nargs="?")
    e.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")
    c = sub.add_parser("compare", help="aggregate evaluation reports")
    c.add_argument("reports", nargs="+")
    c.add_argument("--metric", default="success_rate")
    # every config key is also a flag, accepted before or after the verb
    for sp in (p, *sub.choices.values()):
        for key in KEYS:
            names = [f"--{key}"] + ([f"--{key.replace('_', '-')}"] if "_" in key else [])
            sp.add_argument(*names, dest=f"flag_{key}", default=argparse.SUPPRESS, metavar="V",
                            help=argparse.SUPPRESS if sp is not p else None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = {}
        if args.config:
            file_values = parse_config_text(Path(args.config).read_text(encoding="utf-8"))
        flags = {}
        for item in args.set:
            if "=" not in item:
                raise CliConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            flags[k.strip()] = v.strip()
        for key in KEYS:
            if hasattr(args, f"flag_{key}"):
                flags[key] = getattr(args, f"flag_{key}")
        cfg = resolve_config(file_values, flags)
        if args.verb == "gen-data":
            return cmd_gen_data(cfg)
        if args.verb == "diagnose":
            return cmd_diagnose(cfg, args.corpus)
        if args.verb == "train":
            return cmd_train(cfg, args.corpus)
        if args.verb == "eval":
            return cmd_eval(cfg, args.checkpoint, args.jobs)
        return cmd_compare(cfg, args.reports, args.metric)
    except (TrainingError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
