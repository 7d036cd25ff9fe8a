"""End-to-end attack experiments: corpus -> victim gradients -> reconstruction -> ranking.

An experiment is described by a JSON-serializable :class:`ExperimentConfig`.
:func:`run_experiment` enrolls the first ``enroll_per_speaker`` utterances of
every speaker (they also train the speaker encoder), attacks the remaining
ones and ranks each reconstruction against the enrolled population.

Output directory layout::

    report.csv        "# config=<json>" line, then one row per attacked utterance
    aggregate.json    top1/top5/mrr/mae aggregates, recomputable from the rows
    traces/<id>.csv   per-attack objective/step/MAE trace

Files are written with sorted keys and ``repr`` floats so that identical
configurations produce byte-identical outputs.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attack import (
    AttackProblem,
    BatchAttackProblem,
    Distance,
    MultiStepProblem,
    ScheduleConfig,
    hfgm_batch,
    hfgm_multistep,
    hfgm_reconstruct,
    initial_guess,
    multistep_delta,
)
from .corpus import Corpus, CorpusConfig, Utterance, aligned_mae, generate_corpus, load_corpus
from .ctc import min_frames
from .defense import DpSgdConfig, dp_transform
from .errors import ConfigError, GradlabError
from .model import DropoutSpec, ModelConfig, ParamVector, init_model, loss_and_grad, view_of
from .speaker import Encoder, EncoderConfig, embed, enroll, metrics, rank_speakers, train_embedder

MODES = ("single", "batch", "multistep", "wrong_length", "wrong_transcript")
DEFENSES = ("none", "dpsgd", "dropout")
REPORT_COLUMNS = [
    "utterance_id", "speaker_id", "mode", "defense", "final_D", "mae", "init_mae",
    "rank", "reciprocal_rank", "orig_rank", "attack_T", "iterations", "error",
]


@dataclass
class ModelSpec:
    """Model architecture; input width and alphabet come from the corpus."""
    hidden: list = field(default_factory=lambda: [32])
    activation: str = "tanh"
    recurrent_width: Optional[int] = None
    match_layers: Optional[list] = None
    seed: int = 0

    def resolve(self, corpus: CorpusConfig) -> ModelConfig:
        return ModelConfig(corpus.dim, tuple(self.hidden) + (corpus.alphabet_size + 1,), corpus.alphabet_size,
                           self.activation, self.recurrent_width,
                           None if self.match_layers is None else tuple(self.match_layers))


@dataclass
class DefenseSpec:
    kind: str = "none"
    clip_norm: float = 300.0  # desk-scale C, ~40x the typical full-gradient norm
    noise_scale: float = 0.0
    rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSES:
            raise ConfigError(f"unknown defense {self.kind!r}; expected one of {DEFENSES}")

    def label(self) -> str:
        if self.kind == "dpsgd":
            return f"dpsgd(C={self.clip_norm!r},sigma={self.noise_scale!r})"
        if self.kind == "dropout":
            return f"dropout({self.rate!r})"
        return "none"


@dataclass
class ModeSpec:
    kind: str = "single"
    batch_size: int = 2
    steps: int = 2
    local_lr: float = 1e-5
    length_offset: int = 0
    length_factor: Optional[float] = None

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"unknown mode {self.kind!r}; expected one of {MODES}")
        if self.kind == "batch" and self.batch_size < 2:
            raise ConfigError("batch mode needs batch_size >= 2")
        if self.kind == "multistep" and self.steps < 2:
            raise ConfigError("multistep mode needs steps >= 2")

    def label(self) -> str:
        if self.kind == "batch":
            return f"batch({self.batch_size})"
        if self.kind == "multistep":
            return f"multistep({self.steps},{self.local_lr!r})"
        if self.kind == "wrong_length":
            if self.length_factor is not None:
                return f"wrong_length(x{self.length_factor!r})"
            return f"wrong_length({self.length_offset:+d})"
        return self.kind


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    embedder: EncoderConfig = field(default_factory=EncoderConfig)
    distance: Distance = field(default_factory=Distance)
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(samplings=8, halving_window=1000))
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    mode: ModeSpec = field(default_factory=ModeSpec)
    attack_seed: int = 0
    enroll_per_speaker: int = 5
    max_targets: Optional[int] = None
    corpus_dir: Optional[str] = None
    embedder_path: Optional[str] = None
    output_dir: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embedder"] = self.embedder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
        d = dict(d)
        parts = {
            "corpus": lambda v: CorpusConfig.from_dict(v),
            "model": lambda v: _build(ModelSpec, v),
            "embedder": lambda v: EncoderConfig.from_dict(v),
            "distance": lambda v: _build(Distance, v),
            "schedule": lambda v: ScheduleConfig.from_dict(v),
            "defense": lambda v: _build(DefenseSpec, v),
            "mode": lambda v: _build(ModeSpec, v),
        }
        for key, make in parts.items():
            if key in d:
                d[key] = make(d[key])
        return cls(**d)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Copy with dotted-key overrides applied, e.g. ``{"defense.noise_scale": 1e-4}``."""
        d = copy.deepcopy(self.to_dict())
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"cannot override {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config field {key!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)


def _build(cls, d: dict):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ReportRow:
    utterance_id: str
    speaker_id: int
    mode: str
    defense: str
    final_D: float = float("nan")
    mae: float = float("nan")
    init_mae: float = float("nan")
    rank: Optional[int] = None
    reciprocal_rank: float = float("nan")
    orig_rank: Optional[int] = None
    attack_T: Optional[int] = None
    iterations: int = 0
    error: str = ""


@dataclass
class ExperimentReport:
    config: dict
    rows: list[ReportRow]
    aggregate: dict
    traces: dict = field(default_factory=dict)


def aggregate_rows(rows: Sequence[ReportRow]) -> dict:
    """Aggregates over the rows that finished without error."""
    ok = [r for r in rows if not r.error]
    out = {"n_rows": len(rows), "n_errors": len(rows) - len(ok)}
    if not ok:
        return out
    top1, top5, mrr = metrics([r.rank for r in ok])
    orig = [r.orig_rank for r in ok if r.orig_rank is not None]
    maes = np.array([r.mae for r in ok])
    out.update(
        top1=top1, top5=top5, mrr=mrr,
        mean_mae=float(maes.mean()),
        median_mae=float(np.median(maes)),
        mean_init_mae=float(np.mean([r.init_mae for r in ok])),
        median_final_D=float(np.median([r.final_D for r in ok])),
        orig_top1=metrics(orig)[0] if orig else None,
    )
    return out


# -- corpus / embedder / victim ----------------------------------------------------

@dataclass
class Setup:
    corpus: Corpus
    encoder: Encoder
    enrolled: dict
    targets: list[Utterance]


def split_corpus(corpus: Corpus, enroll_per_speaker: int):
    enrolled, targets = {}, []
    for sid, utts in sorted(corpus.by_speaker().items()):
        if len(utts) <= enroll_per_speaker:
            raise ConfigError(f"speaker {sid} has {len(utts)} utterances; need more than {enroll_per_speaker}")
        enrolled[sid] = [u.features for u in utts[:enroll_per_speaker]]
        targets += utts[enroll_per_speaker:]
    targets.sort(key=lambda u: u.utt_id)
    return enrolled, targets


def prepare(cfg: ExperimentConfig, corpus: Optional[Corpus] = None, encoder: Optional[Encoder] = None) -> Setup:
    """Load or build the corpus and the speaker encoder shared by every attack."""
    if corpus is None:
        corpus = load_corpus(cfg.corpus_dir) if cfg.corpus_dir else generate_corpus(cfg.corpus)
    enrolled, targets = split_corpus(corpus, cfg.enroll_per_speaker)
    if encoder is None:
        if cfg.embedder_path:
            from .checkpoint import load_checkpoint
            encoder = load_checkpoint(cfg.embedder_path)
            if not isinstance(encoder, Encoder):
                raise ConfigError(f"{cfg.embedder_path} is not a speaker-encoder checkpoint")
        else:
            encoder = train_embedder(enrolled, cfg.embedder)
    if cfg.max_targets is not None:
        targets = targets[: cfg.max_targets]
    return Setup(corpus, encoder, enrolled, targets)


def victim_view(params: ParamVector, u: Utterance, defense: DefenseSpec, sample_index: int) -> np.ndarray:
    """The matched-layer gradient the attacker observes for one utterance.

    Dropout acts inside the victim's forward pass; DP-SGD clips and noises the
    full gradient before it is sliced.
    """
    dropout = None
    if defense.kind == "dropout":
        seed = int(np.random.SeedSequence([defense.seed, sample_index]).generate_state(1)[0])
        dropout = DropoutSpec(defense.rate, seed)
    _, g = loss_and_grad(params, u.features, u.transcript, dropout)
    full = g.full
    if defense.kind == "dpsgd":
        full = dp_transform(full, DpSgdConfig(defense.clip_norm, defense.noise_scale, defense.seed), sample_index)
    return view_of(full, params.config)


def _init_seed(attack_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([attack_seed, index]).generate_state(1)[0])


def attack_length(mode: ModeSpec, T: int) -> int:
    if mode.kind != "wrong_length":
        return T
    if mode.length_factor is not None:
        return max(1, int(round(T * mode.length_factor)))
    return T + mode.length_offset


def random_transcript(y: Sequence[int], T: int, alphabet: int, rng: np.random.Generator) -> list[int]:
    """A transcript of the same length as ``y``, different from it and feasible in ``T`` frames."""
    if alphabet < 2 and len(y) > 0:
        raise ConfigError("wrong_transcript needs an alphabet of at least two symbols")
    while True:
        cand = rng.integers(0, alphabet, size=len(y)).tolist()
        if cand != list(y) and min_frames(cand) <= T:
            return cand


# -- attacks -----------------------------------------------------------------------

def _score(row: ReportRow, x: np.ndarray, truth: np.ndarray, x0: np.ndarray, setup_profiles, enc: Encoder,
           trace) -> None:
    row.final_D = trace.final_objective
    row.iterations = trace.iterations
    row.mae = aligned_mae(x, truth)
    row.init_mae = aligned_mae(x0, truth)
    row.rank = rank_speakers(embed(enc, x), setup_profiles, row.speaker_id).rank
    row.reciprocal_rank = 1.0 / row.rank


def _attack_one(args):
    cfg, params, enc, profiles, u, index = args
    row = ReportRow(u.utt_id, u.speaker_id, cfg.mode.label(), cfg.defense.label())
    trace = None
    try:
        row.orig_rank = rank_speakers(embed(enc, u.features), profiles, u.speaker_id).rank
        seed = _init_seed(cfg.attack_seed, index)
        T = attack_length(cfg.mode, u.T)
        row.attack_T = T
        if cfg.mode.kind == "multistep":
            if cfg.defense.kind != "none":
                raise ConfigError("multistep mode does not combine with a defense")
            target = multistep_delta(params, u.features, u.transcript, cfg.mode.steps, cfg.mode.local_lr)
            prob = MultiStepProblem(params, target, u.transcript, T, cfg.mode.steps, cfg.mode.local_lr,
                                    cfg.distance, cfg.schedule, seed, u.features)
            x, trace = hfgm_multistep(prob)
        else:
            target = victim_view(params, u, cfg.defense, index)
            y = list(u.transcript)
            if cfg.mode.kind == "wrong_transcript":
                y = random_transcript(y, T, params.config.alphabet_size, np.random.default_rng(seed))
            truth = u.features if T == u.T else None
            prob = AttackProblem(params, target, y, T, cfg.distance, cfg.schedule, seed, truth)
            x, trace = hfgm_reconstruct(prob)
        x0 = initial_guess(T, params.config.input_dim, np.random.default_rng(seed))
        _score(row, x, u.features, x0, profiles, enc, trace)
    except GradlabError as exc:
        row.error = f"{type(exc).__name__}: {exc}"
        trace = None
    return row, trace


def _attack_batch(args):
    cfg, params, enc, profiles, group, index = args
    rows = [ReportRow(u.utt_id, u.speaker_id, cfg.mode.label(), cfg.defense.label()) for u in group]
    try:
        views = [victim_view(params, u, cfg.defense, index + j) for j, u in enumerate(group)]
        target = np.mean(views, axis=0)
        seed = _init_seed(cfg.attack_seed, index)
        prob = BatchAttackProblem(params, target, [list(u.transcript) for u in group], [u.T for u in group],
                                  cfg.distance, cfg.schedule, seed, [u.features for u in group])
        xs, trace = hfgm_batch(prob)
        rng = np.random.default_rng(seed)
        x0s = [initial_guess(u.T, params.config.input_dim, rng) for u in group]
        for row, u, x, x0 in zip(rows, group, xs, x0s):
            row.orig_rank = rank_speakers(embed(enc, u.features), profiles, u.speaker_id).rank
            row.attack_T = u.T
            _score(row, x, u.features, x0, profiles, enc, trace)
    except GradlabError as exc:
        for row in rows:
            row.error = f"{type(exc).__name__}: {exc}"
        trace = None
    return rows, trace


def worker_count(n_tasks: int) -> int:
    env = os.environ.get("GRADLAB_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_tasks))


def _map(fn, tasks):
    workers = worker_count(len(tasks))
    if workers == 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def run_experiment(cfg: ExperimentConfig, setup: Optional[Setup] = None) -> ExperimentReport:
    """Run every attack of ``cfg``; writes output files when ``cfg.output_dir`` is set.

    Errors of individual attacks are recorded in their row and the run continues.
    """
    if setup is None:
        setup = prepare(cfg)
    model_cfg = cfg.model.resolve(setup.corpus.config)
    params = init_model(model_cfg, cfg.model.seed)
    profiles = enroll(setup.encoder, setup.enrolled)

    rows: list[ReportRow] = []
    traces = {}
    if cfg.mode.kind == "batch":
        # utterances sorted by length, then grouped into consecutive batches
        ordered = sorted(setup.targets, key=lambda u: (u.T, u.utt_id))
        B = cfg.mode.batch_size
        groups = [ordered[i:i + B] for i in range(0, len(ordered) - B + 1, B)]
        tasks = [(cfg, params, setup.encoder, profiles, g, i * B) for i, g in enumerate(groups)]
        for group_rows, trace in _map(_attack_batch, tasks):
            rows += group_rows
            if trace is not None:
                traces["+".join(r.utterance_id for r in group_rows)] = trace
        rows.sort(key=lambda r: r.utterance_id)
    else:
        tasks = [(cfg, params, setup.encoder, profiles, u, i) for i, u in enumerate(setup.targets)]
        for row, trace in _map(_attack_one, tasks):
            rows.append(row)
            if trace is not None:
                traces[row.utterance_id] = trace

    resolved = cfg.to_dict()
    resolved.pop("output_dir")  # where the files go does not change them
    report = ExperimentReport(resolved, rows, aggregate_rows(rows), traces)
    if cfg.output_dir:
        write_report(report, Path(cfg.output_dir))
    return report


# -- files -------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_line(config: dict) -> str:
    return "# config=" + json.dumps(config, sort_keys=True, separators=(",", ":"))


def report_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    buf.write(config_line(report.config) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report.rows:
        w.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def write_report(report: ExperimentReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(report))
    (out / "aggregate.json").write_text(json.dumps(report.aggregate, indent=2, sort_keys=True) + "\n")
    tdir = out / "traces"
    tdir.mkdir(exist_ok=True)
    for name, trace in sorted(report.traces.items()):
        trace.write_csv(tdir / f"{name}.csv")


def read_report(path: Path) -> tuple[dict, list[ReportRow]]:
    """Parse a ``report.csv`` back into its config and rows."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# config="):
        raise ConfigError(f"{path} has no config header")
    config = json.loads(lines[0][len("# config="):])
    rows = []
    for rec in csv.DictReader(lines[1:]):
        rows.append(ReportRow(
            rec["utterance_id"], int(rec["speaker_id"]), rec["mode"], rec["defense"],
            float(rec["final_D"]), float(rec["mae"]), float(rec["init_mae"]),
            int(rec["rank"]) if rec["rank"] else None,
            float(rec["reciprocal_rank"]),
            int(rec["orig_rank"]) if rec["orig_rank"] else None,
            int(rec["attack_T"]) if rec["attack_T"] else None,
            int(rec["iterations"]), rec["error"],
        ))
    return config, rows


# -- sweeps --------------------------------------------------------------------------

SUMMARY_COLUMNS = ["point", "overrides", "n_rows", "n_errors", "top1", "top5", "mrr",
                   "mean_mae", "median_mae", "mean_init_mae", "median_final_D"]


def sweep(base: ExperimentConfig, grid: Sequence[dict], setup: Optional[Setup] = None) -> list[ExperimentReport]:
    """One report per grid point, all sharing the base corpus and speaker encoder.

    Each grid point is a dict of dotted-key overrides; corpus, embedder and
    enrollment fields cannot be overridden since they are shared.
    """
    if not grid:
        raise ConfigError("sweep grid is empty")
    shared = ("corpus", "embedder", "corpus_dir", "embedder_path", "enroll_per_speaker")
    for point in grid:
        for key in point:
            if key.split(".")[0] in shared:
                raise ConfigError(f"{key!r} is shared across the sweep and cannot vary")
    if setup is None:
        setup = prepare(base)
    reports = []
    for i, point in enumerate(grid):
        cfg = base.with_overrides(dict(point, output_dir=None))
        if base.output_dir:
            cfg.output_dir = str(Path(base.output_dir) / f"point_{i:03d}")
        reports.append(run_experiment(cfg, setup))
    if base.output_dir:
        write_summary(Path(base.output_dir) / "summary.csv", grid, reports)
    return reports


def summary_csv(grid: Sequence[dict], reports: Sequence[ExperimentReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for i, (point, rep) in enumerate(zip(grid, reports)):
        agg = rep.aggregate
        w.writerow([i, json.dumps(point, sort_keys=True)] + [_fmt(agg.get(c)) for c in SUMMARY_COLUMNS[2:]])
    return buf.getvalue()


def write_summary(path: Path, grid, reports) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(summary_csv(grid, reports))
