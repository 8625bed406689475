"""Training protocol, multi-seed sweeps and evaluation of prediction dumps.

Each task contributes one softmax cross-entropy term and the terms are summed
without weights.  Adam takes one step per batch; after every epoch the full
validation split is scored and the parameters of the lowest-loss epoch
(earliest on ties) are kept for the test dump.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .config import config_hash, format_kv, split_list
from .datasets import (
    BatchConfig,
    DatasetManifest,
    SplitArrays,
    fit_split_standardizer,
    iterate_batches,
    load_manifest,
    split_arrays,
)
from .dsp import StftConfig
from .errors import ConfigError, CrosstalkError, DivergenceError, FormatError
from .generators import MOTOR_COMPONENTS, read_signal
from .metrics import ConfusionMatrix, RunReport, aggregate_compound, macro_f1
from .models import CROSS_TALK, KINDS, BackboneSpec, MultiTaskModel, build_model, default_backbone
from .nn import AdamState, adam_step, save_checkpoint, softmax_cross_entropy
from .seeding import derive_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    manifest: str = ""
    kind: str = "rndr"
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    seeds: tuple[int, ...] = (0, 1, 2)
    tasks: tuple[str, ...] | None = None  # None: every task in the manifest
    sensors: str = "A"
    n_fft: int = 256
    hop: int = 128
    window: str = "hann"
    sample_rate: float | None = None  # None: taken from the first signal
    channels: tuple[int, ...] = (16, 32, 64, 64)
    pools: tuple[int, ...] | None = None
    kernel: int = 3
    fdy: bool = False
    ctl_sites: tuple[int, ...] | None = None  # None: after every block but the first
    attention_depth: int = 1
    dtype: str = "float32"
    motor_headline: str = "compound"  # or "component_mean"
    backbone: BackboneSpec | None = None  # explicit override of the fields above

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown architecture {self.kind!r}")
        if self.motor_headline not in ("compound", "component_mean"):
            raise ConfigError(f"unknown motor headline {self.motor_headline!r}")

    def to_kv(self) -> dict[str, str]:
        def seq(v):
            return "" if v is None else ",".join(str(x) for x in v)

        return {
            "manifest": str(self.manifest),
            "kind": self.kind,
            "epochs": str(self.epochs),
            "lr": repr(float(self.lr)),
            "batch_size": str(self.batch_size),
            "seeds": seq(self.seeds),
            "tasks": seq(self.tasks),
            "sensors": self.sensors,
            "n_fft": str(self.n_fft),
            "hop": str(self.hop),
            "window": self.window,
            "sample_rate": "" if self.sample_rate is None else repr(float(self.sample_rate)),
            "channels": seq(self.channels),
            "pools": seq(self.pools),
            "kernel": str(self.kernel),
            "fdy": str(int(self.fdy)),
            "ctl_sites": seq(self.ctl_sites),
            "attention_depth": str(self.attention_depth),
            "dtype": self.dtype,
            "motor_headline": self.motor_headline,
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> TrainConfig:
        unknown = set(kv) - set(_FIELD_PARSERS)
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(sorted(unknown))}")
        out = {}
        for k, v in kv.items():
            try:
                out[k] = _FIELD_PARSERS[k](v)
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {v!r}") from exc
        return cls(**out)


def _ints(v: str):
    return tuple(int(x) for x in split_list(v)) if v.strip() else None


def _strs(v: str):
    return tuple(split_list(v)) if v.strip() else None


_FIELD_PARSERS = {
    "manifest": str,
    "kind": lambda v: v.strip().lower(),
    "epochs": int,
    "lr": float,
    "batch_size": int,
    "seeds": lambda v: _ints(v) or (),
    "tasks": _strs,
    "sensors": str.strip,
    "n_fft": int,
    "hop": int,
    "window": str.strip,
    "sample_rate": lambda v: float(v) if v.strip() else None,
    "channels": _ints,
    "pools": _ints,
    "kernel": int,
    "fdy": lambda v: v.strip().lower() in ("1", "true", "yes"),
    "ctl_sites": _ints,
    "attention_depth": int,
    "dtype": str.strip,
    "motor_headline": str.strip,
}


# ---------------------------------------------------------------- data

@dataclass
class PreparedData:
    manifest: DatasetManifest
    stft: StftConfig
    splits: dict[str, SplitArrays]


_DATA_MEMO: dict[tuple, PreparedData] = {}


def stft_config(cfg: TrainConfig, manifest: DatasetManifest) -> StftConfig:
    rate = cfg.sample_rate
    if rate is None:
        rate = read_signal(manifest.signal_path(manifest.rows[0]))[1]
    return StftConfig(n_fft=cfg.n_fft, hop=cfg.hop, window=cfg.window, sample_rate=rate)


def prepare_data(cfg: TrainConfig) -> PreparedData:
    """Standardized inputs of all splits; statistics come from the train split."""
    path = Path(cfg.manifest).resolve()
    key = (str(path), path.stat().st_mtime_ns if path.exists() else 0, cfg.n_fft, cfg.hop, cfg.window,
           cfg.sample_rate, cfg.sensors, cfg.dtype)
    hit = _DATA_MEMO.get(key)
    if hit is not None:
        return hit
    manifest = load_manifest(path)
    stft = fit_split_standardizer(manifest, stft_config(cfg, manifest), "train")
    bc = BatchConfig(stft, cfg.batch_size, sensors=cfg.sensors, dtype=np.dtype(cfg.dtype))
    splits = {s: split_arrays(manifest, s, bc) for s in ("train", "val", "test")}
    data = PreparedData(manifest, bc.stft, splits)
    _DATA_MEMO.clear()
    _DATA_MEMO[key] = data
    return data


def resolve_tasks(cfg: TrainConfig, manifest: DatasetManifest):
    names = cfg.tasks or tuple(manifest.task_names)
    try:
        return [manifest.task(n).spec() for n in names]
    except KeyError as exc:
        raise ConfigError(f"task {exc.args[0]!r} is not in the manifest") from None


def resolve_backbone(cfg: TrainConfig, in_channels: int, freq_bins: int, kind: str) -> BackboneSpec:
    bb = cfg.backbone or default_backbone(in_channels, freq_bins, fdy=cfg.fdy, ctl=False,
                                          channels=cfg.channels, pools=cfg.pools, kernel=cfg.kernel)
    if kind in CROSS_TALK:
        return bb if bb.has_ctl_sites else bb.with_ctl_sites(cfg.ctl_sites)
    return bb.without_ctl()


# ---------------------------------------------------------------- training

@dataclass
class RunRecord:
    kind: str
    seed: int
    tasks: tuple[str, ...] = ()
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    train_task_loss: dict[str, list[float]] = field(default_factory=dict)
    val_task_loss: dict[str, list[float]] = field(default_factory=dict)
    selected_epoch: int = 0  # 1-based
    best_val_loss: float = math.nan
    run_dir: Path | None = None
    checkpoint: Path | None = None
    descriptor: Path | None = None
    dump: Path | None = None
    components: list[RunRecord] = field(default_factory=list)
    error: str | None = None
    elapsed: float = 0.0
    model: MultiTaskModel | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.error is None and all(c.ok for c in self.components)

    @property
    def label(self) -> str:
        return f"{self.kind}/seed{self.seed}"


def _total_loss(losses: Sequence[ad.Tensor]) -> ad.Tensor:
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total


def forward_logits(model: MultiTaskModel, data: SplitArrays, batch_size: int) -> list[np.ndarray]:
    """Logits per task for a whole split, batch by batch, without recording."""
    outs: list[list[np.ndarray]] = [[] for _ in model.tasks]
    for batch in iterate_batches(data, batch_size):
        for i, l in enumerate(model(batch.inputs)):
            outs[i].append(l.data)
    return [np.concatenate(o) if o else np.zeros((0, t.n_classes)) for o, t in zip(outs, model.tasks)]


def split_loss(model: MultiTaskModel, data: SplitArrays, batch_size: int) -> tuple[float, dict[str, float]]:
    """Mean over samples of the summed per-task cross-entropy."""
    n = len(data)
    per_task = {t.name: 0.0 for t in model.tasks}
    for batch in iterate_batches(data, batch_size):
        b = len(batch.sample_ids)
        for t, l in zip(model.tasks, model(batch.inputs)):
            per_task[t.name] += float(softmax_cross_entropy(l, batch.labels[t.name]).item()) * b
    per_task = {k: v / n for k, v in per_task.items()}
    return float(sum(per_task.values())), per_task


def write_dump(path, sample_ids: Sequence[str], tasks, labels: dict[str, np.ndarray],
               logits: Sequence[np.ndarray]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "task", "true", "pred", "logits"])
    for t, lg in zip(tasks, logits):
        pred = lg.argmax(axis=1)
        for i, sid in enumerate(sample_ids):
            w.writerow([sid, t.name, int(labels[t.name][i]), int(pred[i]), ";".join(repr(float(v)) for v in lg[i])])
    Path(path).write_text(buf.getvalue())


def read_dump(path) -> dict[str, dict[str, tuple[int, int]]]:
    """``{task: {sample_id: (true, pred)}}``."""
    out: dict[str, dict[str, tuple[int, int]]] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read prediction dump {path}: {exc}") from exc
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header != ["sample_id", "task", "true", "pred", "logits"]:
        raise FormatError(f"{path}: unexpected dump header {header}")
    for lineno, r in enumerate(rows, 2):
        if len(r) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 fields")
        try:
            out.setdefault(r[1], {})[r[0]] = (int(r[2]), int(r[3]))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return out


def _write_meta(path, cfg: TrainConfig, rec: RunRecord, model: MultiTaskModel) -> None:
    meta = {
        "config_hash": config_hash(cfg.to_kv()),
        "kind": rec.kind,
        "seed": rec.seed,
        "tasks": ",".join(rec.tasks),
        "epochs": cfg.epochs,
        "selected_epoch": rec.selected_epoch,
        "best_val_loss": repr(rec.best_val_loss),
        "param_count": model.param_count(),
    }
    Path(path).write_text(format_kv(meta))


def _write_losses(path, rec: RunRecord) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(rec.tasks)
    w.writerow(["epoch", "train", "val"] + [f"train.{n}" for n in names] + [f"val.{n}" for n in names])
    for e in range(len(rec.train_loss)):
        w.writerow([e + 1, repr(rec.train_loss[e]), repr(rec.val_loss[e])]
                   + [repr(rec.train_task_loss[n][e]) for n in names]
                   + [repr(rec.val_task_loss[n][e]) for n in names])
    Path(path).write_text(buf.getvalue())


def train_one(cfg: TrainConfig, seed: int, out_dir=None, data: PreparedData | None = None,
              kind: str | None = None, tasks: Sequence[str] | None = None) -> RunRecord:
    """Train one model; artifacts land in ``out_dir`` when given."""
    t0 = time.perf_counter()
    kind = kind or cfg.kind
    if tasks is not None:
        cfg = replace(cfg, tasks=tuple(tasks))
    data = data or prepare_data(cfg)
    task_specs = resolve_tasks(cfg, data.manifest)
    train, val = data.splits["train"], data.splits["val"]
    _, C, F, _ = train.inputs.shape
    backbone = resolve_backbone(cfg, C, F, kind)
    model = build_model(kind, backbone, task_specs, seed=seed, dtype=np.dtype(cfg.dtype),
                        attention_depth=cfg.attention_depth)
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    shuffle = derive_rng(seed, "shuffle")
    rec = RunRecord(kind, int(seed), tuple(t.name for t in task_specs))
    rec.train_task_loss = {t.name: [] for t in task_specs}
    rec.val_task_loss = {t.name: [] for t in task_specs}
    best_state = None

    for epoch in range(1, cfg.epochs + 1):
        sums = {t.name: 0.0 for t in task_specs}
        for bi, batch in enumerate(iterate_batches(train, cfg.batch_size, shuffle)):
            with ad.Tape() as tape:
                logits = model(batch.inputs)
                losses = [softmax_cross_entropy(l, batch.labels[t.name]) for t, l in zip(task_specs, logits)]
                loss = _total_loss(losses)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"{kind} seed {seed}: non-finite loss at epoch {epoch}, batch {bi}")
            adam_step(opt, params, tape.backward(loss))
            b = len(batch.sample_ids)
            for t, l in zip(task_specs, losses):
                sums[t.name] += l.item() * b
        for t in task_specs:
            rec.train_task_loss[t.name].append(sums[t.name] / len(train))
        rec.train_loss.append(float(sum(v[-1] for v in rec.train_task_loss.values())))
        vtot, vtask = split_loss(model, val, cfg.batch_size)
        if not math.isfinite(vtot):
            raise DivergenceError(f"{kind} seed {seed}: non-finite validation loss at epoch {epoch}")
        rec.val_loss.append(vtot)
        for k, v in vtask.items():
            rec.val_task_loss[k].append(v)
        if best_state is None or vtot < rec.best_val_loss:
            rec.best_val_loss = vtot
            rec.selected_epoch = epoch
            best_state = model.state_dict()

    model.load_state(best_state)
    rec.elapsed = time.perf_counter() - t0
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        rec.run_dir = d
        rec.checkpoint = d / "checkpoint.ctlw"
        rec.descriptor = d / "model.desc"
        rec.dump = d / "predictions.csv"
        save_checkpoint(rec.checkpoint, model.parameters())
        rec.descriptor.write_text(model.descriptor())
        test = data.splits["test"]
        write_dump(rec.dump, test.sample_ids, task_specs, test.labels, forward_logits(model, test, cfg.batch_size))
        _write_meta(d / "run.meta", cfg, rec, model)
        _write_losses(d / "losses.csv", rec)
        (d / "train.cfg").write_text(format_kv(cfg.to_kv()))
    rec.model = model
    return rec


def train_cell(cfg: TrainConfig, kind: str, seed: int, out_dir=None, data: PreparedData | None = None) -> RunRecord:
    """One sweep cell.  STL expands into one single-task run per main task."""
    if kind != "stl":
        return train_one(cfg, seed, out_dir, data, kind=kind)
    data = data or prepare_data(cfg)
    mains = [n for n in (cfg.tasks or data.manifest.task_names) if data.manifest.task(n).role == "main"]
    comp = RunRecord("stl", int(seed), tuple(mains))
    t0 = time.perf_counter()
    for name in mains:
        sub = None if out_dir is None else Path(out_dir) / name
        comp.components.append(train_one(cfg, seed, sub, data, kind="stl", tasks=[name]))
    comp.elapsed = time.perf_counter() - t0
    comp.selected_epoch = 0
    comp.best_val_loss = float(sum(c.best_val_loss for c in comp.components))
    if out_dir is not None:
        d = Path(out_dir)
        comp.run_dir = d
        comp.dump = d / "predictions.csv"
        parts = [c.dump.read_text().splitlines(keepends=True) for c in comp.components]
        comp.dump.write_text("".join(parts[0] + [l for p in parts[1:] for l in p[1:]]))
    return comp


# ---------------------------------------------------------------- evaluation

def _is_motor(manifest: DatasetManifest) -> bool:
    return all(c in manifest.task_names for c in MOTOR_COMPONENTS)


def evaluate_predictions(dump: dict[str, dict[str, tuple[int, int]]], manifest: DatasetManifest,
                         split: str = "test", motor_headline: str = "compound") -> dict[str, float]:
    """Macro F1 per task and the headline score.

    Only main tasks enter the headline.  For the four motor components the
    compound label is rebuilt from the per-component predictions.
    """
    rows = manifest.split_rows(split)
    ids = [r["sample_id"] for r in rows]
    labels = manifest.labels(split)
    out: dict[str, float] = {}
    preds: dict[str, np.ndarray] = {}
    for t in manifest.tasks:
        if t.name not in dump:
            if t.role == "main":
                raise FormatError(f"dump has no predictions for main task {t.name!r}")
            continue
        entries = dump[t.name]
        if set(entries) != set(ids):
            raise FormatError(f"dump sample ids for {t.name!r} do not match the {split} split")
        true = np.array([entries[s][0] for s in ids])
        if not np.array_equal(true, labels[t.name]):
            raise FormatError(f"dump truth for {t.name!r} disagrees with the manifest")
        pred = np.array([entries[s][1] for s in ids])
        preds[t.name] = pred
        f1 = macro_f1(ConfusionMatrix.from_labels(true, pred, len(t.classes)))
        out[f"f1.{t.name}" if t.role == "main" else f"aux_f1.{t.name}"] = f1
    mains = [t.name for t in manifest.main_tasks]
    if _is_motor(manifest):
        true_c = aggregate_compound(*(labels[c] for c in MOTOR_COMPONENTS))
        pred_c = aggregate_compound(*(preds[c] for c in MOTOR_COMPONENTS))
        out["f1.compound"] = macro_f1(ConfusionMatrix.from_labels(true_c, pred_c, 36))
        out["f1.component_mean"] = float(np.mean([out[f"f1.{c}"] for c in MOTOR_COMPONENTS]))
        out["macro_f1"] = out[f"f1.{motor_headline}"]
    else:
        out["macro_f1"] = float(np.mean([out[f"f1.{n}"] for n in mains]))
    return out


def evaluate_run(record: RunRecord, manifest: DatasetManifest, motor_headline: str = "compound") -> dict[str, float]:
    if record.dump is None:
        raise FormatError(f"{record.label}: no prediction dump")
    return evaluate_predictions(read_dump(record.dump), manifest, motor_headline=motor_headline)


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepResult:
    records: list[RunRecord]
    report: RunReport

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.records)


def _cell_worker(args) -> RunRecord:
    cfg, kind, seed, out_dir = args
    try:
        rec = train_cell(cfg, kind, seed, out_dir)
    except CrosstalkError as exc:
        log.warning("cell %s/seed%s failed: %s", kind, seed, exc)
        return RunRecord(kind, seed, error=f"{type(exc).__name__}: {exc}")
    log.info("cell %s/seed%s done in %.1fs", kind, seed, rec.elapsed)
    for r in [rec, *rec.components]:
        r.model = None  # keep records light across process boundaries
    return rec


def sweep(cfg: TrainConfig, kinds: Sequence[str], out_dir, seeds: Sequence[int] | None = None,
          jobs: int = 1) -> SweepResult:
    """Train every (architecture, seed) cell; failures are recorded, not raised."""
    kinds = [k.lower() for k in kinds]
    if not kinds:
        raise ConfigError("architecture list is empty")
    for k in kinds:
        if k not in KINDS:
            raise ConfigError(f"unknown architecture {k!r}")
    seeds = list(cfg.seeds if seeds is None else seeds)
    out = Path(out_dir)
    cells = [(cfg, k, s, out / f"{k}_seed{s}") for k in kinds for s in seeds]
    prepare_data(cfg)  # fills the spectrogram cache once, before any worker starts
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_cell_worker, cells))
    else:
        records = [_cell_worker(c) for c in cells]
    manifest = load_manifest(cfg.manifest)
    report = RunReport("motor" if _is_motor(manifest) else "drone", seeds)
    for rec in records:
        if not rec.ok:
            report.failures[rec.label] = rec.error or "component failure"
            continue
        try:
            report.add(rec.kind, rec.seed, evaluate_run(rec, manifest, cfg.motor_headline))
        except CrosstalkError as exc:
            rec.error = f"{type(exc).__name__}: {exc}"
            report.failures[rec.label] = rec.error
    return SweepResult(records, report)
