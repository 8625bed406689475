"""Manifests, spectrogram cache and model input batches.

Directory layout of a dataset::

    root/
      manifest.csv
      signals/<sample_id>.sigf
      cache/<stft key>/<sample_id>.spg

The manifest is comma-separated text with a header row.  Task schemas
precede it as comment lines ``#task,<name>,<role>,<class>;<class>;...``; the
class index of a label is its position in that list.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Tensor
from .dsp import StftConfig, fit_standardizer, log_standardize, read_spectrogram, stft_power, write_spectrogram
from .errors import ConfigError, FormatError, IoError
from .generators import read_signal
from .models import TaskSpec
from .seeding import derive_rng

SPLITS = ("train", "val", "test")
BASE_COLUMNS = ("sample_id", "signal_path", "split")


@dataclass(frozen=True)
class TaskSchema:
    name: str
    classes: tuple[str, ...]
    role: str = "main"

    def index(self, value: str) -> int:
        return self.classes.index(value)

    def spec(self) -> TaskSpec:
        return TaskSpec(self.name, len(self.classes), self.role)


@dataclass
class DatasetManifest:
    tasks: list[TaskSchema]
    rows: list[dict[str, str]]
    covariates: list[str] = field(default_factory=list)
    root: Path = Path(".")

    @property
    def task_names(self) -> list[str]:
        return [t.name for t in self.tasks]

    @property
    def main_tasks(self) -> list[TaskSchema]:
        return [t for t in self.tasks if t.role == "main"]

    def task(self, name: str) -> TaskSchema:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(name)

    def task_specs(self) -> list[TaskSpec]:
        return [t.spec() for t in self.tasks]

    def split_rows(self, split: str) -> list[dict[str, str]]:
        return [r for r in self.rows if r["split"] == split]

    def labels(self, split: str | None = None) -> dict[str, np.ndarray]:
        rows = self.rows if split is None else self.split_rows(split)
        return {t.name: np.array([t.index(r[t.name]) for r in rows], dtype=np.int64) for t in self.tasks}

    def signal_path(self, row: dict[str, str]) -> Path:
        p = Path(row["signal_path"])
        return p if p.is_absolute() else self.root / p

    @property
    def columns(self) -> list[str]:
        return list(BASE_COLUMNS) + self.task_names + self.covariates


def write_manifest(path, manifest: DatasetManifest) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for t in manifest.tasks:
        line = io.StringIO()
        csv.writer(line, lineterminator="").writerow(["task", t.name, t.role, ";".join(t.classes)])
        buf.write("#" + line.getvalue() + "\n")
    cols = manifest.columns
    w.writerow(cols)
    for r in manifest.rows:
        w.writerow([r.get(c, "") for c in cols])
    Path(path).write_text(buf.getvalue())


def load_manifest(path, require_splits: Sequence[str] = ("train", "val")) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    tasks: list[TaskSchema] = []
    body_lines: list[tuple[int, str]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.startswith("#"):
            fields = next(csv.reader([line[1:]]))
            if fields and fields[0] == "task":
                if len(fields) != 4:
                    raise FormatError(f"{path}:{lineno}: task line needs name, role, classes")
                tasks.append(TaskSchema(fields[1], tuple(fields[3].split(";")), fields[2]))
        elif line.strip():
            body_lines.append((lineno, line))
    if not body_lines:
        raise FormatError(f"{path}: missing header row")
    reader = csv.reader([l for _, l in body_lines])
    header = next(reader)
    for col in BASE_COLUMNS:
        if col not in header:
            raise FormatError(f"{path}: header lacks {col!r}")
    names = [t.name for t in tasks]
    for n in names:
        if n not in header:
            raise FormatError(f"{path}: header lacks task column {n!r}")
    covariates = [c for c in header if c not in BASE_COLUMNS and c not in names]
    rows = []
    seen: set[str] = set()
    for (lineno, _), values in zip(body_lines[1:], reader):
        if len(values) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(values)}")
        row = dict(zip(header, values))
        sid = row["sample_id"]
        if sid in seen:
            raise FormatError(f"{path}:{lineno}: duplicate sample id {sid!r}")
        seen.add(sid)
        if row["split"] not in SPLITS:
            raise FormatError(f"{path}:{lineno}: unknown split {row['split']!r}")
        for t in tasks:
            if row[t.name] not in t.classes:
                raise FormatError(f"{path}:{lineno}: {t.name} label {row[t.name]!r} not in class list")
        rows.append(row)
    m = DatasetManifest(tasks, rows, covariates, path.parent)
    for s in require_splits:
        if not m.split_rows(s):
            raise FormatError(f"{path}: split {s!r} is empty")
    return m


# ---------------------------------------------------------------- spectrograms

def cache_path(manifest: DatasetManifest, sample_id: str, stft: StftConfig) -> Path:
    return manifest.root / "cache" / stft.key() / f"{sample_id}.spg"


def load_power(manifest: DatasetManifest, row: dict[str, str], stft: StftConfig, use_cache: bool = True) -> np.ndarray:
    """Power spectrogram [C, F, T] of one sample, from cache when present."""
    sid = row["sample_id"]
    cp = cache_path(manifest, sid, stft)
    if use_cache and cp.exists():
        return read_spectrogram(cp)
    sp = manifest.signal_path(row)
    if not sp.exists():
        raise IoError(f"sample {sid!r}: no cached spectrogram and no signal at {sp}")
    sig, rate = read_signal(sp)
    if abs(rate - stft.sample_rate) > 1e-6:
        raise ConfigError(f"sample {sid!r} is sampled at {rate} Hz, STFT expects {stft.sample_rate} Hz")
    spec = stft_power(sig, stft).astype(np.float32)
    if use_cache:
        cp.parent.mkdir(parents=True, exist_ok=True)
        write_spectrogram(cp, spec)
    return spec


def fit_split_standardizer(manifest: DatasetManifest, stft: StftConfig, split: str = "train") -> StftConfig:
    return fit_standardizer((load_power(manifest, r, stft) for r in manifest.split_rows(split)), stft)


def select_sensors(x: np.ndarray, sensors: str) -> np.ndarray:
    """``"A"`` keeps channel 0, ``"AB"`` keeps channels 0 and 1; ``x`` is [..., C, F, T]."""
    C = x.shape[-3]
    if sensors == "A":
        return x[..., :1, :, :]
    if sensors == "AB":
        if C < 2:
            raise ConfigError("sensor selection AB needs two-channel signals")
        return x[..., :2, :, :]
    raise ConfigError(f"unknown sensor selection {sensors!r}")


@dataclass
class BatchConfig:
    stft: StftConfig
    batch_size: int = 32
    shuffle_seed: int | None = None
    sensors: str = "A"
    dtype: type = np.float32


@dataclass
class Batch:
    inputs: Tensor
    labels: dict[str, np.ndarray]
    sample_ids: list[str]


@dataclass
class SplitArrays:
    inputs: np.ndarray
    labels: dict[str, np.ndarray]
    sample_ids: list[str]

    def __len__(self) -> int:
        return len(self.sample_ids)


def split_arrays(manifest: DatasetManifest, split: str, cfg: BatchConfig) -> SplitArrays:
    """All standardized inputs of a split, in manifest order."""
    stft = cfg.stft if cfg.stft.fitted else fit_split_standardizer(manifest, cfg.stft)
    rows = manifest.split_rows(split)
    xs = [select_sensors(log_standardize(load_power(manifest, r, stft), stft), cfg.sensors) for r in rows]
    shapes = {x.shape for x in xs}
    if len(shapes) > 1:
        raise FormatError(f"split {split!r} mixes spectrogram shapes {sorted(shapes)}")
    inputs = np.stack(xs).astype(cfg.dtype) if xs else np.zeros((0,), dtype=cfg.dtype)
    return SplitArrays(inputs, manifest.labels(split), [r["sample_id"] for r in rows])


def iterate_batches(data: SplitArrays, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """Yield batches in order (or a permutation from ``rng``); the last partial batch is kept."""
    n = len(data)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(
            Tensor(data.inputs[idx]),
            {k: v[idx] for k, v in data.labels.items()},
            [data.sample_ids[i] for i in idx],
        )


def make_batches(manifest: DatasetManifest, split: str, cfg: BatchConfig) -> Iterator[Batch]:
    data = split_arrays(manifest, split, cfg)
    rng = derive_rng(cfg.shuffle_seed, "shuffle") if cfg.shuffle_seed is not None else None
    return iterate_batches(data, cfg.batch_size, rng)
