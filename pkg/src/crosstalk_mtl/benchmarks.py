"""Benchmark datasets with controlled class imbalance.

The imbalance ratio (IBR) of a labeling is the largest class count divided
by the smallest.  Default targets:

=========  ==================================  =====================
benchmark  labeling                            target IBR
=========  ==================================  =====================
drone      fault / drone type / direction      15.57 / 1.03 / 1.06
motor      irf / orf / misalignment / unbal.   1.68 / 1.68 / 1.06 / 1.18
motor      compound (36 severity tuples)       18.15
=========  ==================================  =====================
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import format_kv
from .datasets import DatasetManifest, TaskSchema, write_manifest
from .errors import ConfigError
from .generators import (
    DRONE_DIRECTIONS,
    DRONE_FAULTS,
    DRONE_TYPES,
    MOTOR_COMPONENTS,
    MOTOR_LEVELS,
    RPM_PROFILES,
    DroneLabel,
    MotorLabel,
    generate_drone,
    generate_motor,
    write_signal,
)
from .metrics import imbalance_ratio
from .seeding import derive_rng

DRONE_IBR = {"fault": 15.57, "drone_type": 1.03, "direction": 1.06}
MOTOR_IBR = {"irf": 1.68, "orf": 1.68, "misalignment": 1.06, "unbalance": 1.18, "compound": 18.15}
IBR_TOLERANCE = 0.05


def _level_name(v: float) -> str:
    return f"{v:g}"


MOTOR_CLASS_NAMES = {c: tuple(_level_name(v) for v in MOTOR_LEVELS[c]) for c in MOTOR_COMPONENTS}


def drone_schema() -> list[TaskSchema]:
    return [
        TaskSchema("fault", DRONE_FAULTS, "main"),
        TaskSchema("drone_type", DRONE_TYPES, "auxiliary"),
        TaskSchema("direction", DRONE_DIRECTIONS, "auxiliary"),
    ]


def motor_schema() -> list[TaskSchema]:
    return [TaskSchema(c, MOTOR_CLASS_NAMES[c], "main") for c in MOTOR_COMPONENTS]


@dataclass
class GenSpec:
    benchmark: str
    sample_rate: float | None = None
    duration: float | None = None
    snr_db: tuple[float, float] = (5.0, 20.0)
    total: int = 2000
    seed: int = 0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    target_ibr: dict[str, float] = field(default_factory=dict)
    counts: list[int] | None = None

    def __post_init__(self):
        if self.benchmark not in ("drone", "motor"):
            raise ConfigError(f"unknown benchmark {self.benchmark!r}")
        if self.sample_rate is None:
            self.sample_rate = 16000.0 if self.benchmark == "drone" else 8000.0
        if self.duration is None:
            self.duration = 0.5
        defaults = DRONE_IBR if self.benchmark == "drone" else MOTOR_IBR
        self.target_ibr = {**defaults, **self.target_ibr}
        if abs(sum(self.split) - 1) > 1e-9 or min(self.split) < 0:
            raise ConfigError("split fractions must be non-negative and sum to 1")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


# ---------------------------------------------------------------- class counts

def linear_counts(n_classes: int, ibr: float, total: int) -> list[int]:
    """Counts rising linearly from m to ibr*m that sum to ``total``."""
    if n_classes == 1:
        return [total]
    m = 2 * total / (n_classes * (1 + ibr))
    raw = np.array([m * (1 + (ibr - 1) * i / (n_classes - 1)) for i in range(n_classes)])
    counts = np.floor(raw).astype(int)
    # largest remainders take the leftover units
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def drone_counts(total: int, ibr: float) -> list[int]:
    """Normal class ``ibr`` times each of the eight equally sized fault classes."""
    n_fault = len(DRONE_FAULTS) - 1
    m = max(1, int(round(total / (ibr + n_fault))))
    return [int(round(ibr * m))] + [m] * n_fault


def motor_ibrs(table: np.ndarray) -> dict[str, float]:
    out = {}
    for axis, c in enumerate(MOTOR_COMPONENTS):
        other = tuple(a for a in range(4) if a != axis)
        out[c] = imbalance_ratio(table.sum(axis=other))
    out["compound"] = imbalance_ratio(table.reshape(-1))
    return out


def _motor_objective(table: np.ndarray, targets: dict[str, float], total: int) -> float:
    if table.min() < 1:
        return np.inf
    ach = motor_ibrs(table)
    err = sum(np.log(ach[k] / targets[k]) ** 2 for k in targets)
    return err + 0.05 * np.log(table.sum() / total) ** 2


def solve_motor_counts(total: int, targets: dict[str, float] | None = None, max_sweeps: int = 200) -> np.ndarray:
    """Integer counts over the 2x2x3x3 severity table meeting all IBR targets.

    Starts from the product of per-component marginals, pushes the rarest
    cell down to reach the compound target, then runs a deterministic
    coordinate search over single-cell changes.
    """
    targets = {**MOTOR_IBR, **(targets or {})}
    marg = []
    for c in MOTOR_COMPONENTS:
        n = len(MOTOR_LEVELS[c])
        w = np.linspace(targets[c], 1.0, n)  # healthy level most common
        marg.append(w / w.sum())
    p = np.einsum("i,j,k,l->ijkl", *marg)
    p[np.unravel_index(p.argmin(), p.shape)] *= targets["compound"] / (p.max() / p.min())
    table = np.maximum(1, np.round(p / p.sum() * total)).astype(np.int64)
    best = _motor_objective(table, targets, total)
    steps = [1, -1, 2, -2, 5, -5, 10, -10]
    for _ in range(max_sweeps):
        improved = False
        for idx in itertools.product(*(range(s) for s in table.shape)):
            for s in steps:
                table[idx] += s
                val = _motor_objective(table, targets, total)
                if val < best - 1e-12:
                    best = val
                    improved = True
                    break
                table[idx] -= s
        if not improved:
            break
    return table


def check_ibr(achieved: dict[str, float], targets: dict[str, float], tol: float = IBR_TOLERANCE,
              counts=None) -> None:
    bad = {k: (achieved[k], targets[k]) for k in targets if abs(achieved[k] / targets[k] - 1) > tol}
    if bad:
        detail = ", ".join(f"{k}: {a:.3f} vs {t:.3f}" for k, (a, t) in bad.items())
        raise ConfigError(f"infeasible count combination ({detail}); closest feasible counts: {counts}")


# ---------------------------------------------------------------- build

def _split_assign(strata: np.ndarray, fractions, rng_seed: int) -> list[str]:
    out = [""] * len(strata)
    for s in np.unique(strata):
        idx = np.flatnonzero(strata == s)
        idx = derive_rng(rng_seed, "split", int(s)).permutation(idx)
        n = len(idx)
        n_val = int(round(fractions[1] * n))
        n_test = int(round(fractions[2] * n))
        if n >= 3:
            n_val = max(1, n_val) if fractions[1] > 0 else 0
            n_test = max(1, n_test) if fractions[2] > 0 else 0
        n_train = n - n_val - n_test
        for j, i in enumerate(idx):
            out[i] = "train" if j < n_train else "val" if j < n_train + n_val else "test"
    return out


def plan_labels(spec: GenSpec) -> tuple[list, np.ndarray, dict[str, float]]:
    """Label for every sample (in generation order), the split strata, and achieved IBRs."""
    rng = derive_rng(spec.seed, "labels")
    if spec.benchmark == "drone":
        counts = spec.counts or drone_counts(spec.total, spec.target_ibr["fault"])
        faults = np.repeat(np.arange(len(DRONE_FAULTS)), counts)
        n = len(faults)
        types = rng.permutation(np.repeat(np.arange(3), linear_counts(3, spec.target_ibr["drone_type"], n)))
        dirs = rng.permutation(np.repeat(np.arange(6), linear_counts(6, spec.target_ibr["direction"], n)))
        labels = [DroneLabel(DRONE_FAULTS[f], DRONE_TYPES[t], DRONE_DIRECTIONS[d]) for f, t, d in zip(faults, types, dirs)]
        achieved = {
            "fault": imbalance_ratio(np.bincount(faults)),
            "drone_type": imbalance_ratio(np.bincount(types)),
            "direction": imbalance_ratio(np.bincount(dirs)),
        }
        check_ibr(achieved, spec.target_ibr, counts=counts)
        return labels, faults, achieved
    if spec.counts is not None:
        table = np.asarray(spec.counts, dtype=np.int64).reshape(2, 2, 3, 3)
    else:
        table = solve_motor_counts(spec.total, spec.target_ibr)
    achieved = motor_ibrs(table)
    check_ibr(achieved, spec.target_ibr, counts=table.reshape(-1).tolist())
    labels, strata = [], []
    for cell, n in enumerate(table.reshape(-1)):
        idx = np.unravel_index(cell, table.shape)
        for j in range(int(n)):
            labels.append(MotorLabel.from_indices(idx, RPM_PROFILES[j % len(RPM_PROFILES)]))
            strata.append(cell)
    return labels, np.asarray(strata), achieved


def generate_sample(spec: GenSpec, label, sample_index: int) -> np.ndarray:
    if spec.benchmark == "drone":
        return generate_drone(label, spec.sample_rate, spec.n_samples, spec.seed, sample_index, spec.snr_db)
    return generate_motor(label, spec.sample_rate, spec.n_samples, spec.seed, sample_index, spec.snr_db)


def label_row(spec: GenSpec, label) -> dict[str, str]:
    if spec.benchmark == "drone":
        return {"fault": label.fault, "drone_type": label.drone_type, "direction": label.direction}
    row = {c: _level_name(getattr(label, c)) for c in MOTOR_COMPONENTS}
    row["rpm_profile"] = label.rpm_profile
    return row


def spec_snapshot(spec: GenSpec) -> dict[str, object]:
    return {
        "benchmark": spec.benchmark,
        "sample_rate": repr(float(spec.sample_rate)),
        "duration": repr(float(spec.duration)),
        "n_samples": spec.n_samples,
        "snr_db": f"{spec.snr_db[0]!r},{spec.snr_db[1]!r}",
        "total": spec.total,
        "seed": spec.seed,
        "split": ",".join(repr(float(v)) for v in spec.split),
        **{f"ibr.{k}": repr(float(v)) for k, v in spec.target_ibr.items()},
    }


def build_dataset(spec: GenSpec, out_dir) -> DatasetManifest:
    """Generate every signal, write ``signals/*.sigf`` and ``manifest.csv``."""
    out = Path(out_dir)
    (out / "signals").mkdir(parents=True, exist_ok=True)
    labels, strata, achieved = plan_labels(spec)
    splits = _split_assign(strata, spec.split, spec.seed)
    prefix = "d" if spec.benchmark == "drone" else "m"
    rows = []
    for i, (label, split) in enumerate(zip(labels, splits)):
        sid = f"{prefix}{i:05d}"
        rel = f"signals/{sid}.sigf"
        write_signal(out / rel, generate_sample(spec, label, i), spec.sample_rate)
        rows.append({"sample_id": sid, "signal_path": rel, "split": split, **label_row(spec, label)})
    schema = drone_schema() if spec.benchmark == "drone" else motor_schema()
    covariates = [] if spec.benchmark == "drone" else ["rpm_profile"]
    manifest = DatasetManifest(schema, rows, covariates, out)
    write_manifest(out / "manifest.csv", manifest)
    snap = spec_snapshot(spec)
    snap.update({f"achieved_ibr.{k}": f"{v:.6f}" for k, v in achieved.items()})
    (out / "generation.cfg").write_text(format_kv(snap))
    return manifest
