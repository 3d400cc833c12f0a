"""Synthetic labelled mesh signals, signal files, grouped folds and metrics."""

from __future__ import annotations

import csv
import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MSIG_MAGIC = b"MSIG"
MSIG_VERSION = 1


class BadLevel(ValueError):
    pass


class TooFewSubjects(ValueError):
    pass


class NoPositives(ValueError):
    pass


class NoNegatives(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    """Hemisphere-bump task: class 0 bumps sit at z > 0, class 1 at z < 0."""

    name: str = "hemisphere-bump"
    noise_sigma: float = 0.1
    amplitude: float = 1.0
    width_deg: float = 30.0
    scans_per_subject: int = 3


@dataclass
class Dataset:
    level: int
    signals: np.ndarray  # (S, N, C)
    labels: np.ndarray  # (S,)
    subject_ids: list
    class_names: tuple = ("north", "south")
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_classes(self):
        return len(self.class_names)

    def samples(self):
        for sid, lab, sig in zip(self.subject_ids, self.labels, self.signals):
            yield {"subject_id": sid, "label": int(lab), "signal": sig}

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(
            level=self.level,
            signals=self.signals[idx],
            labels=self.labels[idx],
            subject_ids=[self.subject_ids[i] for i in idx],
            class_names=self.class_names,
            meta=dict(self.meta),
        )

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.signals).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update("\n".join(self.subject_ids).encode())
        return h.hexdigest()


def gaussian_bump(positions, center, amplitude, width_deg):
    """``amplitude * exp(-angle^2 / (2 w^2))`` with the angle between unit directions."""
    u = positions / np.linalg.norm(positions, axis=1, keepdims=True)
    c = center / np.linalg.norm(center)
    ang = np.arccos(np.clip(u @ c, -1.0, 1.0))
    w = np.deg2rad(width_deg)
    return amplitude * np.exp(-(ang ** 2) / (2.0 * w * w))


def gen_synthetic(hier, level, n_per_class, task=None, seed=0):
    """Generate ``n_per_class`` subjects per class, each with several scans.

    A subject's bump center is drawn once among the vertices of its
    hemisphere; every scan of that subject gets fresh noise.
    """
    task = task or TaskSpec()
    if task.name != "hemisphere-bump":
        raise ValueError(f"unknown task {task.name!r}")
    if not 0 <= level <= hier.depth:
        raise BadLevel(f"level {level} outside hierarchy levels 0..{hier.depth}")
    if task.scans_per_subject < 1 or n_per_class < 1:
        raise ValueError("need at least one subject per class and one scan per subject")
    mesh = hier.levels[level]
    pos = mesh.vertices
    rng = np.random.default_rng(seed)
    hemis = [np.flatnonzero(pos[:, 2] > 0), np.flatnonzero(pos[:, 2] < 0)]

    signals, labels, subjects = [], [], []
    sub = 0
    for label, cand in enumerate(hemis):
        for _ in range(n_per_class):
            center = pos[rng.choice(cand)]
            bump = gaussian_bump(pos, center, task.amplitude, task.width_deg)
            sid = f"sub-{sub:04d}"
            sub += 1
            for _ in range(task.scans_per_subject):
                noise = rng.normal(0.0, task.noise_sigma, size=pos.shape[0]) if task.noise_sigma > 0 else 0.0
                signals.append(bump + noise)
                labels.append(label)
                subjects.append(sid)
    return Dataset(
        level=level,
        signals=np.asarray(signals, dtype=np.float64)[:, :, None],
        labels=np.asarray(labels, dtype=np.int64),
        subject_ids=subjects,
        meta={"task": task.name, "seed": seed},
    )


def write_signal(path, values):
    values = np.asarray(values)
    if values.ndim == 1:
        values = values[:, None]
    n, c = values.shape
    with open(path, "wb") as fh:
        fh.write(MSIG_MAGIC + struct.pack("<III", MSIG_VERSION, n, c))
        fh.write(values.astype("<f4").tobytes())


def read_signal(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MSIG_MAGIC:
        raise ValueError(f"{path}: not a signal file")
    version, n, c = struct.unpack("<III", data[4:16])
    if version != MSIG_VERSION:
        raise ValueError(f"{path}: unsupported signal version {version}")
    body = np.frombuffer(data[16:], dtype="<f4")
    if body.size != n * c:
        raise ValueError(f"{path}: expected {n * c} values, found {body.size}")
    return body.reshape(n, c).astype(np.float64)


def save_dataset(ds, directory):
    """Write one MSIG file per sample plus ``manifest.csv``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    manifest = os.path.join(directory, "manifest.csv")
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "label", "path"])
        for k, s in enumerate(ds.samples()):
            name = f"sample_{k:05d}.msig"
            write_signal(os.path.join(directory, name), s["signal"])
            w.writerow([s["subject_id"], s["label"], name])
    return manifest


def load_dataset(manifest, level):
    base = os.path.dirname(os.path.abspath(manifest))
    sigs, labels, subjects = [], [], []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "label", "path"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{manifest}: missing columns {sorted(missing)}")
        for row in reader:
            sigs.append(read_signal(os.path.join(base, row["path"])))
            labels.append(int(row["label"]))
            subjects.append(row["subject_id"])
    if not sigs:
        raise ValueError(f"{manifest}: no samples")
    return Dataset(level=level, signals=np.stack(sigs), labels=np.asarray(labels, dtype=np.int64), subject_ids=subjects)


@dataclass(frozen=True)
class Fold:
    train: np.ndarray
    test: np.ndarray
    test_subjects: tuple

    def digest(self):
        return hashlib.sha256(np.ascontiguousarray(self.test).tobytes()).hexdigest()[:16]


def grouped_kfold(subject_ids, k, seed=0):
    """Split sample indices into ``k`` folds with each subject in exactly one.

    Distinct subjects are shuffled with ``seed`` and dealt round-robin, so
    fold subject counts differ by at most one.
    """
    subjects = sorted(set(subject_ids))
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(subjects) < k:
        raise TooFewSubjects(f"{len(subjects)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    fold_of = {subjects[s]: pos % k for pos, s in enumerate(order)}
    ids = np.array([fold_of[s] for s in subject_ids])
    folds = []
    for f in range(k):
        test = np.flatnonzero(ids == f)
        train = np.flatnonzero(ids != f)
        members = tuple(sorted(s for s, v in fold_of.items() if v == f))
        folds.append(Fold(train=train, test=test, test_subjects=members))
    return folds


@dataclass(frozen=True)
class Metrics:
    acc: float
    sen: float
    spe: float
    gmean: float
    confusion: tuple  # ((TN, FP), (FN, TP))

    def as_dict(self):
        return {"acc": self.acc, "sen": self.sen, "spe": self.spe, "gmean": self.gmean}


def metrics_from_rates(acc, sen, spe, confusion=((0, 0), (0, 0))):
    return Metrics(acc=acc, sen=sen, spe=spe, gmean=float(np.sqrt(sen * spe)), confusion=confusion)


def compute_metrics(predictions, labels, positive_class=1):
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape:
        raise ValueError("predictions and labels differ in length")
    pos = lab == positive_class
    ppos = pred == positive_class
    tp = int(np.sum(pos & ppos))
    fn = int(np.sum(pos & ~ppos))
    tn = int(np.sum(~pos & ~ppos))
    fp = int(np.sum(~pos & ppos))
    if tp + fn == 0:
        raise NoPositives("no positive samples; sensitivity undefined")
    if tn + fp == 0:
        raise NoNegatives("no negative samples; specificity undefined")
    return metrics_from_rates(
        acc=(tp + tn) / lab.size,
        sen=tp / (tp + fn),
        spe=tn / (tn + fp),
        confusion=((tn, fp), (fn, tp)),
    )


def summarize(metrics):
    """Mean and sample standard deviation of each rate across folds."""
    out = {}
    for key in ("acc", "sen", "spe", "gmean"):
        vals = np.array([getattr(m, key) for m in metrics], dtype=np.float64)
        sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out[key] = (float(vals.mean()), sd)
    return out


def format_report(rows):
    """Tab-separated table; ``rows`` maps a model/task label to a summary."""
    lines = ["model\tACC\tSEN\tSPE\tGMean"]
    for name, summ in rows.items():
        cells = [f"{100 * summ[k][0]:.1f} ± {100 * summ[k][1]:.1f}" for k in ("acc", "sen", "spe", "gmean")]
        lines.append("\t".join([name] + cells))
    return "\n".join(lines) + "\n"
