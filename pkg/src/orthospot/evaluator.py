"""Verification scoring: every test utterance is enrolled once against all
others, trials are scored by cosine similarity, and each task reports EER."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import ModelParams, forward

TASKS = ("kws", "sv")


def extract_embeddings(params: ModelParams, clips: Sequence, features: Callable,
                       batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Pooled embeddings of both branches, each of shape (N, hidden).

    ``features`` maps a clip to its (T, D) feature matrix. Runs without a tape.
    """
    kws, sv = [], []
    for start in range(0, len(clips), batch_size):
        batch = np.stack([features(c) for c in clips[start:start + batch_size]])
        out_kws, out_sv = forward(params, batch)
        kws.append(out_kws.embedding.value)
        sv.append(out_sv.embedding.value)
    if not kws:
        hidden = params.gru_kws[-1].hidden_size
        return np.zeros((0, hidden)), np.zeros((0, hidden))
    return np.concatenate(kws), np.concatenate(sv)


@dataclass
class TrialSet:
    enroll: np.ndarray  # indices into the clip list
    test: np.ndarray
    targets: np.ndarray  # bool
    scores: np.ndarray | None = None

    def __len__(self):
        return self.enroll.shape[0]


def build_trials(labels, task: str = "", max_trials: int = 0,
                 rng: np.random.Generator | None = None) -> TrialSet:
    """All unordered pairs of distinct utterances; target means equal label.

    ``labels`` is either a list of clips (then ``task`` picks keyword or
    speaker ids) or an array of integer labels. ``max_trials`` > 0 keeps a
    random subset of that many pairs.
    """
    if len(labels) and hasattr(labels[0], "keyword_id"):
        if task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {task!r}")
        attr = "keyword_id" if task == "kws" else "speaker_id"
        labels = np.array([getattr(c, attr) for c in labels])
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 utterances to build trials, got {n}")
    enroll, test = np.triu_indices(n, k=1)
    if max_trials and max_trials < enroll.shape[0]:
        rng = rng or np.random.default_rng(0)
        keep = np.sort(rng.choice(enroll.shape[0], size=max_trials, replace=False))
        enroll, test = enroll[keep], test[keep]
    targets = labels[enroll] == labels[test]
    n_target = int(targets.sum())
    if n_target == 0 or n_target == targets.shape[0]:
        missing = "target" if n_target == 0 else "non-target"
        raise ValueError(f"trial set for task {task or '?'} has no {missing} pairs "
                         f"among {targets.shape[0]} trials; EER is undefined")
    return TrialSet(enroll, test, targets)


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0 when either vector has zero norm."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def score_trials(embeddings: np.ndarray, trials: TrialSet, block: int = 1 << 20) -> np.ndarray:
    """Cosine scores for every trial, computed in blocks of ``block`` pairs."""
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    unit = np.divide(embeddings, norms, out=np.zeros_like(embeddings), where=norms > 0)
    scores = np.empty(len(trials))
    for start in range(0, len(trials), block):
        e = unit[trials.enroll[start:start + block]]
        t = unit[trials.test[start:start + block]]
        scores[start:start + block] = np.einsum("ij,ij->i", e, t)
    np.clip(scores, -1.0, 1.0, out=scores)
    trials.scores = scores
    return scores


def compute_eer(scores, targets) -> float:
    """Equal error rate by a threshold sweep over the sorted unique scores.

    At threshold u, FAR is the share of non-targets scoring >= u and FRR the
    share of targets scoring < u; a final point past the top score has FAR 0,
    FRR 1. The EER is read where FRR - FAR changes sign, interpolating
    linearly between the two neighbouring operating points.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets).astype(bool)
    tar = np.sort(scores[targets])
    non = np.sort(scores[~targets])
    if tar.size == 0 or non.size == 0:
        raise ValueError(f"EER needs both classes; got {tar.size} targets and {non.size} non-targets")
    thresholds = np.unique(scores)
    frr = np.append(np.searchsorted(tar, thresholds, side="left") / tar.size, 1.0)
    far = np.append((non.size - np.searchsorted(non, thresholds, side="left")) / non.size, 0.0)
    diff = frr - far
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0:
        return float(far[k])
    frac = -diff[k - 1] / (diff[k] - diff[k - 1])
    return float(far[k - 1] + frac * (far[k] - far[k - 1]))


@dataclass
class TaskResult:
    eer: float
    n_trials: int
    n_targets: int


def evaluate(params: ModelParams, clips: Sequence, features: Callable, max_trials: int = 0,
             rng: np.random.Generator | None = None, batch_size: int = 256) -> dict[str, TaskResult]:
    """EER of both tasks on ``clips``, embeddings from the matching branch."""
    emb = dict(zip(TASKS, extract_embeddings(params, clips, features, batch_size)))
    out = {}
    for task in TASKS:
        trials = build_trials(clips, task, max_trials, rng)
        scores = score_trials(emb[task], trials)
        out[task] = TaskResult(compute_eer(scores, trials.targets), len(trials), int(trials.targets.sum()))
    return out


def write_trial_dump(path, clips: Sequence, trials: TrialSet) -> None:
    """``enroll_path<TAB>test_path<TAB>target<TAB>score`` per trial."""
    if trials.scores is None:
        raise ValueError("trials have not been scored")
    with open(path, "w", encoding="utf-8") as fh:
        for e, t, y, s in zip(trials.enroll, trials.test, trials.targets, trials.scores):
            fh.write(f"{clips[e].source_path}\t{clips[t].source_path}\t{int(y)}\t{float(s)!r}\n")


def write_eer_report(path_stem, results: dict[str, TaskResult], split: str) -> tuple[str, str]:
    """Write ``<stem>.txt`` (for people) and ``<stem>.kv`` (key=value per line)."""
    txt = f"{path_stem}.txt"
    kv = f"{path_stem}.kv"
    with open(txt, "w", encoding="utf-8") as fh:
        fh.write(f"split: {split}\n")
        for task, r in results.items():
            fh.write(f"{task.upper()} EER: {100 * r.eer:.3f}% over {r.n_trials} trials ({r.n_targets} target)\n")
    with open(kv, "w", encoding="utf-8") as fh:
        fh.write(f"split={split}\n")
        for task, r in results.items():
            fh.write(f"eer_{task}={float(r.eer)!r}\nn_trials_{task}={r.n_trials}\nn_targets_{task}={r.n_targets}\n")
    return txt, kv
