"""Disentanglement metrics: linear probes, swap accuracy, consistency, entropies.

Evaluation CSV columns: ``metric, embedding, factor, value, n``. Rows:

* ``probe``: held-out accuracy of a linear probe from embedding ``s``/``d``
  to factor ``identity``/``action``.
* ``consistency``: agreement between the classifier's predictions on real
  test sequences and on their reconstructions (embedding column names the
  classifier's embedding).
* ``entropy``: inter (``H(y)``) and intra (``H(y|x)``) entropy of classifier
  predictions on unconditionally generated sequences, averaged over the
  identity and action classifiers (nats).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax, xlogy

from .trainer import ModelState, generate, infer, reconstruct, swap

EVAL_COLUMNS = ["metric", "embedding", "factor", "value", "n"]


@dataclass
class ProbeResult:
    source_embedding: str
    target_factor: str
    accuracy: float
    n_test: int


@dataclass
class LinearProbe:
    """Standardize, then multinomial logistic regression."""

    mean: np.ndarray
    std: np.ndarray
    weights: np.ndarray  # (D, K)
    bias: np.ndarray  # (K,)
    train_accuracy: float = float("nan")

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float64) - self.mean) / self.std) @ self.weights + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x), axis=1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(1)


def fit_logistic(x: np.ndarray, y: np.ndarray, n_classes: int, l2: float = 1e-3) -> Tuple[np.ndarray, np.ndarray]:
    """Mean cross-entropy + l2/2 |W|^2, minimized with L-BFGS.

    Using the mean (not the sum) makes the optimum invariant to duplicating
    the training set.
    """
    x = np.asarray(x, dtype=np.float64)
    n, dim = x.shape
    onehot = np.eye(n_classes)[y]

    def objective(theta):
        w = theta[: dim * n_classes].reshape(dim, n_classes)
        b = theta[dim * n_classes :]
        logp = log_softmax(x @ w + b, axis=1)
        loss = -(onehot * logp).sum() / n + 0.5 * l2 * (w * w).sum()
        resid = (np.exp(logp) - onehot) / n
        grad_w = x.T @ resid + l2 * w
        return loss, np.concatenate([grad_w.ravel(), resid.sum(0)])

    theta0 = np.zeros(dim * n_classes + n_classes)
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B", options={"maxiter": 2000, "gtol": 1e-10, "ftol": 1e-14})
    w = res.x[: dim * n_classes].reshape(dim, n_classes)
    return w, res.x[dim * n_classes :]


def fit_probe(x: np.ndarray, y: np.ndarray, n_classes: Optional[int] = None, l2: float = 1e-3) -> LinearProbe:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n_classes = n_classes or int(y.max()) + 1
    mean = x.mean(0)
    std = x.std(0)
    std[std < 1e-8] = 1.0
    w, b = fit_logistic((x - mean) / std, y, n_classes, l2)
    probe = LinearProbe(mean, std, w, b)
    probe.train_accuracy = float((probe.predict(x) == y).mean())
    return probe


def split_indices(n: int, seed: int, test_fraction: float = 0.2) -> Tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return perm[n_test:], perm[:n_test]


def fit_linear_probe(
    embeddings: np.ndarray,
    labels: np.ndarray,
    split_seed: int = 0,
    source: str = "",
    target: str = "",
    min_per_class: int = 10,
) -> Tuple[LinearProbe, ProbeResult]:
    """Fit on a random 80% split and report accuracy on the held-out 20%."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.min() < min_per_class:
        raise ValueError(f"need >= 2 classes with >= {min_per_class} samples each, got counts {counts.tolist()}")
    train_idx, test_idx = split_indices(len(labels), split_seed)
    probe = fit_probe(embeddings[train_idx], labels[train_idx], int(labels.max()) + 1)
    acc = float((probe.predict(embeddings[test_idx]) == labels[test_idx]).mean())
    return probe, ProbeResult(source, target, acc, len(test_idx))


def consistency_score(real_seqs, generated_seqs, classify: Callable[[np.ndarray], np.ndarray]) -> float:
    """Fraction of pairs on which ``classify`` gives the same label to the real and generated sequence."""
    if len(real_seqs) != len(generated_seqs):
        raise ValueError(f"unpaired inputs: {len(real_seqs)} real vs {len(generated_seqs)} generated")
    if len(real_seqs) == 0:
        raise ValueError("no pairs to compare")
    return float((np.asarray(classify(real_seqs)) == np.asarray(classify(generated_seqs))).mean())


def entropies(probs: np.ndarray, atol: float = 1e-6) -> Tuple[float, float]:
    """(H(y) of the mean prediction, mean per-sequence H(y|x)), in nats."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or (probs < 0).any() or not np.allclose(probs.sum(1), 1.0, atol=atol, rtol=0):
        raise ValueError("every row must be a probability vector")
    marginal = probs.mean(0)
    inter = float(-xlogy(marginal, marginal).sum())
    intra = float(-xlogy(probs, probs).sum(1).mean())
    return inter, intra


# -- model-level evaluation ----------------------------------------------------


def embed_sequences(state: ModelState, frames, batch: int = 50) -> Dict[str, np.ndarray]:
    """Posterior means of s and d for every sequence."""
    frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float32)
    s, d = [], []
    for k in range(0, len(frames), batch):
        f = infer(state, frames[k : k + batch])
        s.append(f.s.numpy())
        d.append(f.d.numpy())
    return {"s": np.concatenate(s), "d": np.concatenate(d)}


@dataclass
class SequenceClassifier:
    """Predicts a ground-truth factor from frames via model embedding + linear probe."""

    state: ModelState
    embedding: str
    probe: LinearProbe

    def predict_proba(self, frames) -> np.ndarray:
        return self.probe.predict_proba(embed_sequences(self.state, frames)[self.embedding])

    def __call__(self, frames) -> np.ndarray:
        return self.predict_proba(frames).argmax(1)


def _to_numpy(x) -> np.ndarray:
    return x.numpy() if isinstance(x, torch.Tensor) else np.asarray(x)


def _batched_generate(fn, n: int, batch: int = 50) -> np.ndarray:
    return np.concatenate([_to_numpy(fn(slice(k, min(n, k + batch)))) for k in range(0, n, batch)])


def _donor_pairs(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each index a donor index with a different label (same label if none exists)."""
    donors = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        pool = np.flatnonzero(labels != lab)
        donors[i] = rng.choice(pool if len(pool) else np.arange(len(labels)))
    return donors


@dataclass
class EvalReport:
    probes: Dict[Tuple[str, str], ProbeResult] = field(default_factory=dict)
    swap_accuracy: Dict[str, float] = field(default_factory=dict)
    consistency: Dict[str, float] = field(default_factory=dict)
    inter_entropy: Dict[str, float] = field(default_factory=dict)
    intra_entropy: Dict[str, float] = field(default_factory=dict)
    n_test: int = 0
    n_generated: int = 0

    def accuracy(self, embedding: str, factor: str) -> float:
        return self.probes[(embedding, factor)].accuracy

    def rows(self) -> List[Dict]:
        rows = [
            {"metric": "probe", "embedding": e, "factor": f, "value": r.accuracy, "n": r.n_test}
            for (e, f), r in self.probes.items()
        ]
        for factor, emb in (("identity", "s"), ("action", "d")):
            if factor in self.consistency:
                rows.append({"metric": "consistency", "embedding": emb, "factor": factor,
                             "value": self.consistency[factor], "n": self.n_test})
        if self.inter_entropy:
            rows.append({"metric": "entropy", "embedding": "inter", "factor": "mean",
                         "value": float(np.mean(list(self.inter_entropy.values()))), "n": self.n_generated})
            rows.append({"metric": "entropy", "embedding": "intra", "factor": "mean",
                         "value": float(np.mean(list(self.intra_entropy.values()))), "n": self.n_generated})
        return rows


def write_eval_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, EVAL_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in report.rows():
            w.writerow({**row, "value": f"{row['value']:.6f}"})


def evaluate(
    state: ModelState,
    dataset,
    split_seed: int = 0,
    seed: int = 0,
    n_generate: int = 100,
    swaps: bool = True,
    generation: bool = True,
) -> EvalReport:
    """Probe matrix on a held-out 20%, then swap, consistency and entropy measurements.

    Swap accuracy: each held-out sequence receives the identity (or the
    dynamics) of a held-out donor carrying a different label; the result is
    re-encoded and the s->identity (d->action) probe must name the donor's
    label.
    """
    emb = embed_sequences(state, dataset.frames)
    labels = {"identity": dataset.identity, "action": dataset.action}
    report = EvalReport()
    probes = {}
    for e in ("s", "d"):
        for f in ("identity", "action"):
            probe, res = fit_linear_probe(emb[e], labels[f], split_seed, e, f)
            probes[(e, f)] = probe
            report.probes[(e, f)] = res
    _, test = split_indices(len(dataset), split_seed)
    report.n_test = len(test)
    id_clf = SequenceClassifier(state, "s", probes[("s", "identity")])
    act_clf = SequenceClassifier(state, "d", probes[("d", "action")])
    x_test = dataset.frames[test]
    steps = dataset.frames.shape[1]

    if swaps:
        rng = np.random.default_rng(seed)
        for factor, clf, key in (("identity", id_clf, "identity"), ("dynamics", act_clf, "action")):
            donors = test[_donor_pairs(labels[key][test], rng)]
            out = _batched_generate(
                lambda sl: swap(state, x_test[sl], dataset.frames[donors[sl]], factor, steps), len(test)
            )
            report.swap_accuracy[factor] = float((clf(out) == labels[key][donors]).mean())

    if generation:
        recon = _batched_generate(lambda sl: reconstruct(state, x_test[sl], steps), len(test))
        report.consistency["identity"] = consistency_score(x_test, recon, id_clf)
        report.consistency["action"] = consistency_score(x_test, recon, act_clf)

        gen = _batched_generate(
            lambda sl: generate(state, steps, seed=seed + sl.start, n=sl.stop - sl.start), n_generate
        )
        report.n_generated = n_generate
        for name, clf in (("identity", id_clf), ("action", act_clf)):
            inter, intra = entropies(clf.predict_proba(gen))
            report.inter_entropy[name] = inter
            report.intra_entropy[name] = intra
    return report
