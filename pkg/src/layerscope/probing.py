"""Per-layer edge probing with two-layer MLP classifiers.

For every (task, layer) pair the labeled spans are mean-pooled from that
layer's frozen token vectors, concatenated, and fed to an independent MLP.
Scores are macro-F1 on held-out data.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import Batch, Encoder, HiddenStateTrace, parameter_checksum
from .synthgen import Lexicon
from .tasks import TASKS, ProbingSample, encode_probe_sample, label_inventory


class DegenerateDataError(ValueError):
    pass


class ProbeError(RuntimeError):
    def __init__(self, task: str, layer: int, cause: Exception):
        self.task, self.layer = task, layer
        super().__init__(f"probe {task} failed at layer {layer}: {cause}")


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 64
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 40
    patience: int = 3
    seed: int = 0


# -- metrics -----------------------------------------------------------------

def macro_f1(predictions: Sequence, golds: Sequence, classes: Sequence | None = None) -> float:
    """Unweighted mean F1 over classes that occur in ``golds``."""
    if len(predictions) != len(golds):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(golds)} golds")
    if len(golds) == 0:
        raise ValueError("no samples")
    pred = list(predictions)
    gold = list(golds)
    if classes is not None:
        allowed = set(classes)
        bad = [g for g in gold + pred if g not in allowed]
        if bad:
            raise ValueError(f"label {bad[0]!r} not in class inventory")
    scores = []
    for c in sorted(set(gold), key=str):
        tp = sum(1 for p, g in zip(pred, gold) if p == c and g == c)
        fp = sum(1 for p, g in zip(pred, gold) if p == c and g != c)
        fn = sum(1 for p, g in zip(pred, gold) if p != c and g == c)
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def chance_macro_f1(golds: Sequence) -> float:
    """Best of a prior-matched random guesser (1/C) and the majority-class predictor."""
    classes = sorted(set(golds), key=str)
    majority = max(classes, key=lambda c: (list(golds).count(c), str(c)))
    return max(1.0 / len(classes), macro_f1([majority] * len(golds), golds))


# -- pooling -----------------------------------------------------------------

def pool_spans(trace: HiddenStateTrace | np.ndarray, layer: int, spans: Sequence[tuple[int, int]],
               mask: Sequence[int] | None = None) -> np.ndarray:
    """Mean of token vectors per span, spans concatenated in order."""
    if isinstance(trace, HiddenStateTrace):
        h = trace.layers[layer]
        mask = trace.input.attention_mask
    else:
        h = np.asarray(trace)[layer] if np.ndim(trace) == 3 else np.asarray(trace)
    if not spans:
        raise ValueError("no spans to pool")
    valid = np.ones(len(h), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    parts = []
    for a, b in spans:
        if not 0 <= a < b <= len(h):
            raise ValueError(f"span ({a}, {b}) out of range for length {len(h)}")
        if not valid[a:b].all():
            raise ValueError(f"span ({a}, {b}) reaches into padding")
        parts.append(h[a:b].mean(axis=0))
    return np.concatenate(parts)


def extract_features(model: Encoder, samples: Sequence[ProbingSample], lexicon: Lexicon,
                     batch_size: int = 64) -> list[np.ndarray]:
    """Pooled span features for every layer: list of (n_samples, n_spans * d) arrays.

    Samples sharing a token sequence share one forward pass.
    """
    encoded = [encode_probe_sample(s, lexicon) for s in samples]
    groups: dict[tuple, list[int]] = {}
    for i, (inp, _) in enumerate(encoded):
        groups.setdefault(tuple(inp.token_ids) + (-1,) + tuple(inp.segment_ids), []).append(i)
    keys = list(groups)
    n_spans = len(samples[0].spans) if samples else 1
    d = model.config.d_model
    feats = [np.zeros((len(samples), n_spans * d)) for _ in range(model.config.n_layers + 1)]
    for start in range(0, len(keys), batch_size):
        chunk = keys[start:start + batch_size]
        inputs = [encoded[groups[k][0]][0] for k in chunk]
        layers, _ = model.forward(Batch.from_inputs(inputs))
        for j, k in enumerate(chunk):
            for i in groups[k]:
                spans = encoded[i][1]
                for n, h in enumerate(layers):
                    feats[n][i] = pool_spans(h[j], 0, spans, mask=None)
    return feats


# -- MLP probe ---------------------------------------------------------------

@dataclass
class ProbeClassifier:
    layer: int
    task: str
    labels: tuple[str, ...]
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    dev_history: list[float] = field(default_factory=list)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return T.relu(x @ self.W1 + self.b1) @ self.W2 + self.b2

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return T.softmax_rows(self.logits(x))

    def predict(self, x: np.ndarray) -> list[str]:
        return [self.labels[i] for i in np.argmax(self.logits(x), axis=1)]


def mlp_loss_and_grads(params: dict, x: np.ndarray, y: np.ndarray):
    u = x @ params["W1"] + params["b1"]
    h = T.relu(u)
    logits = h @ params["W2"] + params["b2"]
    loss, dlog, _ = T.softmax_cross_entropy(logits, y)
    g = {"W2": h.T @ dlog, "b2": dlog.sum(axis=0)}
    dh = (dlog @ params["W2"].T) * (u > 0)
    g["W1"] = x.T @ dh
    g["b1"] = dh.sum(axis=0)
    return loss, g


def train_probe(train_x: np.ndarray, train_y: Sequence[str], dev_x: np.ndarray, dev_y: Sequence[str],
                layer: int, task: str, config: ProbeConfig = ProbeConfig(),
                labels: Sequence[str] | None = None) -> ProbeClassifier:
    """Adam + cross-entropy with early stopping on dev macro-F1 (checked every epoch)."""
    labels = tuple(labels) if labels is not None else tuple(sorted(set(train_y)))
    if len(set(train_y)) < 2:
        raise DegenerateDataError(f"{task} layer {layer}: training data has a single class")
    index = {c: i for i, c in enumerate(labels)}
    y = np.array([index[c] for c in train_y])
    rng = T.make_rng(config.seed * 1009 + layer)
    d_in = train_x.shape[1]
    params = {
        "W1": rng.normal(0, 1 / math.sqrt(d_in), size=(d_in, config.hidden)),
        "b1": np.zeros(config.hidden),
        "W2": rng.normal(0, 1 / math.sqrt(config.hidden), size=(config.hidden, len(labels))),
        "b2": np.zeros(len(labels)),
    }
    opt = T.Adam(params, lr=config.learning_rate)
    probe = ProbeClassifier(layer, task, labels, **{k: v.copy() for k, v in params.items()})
    best, bad = -1.0, 0
    n = len(y)
    for _ in range(config.max_epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            _, g = mlp_loss_and_grads(params, train_x[idx], y[idx])
            opt.step(g)
        current = ProbeClassifier(layer, task, labels, **params)
        score = macro_f1(current.predict(dev_x), list(dev_y))
        probe.dev_history.append(score)
        if score > best:
            best, bad = score, 0
            for k, v in params.items():
                setattr(probe, k, v.copy())
        else:
            bad += 1
            if bad >= config.patience:
                break
    return probe


# -- layer sweeps ------------------------------------------------------------

@dataclass
class LayerProbeResult:
    task: str
    scores: list[float]  # test macro-F1 per layer 0..N
    model_tag: str = "fine-tuned"
    dev_scores: list[float] = field(default_factory=list)
    chance: float = float("nan")
    seed: int = 0
    class_balance: dict = field(default_factory=dict)

    @property
    def best_layer(self) -> int:
        return int(np.argmax(self.scores))


def probe_all_layers(model: Encoder, datasets: dict[str, dict[str, list[ProbingSample]]], lexicon: Lexicon,
                     config: ProbeConfig = ProbeConfig(), model_tag: str = "fine-tuned") -> dict[str, LayerProbeResult]:
    """Independent probe per (task, layer); the encoder is never modified."""
    before = parameter_checksum(model)
    results = {}
    for task in [t for t in TASKS if t in datasets] + [t for t in datasets if t not in TASKS]:
        splits = datasets[task]
        train, dev, test = splits["train"], splits["dev"], splits["test"]
        labels = label_inventory(task, list(train) + list(dev) + list(test)) if task in TASKS else None
        fx = {name: extract_features(model, xs, lexicon) for name, xs in (("train", train), ("dev", dev), ("test", test))}
        ys = {name: [s.label for s in xs] for name, xs in (("train", train), ("dev", dev), ("test", test))}
        res = LayerProbeResult(task, [], model_tag, chance=chance_macro_f1(ys["test"]), seed=config.seed,
                               class_balance={k: dict(sorted(_count(v).items())) for k, v in ys.items()})
        for layer in range(model.config.n_layers + 1):
            try:
                probe = train_probe(fx["train"][layer], ys["train"], fx["dev"][layer], ys["dev"],
                                    layer, task, config, labels)
                res.dev_scores.append(max(probe.dev_history))
                res.scores.append(macro_f1(probe.predict(fx["test"][layer]), ys["test"]))
            except Exception as exc:
                raise ProbeError(task, layer, exc) from exc
        results[task] = res
    if parameter_checksum(model) != before:
        raise RuntimeError("encoder parameters changed during probing")
    return results


def _count(xs):
    out: dict[str, int] = {}
    for x in xs:
        out[x] = out.get(x, 0) + 1
    return out


# -- phase matrix -------------------------------------------------------------

@dataclass
class PhaseMatrix:
    tasks: list[str]
    values: np.ndarray  # (n_tasks, n_layers + 1), each row min-max normalized
    raw: np.ndarray


def normalize_rows(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    out = np.empty_like(raw)
    for i, row in enumerate(raw):
        lo, hi = row.min(), row.max()
        out[i] = 0.5 if hi == lo else (row - lo) / (hi - lo)
    return out


def normalize_phase_matrix(results: dict[str, LayerProbeResult] | dict[str, Sequence[float]]) -> PhaseMatrix:
    rows = [t for t in TASKS if t in results] + [t for t in results if t not in TASKS]
    raw = [list(results[t].scores if isinstance(results[t], LayerProbeResult) else results[t]) for t in rows]
    if len({len(r) for r in raw}) > 1:
        raise ValueError("all tasks must be probed over the same layers")
    raw = np.array(raw, dtype=np.float64)
    return PhaseMatrix(rows, normalize_rows(raw), raw)


# -- CSV ------------------------------------------------------------------------

CSV_FIELDS = ("task", "layer", "split", "macro_f1", "model_tag", "seed")


def results_rows(results: Sequence[LayerProbeResult]) -> list[dict]:
    rows = []
    for r in results:
        for layer, s in enumerate(r.scores):
            rows.append({"task": r.task, "layer": layer, "split": "test", "macro_f1": f"{s:.6f}",
                         "model_tag": r.model_tag, "seed": r.seed})
    return rows


def results_csv(results: Sequence[LayerProbeResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(results_rows(results))
    return buf.getvalue()


def read_results_csv(text: str) -> list[LayerProbeResult]:
    by_key: dict[tuple, dict[int, float]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        key = (row["task"], row["model_tag"], int(row["seed"]))
        by_key.setdefault(key, {})[int(row["layer"])] = float(row["macro_f1"])
    out = []
    for (task, tag, seed), layers in by_key.items():
        out.append(LayerProbeResult(task, [layers[i] for i in sorted(layers)], tag, seed=seed))
    return out


def config_dict(config: ProbeConfig) -> dict:
    return asdict(config)
