"""BERT-style post-norm encoder with per-layer hidden-state capture.

Layer 0 of every trace is the summed token + position + segment embedding;
layer n is the output of block n. Two heads sit on the last layer: a span
head (linear d_model -> 2, softmax over non-pad positions) and a sequence
classification head on the CLS vector.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T

ROLES = ("question", "context", "answer", "supporting-fact", "special", "pad")
ROLE_CODE = {r: i for i, r in enumerate(ROLES)}
SPAN_CAP = 8


class LengthError(ValueError):
    pass


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 256
    max_len: int = 128
    dropout_rate: float = 0.0
    seed: int = 0
    n_classes: int = 2
    # embedding rows that never receive updates (anonymous entity tokens)
    frozen_token_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        object.__setattr__(self, "frozen_token_ids", tuple(int(i) for i in self.frozen_token_ids))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen_token_ids"] = list(self.frozen_token_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["frozen_token_ids"] = tuple(d.get("frozen_token_ids", ()))
        return cls(**d)


@dataclass
class EncodedInput:
    token_ids: list[int]
    segment_ids: list[int]
    attention_mask: list[int]
    roles: list[str]
    tokens: list[str] = field(default_factory=list)
    sentence_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.token_ids)
        if not (len(self.segment_ids) == len(self.attention_mask) == len(self.roles) == n):
            raise ValueError("EncodedInput fields must have equal length")
        if not self.sentence_ids:
            self.sentence_ids = [-1] * n
        for m, r in zip(self.attention_mask, self.roles):
            if (m == 0) != (r == "pad"):
                raise ValueError("attention_mask must be 0 exactly on pad positions")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def n_real(self) -> int:
        return int(sum(self.attention_mask))

    def strip_padding(self) -> "EncodedInput":
        keep = [i for i, m in enumerate(self.attention_mask) if m]
        pick = lambda xs: [xs[i] for i in keep] if xs else []
        return EncodedInput(pick(self.token_ids), pick(self.segment_ids), pick(self.attention_mask),
                            pick(self.roles), pick(self.tokens), pick(self.sentence_ids))


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, T) int
    segment_ids: np.ndarray
    mask: np.ndarray  # (B, T) bool

    @classmethod
    def from_inputs(cls, inputs: Sequence[EncodedInput], pad_to: int | None = None) -> "Batch":
        n = max(len(x) for x in inputs)
        if pad_to is not None:
            n = max(n, pad_to)
        b = len(inputs)
        ids = np.zeros((b, n), dtype=np.int64)
        seg = np.zeros((b, n), dtype=np.int64)
        mask = np.zeros((b, n), dtype=bool)
        for i, x in enumerate(inputs):
            k = len(x)
            ids[i, :k] = x.token_ids
            seg[i, :k] = x.segment_ids
            mask[i, :k] = np.asarray(x.attention_mask, dtype=bool)
        return cls(ids, seg, mask)


@dataclass
class HiddenStateTrace:
    layers: list[np.ndarray]  # N+1 arrays, each (seq_len, d_model)
    input: EncodedInput

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1

    def non_pad(self) -> "HiddenStateTrace":
        keep = np.asarray(self.input.attention_mask, dtype=bool)
        return HiddenStateTrace([h[keep] for h in self.layers], self.input.strip_padding())


@dataclass
class SpanPrediction:
    start_probs: np.ndarray
    end_probs: np.ndarray
    span: tuple[int, int]


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = T.make_rng(cfg.seed)
    d, f = cfg.d_model, cfg.d_ff

    def lin(n_in, n_out):
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

    p: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)),
        "pos_emb": rng.normal(0.0, 0.5, size=(cfg.max_len, d)),
        "seg_emb": rng.normal(0.0, 0.5, size=(2, d)),
    }
    for l in range(cfg.n_layers):
        for w in ("q", "k", "v", "o"):
            p[f"l{l}.W{w}"] = lin(d, d)
            p[f"l{l}.b{w}"] = np.zeros(d)
        p[f"l{l}.ln1_g"] = np.ones(d)
        p[f"l{l}.ln1_b"] = np.zeros(d)
        p[f"l{l}.W1"] = lin(d, f)
        p[f"l{l}.b1"] = np.zeros(f)
        p[f"l{l}.W2"] = lin(f, d)
        p[f"l{l}.b2"] = np.zeros(d)
        p[f"l{l}.ln2_g"] = np.ones(d)
        p[f"l{l}.ln2_b"] = np.zeros(d)
    p["span_W"] = lin(d, 2)
    p["span_b"] = np.zeros(2)
    p["cls_W"] = lin(d, cfg.n_classes)
    p["cls_b"] = np.zeros(cfg.n_classes)
    return p


class Encoder:
    """Parameters live in ``self.params`` (name -> float64 array)."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params

    def copy(self) -> "Encoder":
        return Encoder(self.config, {k: v.copy() for k, v in self.params.items()})

    def check_batch(self, batch: Batch) -> None:
        cfg = self.config
        if batch.token_ids.shape[1] > cfg.max_len:
            raise LengthError(f"input length {batch.token_ids.shape[1]} exceeds max_len {cfg.max_len}")
        ids = batch.token_ids[batch.mask]
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise VocabError(f"token id outside vocabulary of size {cfg.vocab_size}")

    # -- forward -----------------------------------------------------------

    def forward(self, batch: Batch, rng: np.random.Generator | None = None, keep_cache: bool = False):
        """Returns (layers, cache): N+1 arrays of shape (B, T, d)."""
        self.check_batch(batch)
        cfg, p = self.config, self.params
        B, Tn = batch.token_ids.shape
        H = cfg.n_heads
        dh = cfg.d_model // H
        scale = 1.0 / math.sqrt(dh)
        rate = cfg.dropout_rate if rng is not None else 0.0
        key_mask = batch.mask[:, None, None, :]

        x = p["tok_emb"][batch.token_ids] + p["pos_emb"][:Tn][None] + p["seg_emb"][batch.segment_ids]
        layers = [x]
        caches = []
        for l in range(cfg.n_layers):
            pre = f"l{l}."

            def heads(t):
                return t.reshape(B, Tn, H, dh).transpose(0, 2, 1, 3)

            q = heads(x @ p[pre + "Wq"] + p[pre + "bq"])
            k = heads(x @ p[pre + "Wk"] + p[pre + "bk"])
            v = heads(x @ p[pre + "Wv"] + p[pre + "bv"])
            att = T.softmax_rows((q @ k.transpose(0, 1, 3, 2)) * scale, key_mask)
            ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, Tn, cfg.d_model)
            a = ctx @ p[pre + "Wo"] + p[pre + "bo"]
            a, drop1 = T.dropout(a, rate, rng)
            h, ln1 = T.layer_norm_forward(x + a, p[pre + "ln1_g"], p[pre + "ln1_b"])
            u = h @ p[pre + "W1"] + p[pre + "b1"]
            g, gcache = T.gelu_forward(u)
            f = g @ p[pre + "W2"] + p[pre + "b2"]
            f, drop2 = T.dropout(f, rate, rng)
            out, ln2 = T.layer_norm_forward(h + f, p[pre + "ln2_g"], p[pre + "ln2_b"])
            if keep_cache:
                caches.append(dict(x=x, q=q, k=k, v=v, att=att, ctx=ctx, drop1=drop1, ln1=ln1,
                                   h=h, gcache=gcache, g=g, drop2=drop2, ln2=ln2))
            x = out
            layers.append(x)
        cache = {"batch": batch, "blocks": caches, "layers": layers} if keep_cache else None
        return layers, cache

    # -- backward ----------------------------------------------------------

    def backward(self, cache, d_top: np.ndarray, grads: dict[str, np.ndarray] | None = None):
        """Backpropagate d(loss)/d(last layer) through all blocks and embeddings."""
        cfg, p = self.config, self.params
        batch: Batch = cache["batch"]
        B, Tn = batch.token_ids.shape
        H = cfg.n_heads
        dh = cfg.d_model // H
        scale = 1.0 / math.sqrt(dh)
        if grads is None:
            grads = {k: np.zeros_like(v) for k, v in p.items()}

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(B, Tn, cfg.d_model)

        def split(t):
            return t.reshape(B, Tn, H, dh).transpose(0, 2, 1, 3)

        def acc_linear(pre_name, inp, dout):
            grads[pre_name[0]] += np.tensordot(inp, dout, axes=([0, 1], [0, 1]))
            grads[pre_name[1]] += dout.sum(axis=(0, 1))

        dx = d_top
        for l in reversed(range(cfg.n_layers)):
            c = cache["blocks"][l]
            pre = f"l{l}."
            dr2, dg2, db2 = T.layer_norm_backward(dx, c["ln2"])
            grads[pre + "ln2_g"] += dg2
            grads[pre + "ln2_b"] += db2
            dh_ = dr2.copy()
            df = dr2 if c["drop2"] is None else dr2 * c["drop2"]
            acc_linear((pre + "W2", pre + "b2"), c["g"], df)
            du = T.gelu_backward(df @ p[pre + "W2"].T, c["gcache"])
            acc_linear((pre + "W1", pre + "b1"), c["h"], du)
            dh_ += du @ p[pre + "W1"].T

            dr1, dg1, db1 = T.layer_norm_backward(dh_, c["ln1"])
            grads[pre + "ln1_g"] += dg1
            grads[pre + "ln1_b"] += db1
            dx = dr1.copy()
            da = dr1 if c["drop1"] is None else dr1 * c["drop1"]
            acc_linear((pre + "Wo", pre + "bo"), c["ctx"], da)
            dctx = split(da @ p[pre + "Wo"].T)
            att = c["att"]
            datt = dctx @ c["v"].transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ dctx
            ds = T.softmax_backward(att, datt) * scale
            dq = ds @ c["k"]
            dk = ds.transpose(0, 1, 3, 2) @ c["q"]
            x_in = c["x"]
            for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
                dproj = merge(dproj)
                acc_linear((pre + "W" + name, pre + "b" + name), x_in, dproj)
                dx += dproj @ p[pre + "W" + name].T

        np.add.at(grads["tok_emb"], batch.token_ids, dx)
        grads["pos_emb"][:Tn] += dx.sum(axis=0)
        np.add.at(grads["seg_emb"], batch.segment_ids, dx)
        if cfg.frozen_token_ids:
            grads["tok_emb"][list(cfg.frozen_token_ids)] = 0.0
        return grads

    # -- heads -------------------------------------------------------------

    def span_logits(self, last: np.ndarray) -> np.ndarray:
        return last @ self.params["span_W"] + self.params["span_b"]

    def class_logits(self, last: np.ndarray) -> np.ndarray:
        return last[:, 0, :] @ self.params["cls_W"] + self.params["cls_b"]

    def loss_and_grads(self, batch: Batch, targets, head: str, rng=None):
        """Mean loss over the batch and gradients of every parameter.

        ``targets`` is an int array of class labels (classification) or a
        (B, 2) array of gold (start, end) positions (span).
        """
        layers, cache = self.forward(batch, rng=rng, keep_cache=True)
        last = layers[-1]
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        if head == "classification":
            logits = self.class_logits(last)
            loss, dlog, _ = T.softmax_cross_entropy(logits, np.asarray(targets))
            cls_vec = last[:, 0, :]
            grads["cls_W"] += cls_vec.T @ dlog
            grads["cls_b"] += dlog.sum(axis=0)
            d_top = np.zeros_like(last)
            d_top[:, 0, :] = dlog @ self.params["cls_W"].T
        elif head == "span":
            targets = np.asarray(targets)
            logits = self.span_logits(last)  # (B, T, 2)
            lt = logits.transpose(0, 2, 1)  # (B, 2, T)
            mask = batch.mask[:, None, :]
            loss, dlt, _ = T.softmax_cross_entropy(lt, targets.reshape(-1), mask)
            # per-row mean over 2B rows equals mean over batch of (start + end) / 2
            dlogits = dlt.transpose(0, 2, 1)
            grads["span_W"] += np.tensordot(last, dlogits, axes=([0, 1], [0, 1]))
            grads["span_b"] += dlogits.sum(axis=(0, 1))
            d_top = dlogits @ self.params["span_W"].T
        else:
            raise ValueError(f"unknown head {head!r}")
        self.backward(cache, d_top, grads)
        return loss, grads

    def predict(self, batch: Batch, head: str, span_cap: int = SPAN_CAP):
        """Class indices (B,) or spans (B, 2) for a batch."""
        layers, _ = self.forward(batch)
        last = layers[-1]
        if head == "classification":
            return np.argmax(self.class_logits(last), axis=-1)
        logits = self.span_logits(last)
        mask = batch.mask
        out = np.zeros((last.shape[0], 2), dtype=np.int64)
        for i in range(last.shape[0]):
            ps = T.softmax_rows(logits[i, :, 0], mask[i])
            pe = T.softmax_rows(logits[i, :, 1], mask[i])
            out[i] = best_span(ps, pe, mask[i], span_cap)
        return out


def best_span(start_probs, end_probs, valid=None, span_cap: int = SPAN_CAP) -> tuple[int, int]:
    """argmax of start[s] * end[e] over s <= e <= s + span_cap, both valid.

    Ties resolve to the smallest (s, e) in row-major order.
    """
    n = len(start_probs)
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    score = np.outer(start_probs, end_probs)
    s_idx, e_idx = np.indices((n, n))
    ok = (e_idx >= s_idx) & (e_idx - s_idx <= span_cap) & valid[:, None] & valid[None, :]
    score = np.where(ok, score, -1.0)
    flat = int(np.argmax(score))
    return flat // n, flat % n


# -- single-input API ------------------------------------------------------

def forward_with_trace(model: Encoder, inp: EncodedInput) -> HiddenStateTrace:
    layers, _ = model.forward(Batch.from_inputs([inp]))
    return HiddenStateTrace([h[0] for h in layers], inp)


def attention_weights(model: Encoder, inp: EncodedInput) -> list[np.ndarray]:
    """Per-block attention probabilities, each (n_heads, T, T)."""
    _, cache = model.forward(Batch.from_inputs([inp]), keep_cache=True)
    return [c["att"][0] for c in cache["blocks"]]


def span_head(model: Encoder, trace: HiddenStateTrace, span_cap: int = SPAN_CAP) -> SpanPrediction:
    last = trace.layers[-1]
    logits = last @ model.params["span_W"] + model.params["span_b"]
    valid = np.asarray(trace.input.attention_mask, dtype=bool)
    ps = T.softmax_rows(logits[:, 0], valid)
    pe = T.softmax_rows(logits[:, 1], valid)
    return SpanPrediction(ps, pe, best_span(ps, pe, valid, span_cap))


def seqclass_head(model: Encoder, trace: HiddenStateTrace, n_classes: int | None = None) -> np.ndarray:
    W, b = model.params["cls_W"], model.params["cls_b"]
    if n_classes is not None and W.shape[1] != n_classes:
        raise T.DimensionError(f"model has {W.shape[1]} classes, asked for {n_classes}")
    return T.softmax_rows(trace.layers[-1][0] @ W + b)


def parameter_checksum(model: Encoder) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name]).tobytes())
    return h.hexdigest()
