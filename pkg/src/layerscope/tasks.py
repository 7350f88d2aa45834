"""Edge-probing datasets: NEL, COREF, REL, QUES and SUP.

A probing sample is a token sequence plus one or two labeled half-open spans.
Synthetic samples carry the tokens exactly as the QA model sees them
([CLS] question [SEP] context [SEP] ...), so spans index encoded positions.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import synthgen as sg
from .encoder import EncodedInput
from .persistence import JsonlError, iter_jsonl, write_jsonl
from .tensor import make_rng

TASKS = ("NEL", "COREF", "REL", "QUES", "SUP")
N_SPANS = {"NEL": 1, "COREF": 2, "REL": 2, "QUES": 1, "SUP": 1}
LABELS = {
    "NEL": ("person", "animal-kind", "none"),
    "COREF": ("same", "different"),
    "REL": ("afraid-of", "is-a", "none"),
    "QUES": sg.QUESTION_TYPES,
    "SUP": ("true", "false"),
}
DEFAULT_SIZES = {"train": 10_000, "dev": 2_000, "test": 2_000}


class FormatError(ValueError):
    pass


@dataclass
class ProbingSample:
    tokens: list[str]
    spans: list[tuple[int, int]]
    label: str
    task: str

    def __post_init__(self):
        self.spans = [tuple(int(v) for v in s) for s in self.spans]
        validate(self)

    def to_record(self) -> dict:
        return {"tokens": list(self.tokens), "spans": [list(s) for s in self.spans],
                "label": self.label, "task": self.task}


def validate(s: ProbingSample, closed_labels: bool = True) -> None:
    if s.task not in TASKS:
        raise FormatError(f"unknown task {s.task!r}")
    if len(s.spans) != N_SPANS[s.task]:
        raise FormatError(f"{s.task} needs {N_SPANS[s.task]} span(s), got {len(s.spans)}")
    for a, b in s.spans:
        if not 0 <= a < b <= len(s.tokens):
            raise FormatError(f"span ({a}, {b}) out of bounds for {len(s.tokens)} tokens")
    if s.task in ("COREF", "SUP") or (closed_labels and s.task == "QUES"):
        if s.label not in LABELS[s.task]:
            raise FormatError(f"label {s.label!r} not allowed for {s.task}")


def class_balance(samples: Iterable[ProbingSample]) -> dict[str, int]:
    return dict(sorted(Counter(s.label for s in samples).items()))


def label_inventory(task: str, samples: Sequence[ProbingSample] = ()) -> tuple[str, ...]:
    """Closed inventory for synthetic tasks, extended by any imported labels."""
    labels = list(LABELS[task])
    for s in samples:
        if s.label not in labels:
            labels.append(s.label)
    return tuple(labels)


# -- encoding ------------------------------------------------------------------

def encode_probe_sample(sample: ProbingSample, lexicon: sg.Lexicon) -> tuple[EncodedInput, list[tuple[int, int]]]:
    """Model input for a probing sample and its spans in encoded coordinates.

    Token lists that do not start with [CLS] are wrapped in [CLS] ... [SEP].
    """
    toks = list(sample.tokens)
    spans = list(sample.spans)
    if not toks or toks[0] != sg.CLS:
        toks = [sg.CLS] + toks + [sg.SEP]
        spans = [(a + 1, b + 1) for a, b in spans]
    first_sep = toks.index(sg.SEP) if sg.SEP in toks else len(toks) - 1
    segs = [0 if i <= first_sep else 1 for i in range(len(toks))]
    roles = ["special" if t in sg.SPECIALS else ("question" if i <= first_sep else "context")
             for i, t in enumerate(toks)]
    inp = EncodedInput(lexicon.ids(toks), segs, [1] * len(toks), roles, toks, [-1] * len(toks))
    return inp, spans


# -- QA pairs ------------------------------------------------------------------

@dataclass
class QAPair:
    tokens: list[str]
    sentences: list[tuple[int, int]] | None  # encoded-coordinate ranges of context sentences
    supporting: set[int] | None = None
    answer_span: tuple[int, int] | None = None  # for single-hop sources without SF labels
    source: sg.DeductionSample | None = field(default=None, repr=False)


def qa_pair_from_sample(sample: sg.DeductionSample, lexicon: sg.Lexicon, head: str = "classification") -> QAPair:
    inp, _ = sg.encode(sample, lexicon, head, max_len=None)
    ranges = [(sg.source_offset(sample, a), sg.source_offset(sample, a) + (b - a))
              for a, b in sample.sentence_ranges()]
    return QAPair(list(inp.tokens), ranges, set(sample.supporting_fact_indices), None, sample)


def single_hop_supporting(sentences: Sequence[tuple[int, int]], answer_span: tuple[int, int]) -> set[int]:
    """The sentence containing the answer phrase is the supporting fact."""
    a, b = answer_span
    return {i for i, (lo, hi) in enumerate(sentences) if lo <= a and b <= hi}


def build_supporting_fact_task(pairs: Iterable[QAPair]) -> list[ProbingSample]:
    out = []
    for n, p in enumerate(pairs):
        if not p.sentences:
            raise FormatError(f"QA pair {n} has no sentence boundaries")
        if len(p.sentences) < 2:
            continue
        sup = p.supporting
        if sup is None:
            if p.answer_span is None:
                raise FormatError(f"QA pair {n} has neither supporting facts nor an answer span")
            sup = single_hop_supporting(p.sentences, p.answer_span)
        for i, (lo, hi) in enumerate(p.sentences):
            out.append(ProbingSample(p.tokens, [(lo, hi)], "true" if i in sup else "false", "SUP"))
    return out


# -- question types ------------------------------------------------------------

def template_question_type(tokens: Sequence[str]) -> str:
    """Rule-based type of a templated question, independent of the generator table."""
    t = list(tokens)
    if "abbreviation" in t:
        return "abbreviation"
    first = t[0]
    if first == "who":
        return "human"
    if first == "where":
        return "location"
    if first == "how" and len(t) > 1 and t[1] == "many":
        return "numeric"
    if first == "why" or (first == "what" and "mean" in t):
        return "description"
    if first == "what" and "afraid" in t:
        return "entity"
    raise FormatError(f"question does not match any template: {' '.join(t)}")


def generate_questions(cfg: sg.GeneratorConfig, n: int, split: str = "train",
                       seed: int | None = None) -> list[tuple[list[str], str]]:
    """Templated questions with their coarse type, balanced over the six types."""
    lexicon = sg.Lexicon.from_config(cfg)
    names = sg.name_pools(cfg)[split]
    rng = make_rng(((cfg.seed if seed is None else seed) * 7919 + ("train", "dev", "test").index(split)) * 31 + 5)
    by_type: dict[str, list[str]] = {}
    for qtype, tmpl in sg.QUESTION_TEMPLATES:
        by_type.setdefault(qtype, []).append(tmpl)
    out = []
    for i in range(n):
        qtype = sg.QUESTION_TYPES[i % len(sg.QUESTION_TYPES)]
        tmpls = by_type[qtype]
        tmpl = tmpls[int(rng.integers(len(tmpls)))]
        k = int(rng.integers(len(lexicon.kinds)))
        q = tmpl.format(name=names[int(rng.integers(len(names)))], kind=lexicon.kinds[k][0],
                        kinds=lexicon.kinds[k][1])
        out.append((q.split(), qtype))
    order = rng.permutation(n)
    return [out[i] for i in order]


def build_question_type_task(questions: Iterable[tuple[Sequence[str], str]]) -> list[ProbingSample]:
    out = []
    for toks, qtype in questions:
        if qtype not in sg.QUESTION_TYPES:
            raise FormatError(f"unknown question type {qtype!r}")
        toks = list(toks)
        out.append(ProbingSample([sg.CLS] + toks + [sg.SEP], [(1, 1 + len(toks))], qtype, "QUES"))
    return out


# -- NEL / COREF / REL ---------------------------------------------------------

def build_entity_coref_relation_tasks(pairs: Iterable[QAPair], seed: int = 0) -> dict[str, list[ProbingSample]]:
    """One sample per label per QA pair where available, so classes stay balanced.

    Uses the generator's annotations; positions are mapped into encoded
    coordinates of the pair's tokens.
    """
    rng = make_rng(seed)
    nel, coref, rel = [], [], []
    for p in pairs:
        s = p.source
        if s is None:
            raise FormatError("synthetic annotations required (use import_edge_jsonl for external data)")
        off = lambda i: sg.source_offset(s, i)
        n_src = len(s.source_tokens)

        def span(a):
            lo, hi = a
            return (off(lo), off(lo) + (hi - lo))

        for cat in LABELS["NEL"]:
            cand = [i for i in range(n_src) if s.entity_categories[i] == cat]
            if cand:
                i = cand[int(rng.integers(len(cand)))]
                nel.append(ProbingSample(p.tokens, [span((i, i + 1))], cat, "NEL"))
        for flag, label in ((True, "same"), (False, "different")):
            cand = [c for c in s.coref_pairs if c[2] == flag]
            if cand:
                a, b, _ = cand[int(rng.integers(len(cand)))]
                coref.append(ProbingSample(p.tokens, [span(a), span(b)], label, "COREF"))
        for label in LABELS["REL"]:
            cand = [r for r in s.relations if r[2] == label]
            if cand:
                a, b, _ = cand[int(rng.integers(len(cand)))]
                rel.append(ProbingSample(p.tokens, [span(a), span(b)], label, "REL"))
    for name, xs in (("NEL", nel), ("COREF", coref), ("REL", rel)):
        for x in xs:
            for a, b in x.spans:
                if b > len(x.tokens):
                    raise FormatError(f"{name} span out of bounds")
    return {"NEL": nel, "COREF": coref, "REL": rel}


def _balance_coref(samples: list[ProbingSample]) -> list[ProbingSample]:
    pos = [s for s in samples if s.label == "same"]
    neg = [s for s in samples if s.label == "different"]
    n = min(len(pos), len(neg))
    keep, seen_p, seen_n = [], 0, 0
    for s in samples:
        if s.label == "same" and seen_p < n:
            keep.append(s)
            seen_p += 1
        elif s.label == "different" and seen_n < n:
            keep.append(s)
            seen_n += 1
    return keep


# -- synthetic task suite ------------------------------------------------------

def _per_pair(task: str, n_sentences: int) -> float:
    return {"NEL": 3, "COREF": 2, "REL": 3, "SUP": n_sentences}[task]


def build_probe_datasets(cfg: sg.GeneratorConfig, head: str = "classification",
                         sizes: dict[str, int] | None = None, seed: int | None = None,
                         tasks: Sequence[str] = TASKS) -> dict[str, dict[str, list[ProbingSample]]]:
    """Synthetic probing data, ``{task: {split: samples}}``.

    The QA-based tasks draw from one shared pool of stories per split (names
    disjoint across splits), so their inputs are shared between tasks.
    """
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    seed = cfg.seed + 1000 if seed is None else seed
    lexicon = sg.Lexicon.from_config(cfg)
    n_sent = cfg.n_distractor_sentences + 2
    out: dict[str, dict[str, list[ProbingSample]]] = {t: {} for t in tasks}
    for split, n in sizes.items():
        qa_tasks = [t for t in tasks if t != "QUES"]
        if qa_tasks:
            n_pairs = max(int(np.ceil(n / _per_pair(t, n_sent))) for t in qa_tasks) + 1
            stories = sg.generate(cfg, n_pairs, split, seed=seed)
            pairs = [qa_pair_from_sample(s, lexicon, head) for s in stories]
            ecr = build_entity_coref_relation_tasks(pairs, seed=seed * 3 + len(split))
            ecr["COREF"] = _balance_coref(ecr["COREF"])
            sup = build_supporting_fact_task(pairs)
            for t in qa_tasks:
                out[t][split] = (sup if t == "SUP" else ecr[t])[:n]
        if "QUES" in tasks:
            out["QUES"][split] = build_question_type_task(generate_questions(cfg, n, split, seed=seed))
    return out


# -- JSONL import/export ---------------------------------------------------------

def record_to_sample(rec: dict) -> ProbingSample:
    for key in ("tokens", "spans", "label", "task"):
        if key not in rec:
            raise FormatError(f"missing field {key!r}")
    toks, spans = rec["tokens"], rec["spans"]
    if not isinstance(toks, list) or not all(isinstance(t, str) for t in toks):
        raise FormatError("tokens must be a list of strings")
    if (not isinstance(spans, list)
            or not all(isinstance(s, list) and len(s) == 2 and all(isinstance(v, int) for v in s) for s in spans)):
        raise FormatError("spans must be a list of [start, end] integer pairs")
    if not isinstance(rec["label"], str) or not isinstance(rec["task"], str):
        raise FormatError("label and task must be strings")
    s = ProbingSample.__new__(ProbingSample)
    s.tokens, s.spans, s.label, s.task = list(toks), [tuple(v) for v in spans], rec["label"], rec["task"]
    validate(s, closed_labels=False)
    return s


def load_edge_jsonl(path) -> tuple[list[ProbingSample], list[tuple[int, str]]]:
    """Valid samples plus (line number, message) for every rejected line."""
    samples, errors = [], []
    for lineno, rec, err in iter_jsonl(path):
        if err is None:
            try:
                samples.append(record_to_sample(rec))
                continue
            except FormatError as exc:
                err = str(exc)
        errors.append((lineno, err))
    return samples, errors


def import_edge_jsonl(path) -> list[ProbingSample]:
    samples, errors = load_edge_jsonl(path)
    if errors:
        raise JsonlError(errors)
    return samples


def write_edge_jsonl(samples: Iterable[ProbingSample], path) -> None:
    write_jsonl((s.to_record() for s in samples), path)


def save_probe_datasets(datasets: dict[str, dict[str, list[ProbingSample]]], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for task, splits in datasets.items():
        for split, xs in splits.items():
            write_edge_jsonl(xs, d / f"{task}.{split}.jsonl")
