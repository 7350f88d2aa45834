"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with

    pytest tests/test_acceptance.py -v -s

Criterion 3 trains the full default grid for both QA heads and dominates
the wall time (one to two hours on a single core). Trained models are kept
in a module fixture and reused by criteria 4 to 6.
"""
from __future__ import annotations

import filecmp
import itertools
import re
import struct
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from layerscope import cli
from layerscope import persistence as P
from layerscope import tensor as T
from layerscope.analysis import analyze_trace, kmeans, pca
from layerscope.encoder import Batch, EncodedInput, Encoder, ModelConfig, forward_with_trace
from layerscope.probing import ProbeConfig, macro_f1, normalize_phase_matrix, probe_all_layers
from layerscope.report import DARK_CYAN, GRAY, ORANGE, RED, emit_layer_scatter
from layerscope.synthgen import GeneratorConfig, Lexicon, encode, generate_splits
from layerscope.tasks import build_probe_datasets
from layerscope.training import default_grid, fine_tune, predict, targets_of

pytestmark = pytest.mark.slow

N_SAMPLES = 10_000
SEEDS = (0, 1, 2, 3, 4)
CELL_CPU_LIMIT = 15 * 60


@pytest.fixture
def verdict(request, capsys):
    """Call as ``verdict(n, ok, detail)``; prints and records one summary line."""
    def emit(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash.setdefault(ACCEPT_KEY, []).append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return emit


ACCEPT_KEY = pytest.StashKey[list]()


def _max_rel_err(model, batch, targets, head):
    _, grads = model.loss_and_grads(batch, targets, head)
    params = {k: v for k, v in model.params.items() if k != "tok_emb"}
    used = sorted(set(batch.token_ids.ravel().tolist()) - set(model.config.frozen_token_ids))
    tok = model.params["tok_emb"]
    rows = tok[used]

    def f():
        tok[used] = rows
        layers, _ = model.forward(batch)
        last = layers[-1]
        if head == "classification":
            return T.softmax_cross_entropy(model.class_logits(last), targets)[0]
        lt = model.span_logits(last).transpose(0, 2, 1)
        return T.softmax_cross_entropy(lt, targets.reshape(-1), batch.mask[:, None, :])[0]

    err = T.grad_check(f, params, grads)
    err = max(err, T.grad_check(f, {"rows": rows}, {"rows": grads["tok_emb"][used]}))
    tok[used] = rows
    return err


# -- 1 ------------------------------------------------------------------------------

@pytest.mark.parametrize("head", ["classification", "span"])
def test_c1_gradient_correctness(head, verdict):
    cfg = ModelConfig(n_layers=4, d_model=16, n_heads=4, d_ff=32, vocab_size=24, max_len=16,
                      n_classes=5, seed=11, frozen_token_ids=(20, 21))
    m = Encoder(cfg)
    inputs = [
        EncodedInput([1, 5, 20, 7, 2, 9, 11, 3], [0, 0, 0, 0, 1, 1, 1, 1], [1] * 8, ["context"] * 8),
        EncodedInput([1, 4, 21, 2, 6, 0, 0, 0], [0, 0, 0, 1, 1, 0, 0, 0], [1] * 5 + [0] * 3,
                     ["context"] * 5 + ["pad"] * 3),
    ]
    batch = Batch.from_inputs(inputs)
    targets = np.array([3, 1]) if head == "classification" else np.array([[2, 5], [1, 3]])
    t0 = time.perf_counter()
    err = _max_rel_err(m, batch, targets, head)
    secs = time.perf_counter() - t0
    ok = err <= 1e-4 and secs < 60
    verdict(1, ok, f"{head} head: max rel err {err:.2e} (<= 1e-4) in {secs:.1f}s (< 60s)")
    assert ok


# -- 2 ------------------------------------------------------------------------------

def _principal_angles(a, b):
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    s = np.clip(np.linalg.svd(qa.T @ qb, compute_uv=False), -1.0, 1.0)
    return np.arccos(s)


def _exhaustive_kmeans(x, k):
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels.tolist())) < k:
            continue
        cost = sum(float(np.sum((x[labels == c] - x[labels == c].mean(0)) ** 2)) for c in range(k))
        best = min(best, cost)
    return best


# (predictions, golds, hand-computed macro-F1)
F1_CASES = [
    (["a", "b", "a", "b"], ["a", "a", "b", "b"], 0.5),
    (["a", "a", "a", "a"], ["a", "a", "b", "b"], 1 / 3),
    (["a", "a", "a"], ["a", "b", "c"], 1 / 3 * (2 * 1 / 3 / (1 + 1 / 3))),
    (["a", "b", "c"], ["a", "b", "c"], 1.0),
    (["x", "x", "y", "y", "y"], ["x", "y", "y", "y", "x"], (0.5 + 2 / 3) / 2),
]


def test_c2_numerical_oracles(verdict):
    rng = np.random.default_rng(2024)
    worst_val, worst_ang = 0.0, 0.0
    for _ in range(20):
        x = rng.normal(size=(10, 8))
        res = pca(x, out_dims=8)
        c = np.cov(x, rowvar=False)
        ref_vals, ref_vecs = np.linalg.eigh(c)
        ref_vals, ref_vecs = ref_vals[::-1], ref_vecs[:, ::-1]
        got_vals = np.asarray(res.eigenvalues)
        worst_val = max(worst_val, float(np.max(np.abs(got_vals - ref_vals))))
        for k in range(1, 8):
            ang = _principal_angles(np.asarray(res.components)[:k].T, ref_vecs[:, :k])
            worst_ang = max(worst_ang, float(ang.max()))
    pts = np.array([[0.0], [1.0], [10.0], [11.0]])
    km = kmeans(pts, 2, seed=0)
    opt = _exhaustive_kmeans(pts, 2)
    f1 = [abs(macro_f1(p, g) - want) for p, g, want in F1_CASES]
    ok_pca = worst_val <= 1e-8 and worst_ang <= 1e-6
    ok_km = abs(km.inertia - opt) < 1e-12
    ok_f1 = max(f1) < 1e-12
    ok = ok_pca and ok_km and ok_f1
    verdict(2, ok, f"PCA eigval err {worst_val:.1e}, max principal angle {worst_ang:.1e}; "
                   f"kmeans inertia {km.inertia:g} vs exhaustive {opt:g}; macro-F1 max dev {max(f1):.1e}")
    assert ok


# -- shared trained models -----------------------------------------------------------

@pytest.fixture(scope="module")
def corpus():
    gcfg = GeneratorConfig(seed=0)
    lex = Lexicon.from_config(gcfg)
    return gcfg, lex, generate_splits(gcfg, N_SAMPLES)


def _run_grid(corpus, head):
    gcfg, lex, splits = corpus
    data = {k: [encode(s, lex, head) for s in v] for k, v in splits.items()}
    mcfg = ModelConfig(vocab_size=len(lex), n_classes=gcfg.n_kinds, seed=0, frozen_token_ids=tuple(lex.name_ids()))
    cells, best = [], None
    for cfg in default_grid(seed=0):
        c0 = time.process_time()
        rep, model = fine_tune(Encoder(mcfg), data, head, cfg)
        cpu = time.process_time() - c0
        cells.append({"lr": cfg.learning_rate, "batch": cfg.batch_size, "sched": cfg.scheduler,
                      "dev": rep.best_dev, "test": rep.test_accuracy, "cpu": cpu})
        if best is None or rep.best_dev > best[0].best_dev:
            best = (rep, model)
    return {"cells": cells, "report": best[0], "model": best[1], "data": data}


@pytest.fixture(scope="module")
def grids(corpus):
    return {head: _run_grid(corpus, head) for head in ("classification", "span")}


# -- 3 ------------------------------------------------------------------------------

@pytest.mark.parametrize("head,target", [("classification", 0.95), ("span", 0.90)])
def test_c3_toy_qa_capability(grids, head, target, verdict):
    g = grids[head]
    rep = g["report"]
    slowest = max(c["cpu"] for c in g["cells"])
    for c in g["cells"]:
        print(f"  {head} lr={c['lr']:g} bs={c['batch']} {c['sched']}: dev {c['dev']:.4f} "
              f"test {c['test']:.4f} cpu {c['cpu']:.0f}s")
    ok = rep.test_accuracy >= target and slowest <= CELL_CPU_LIMIT
    verdict(3, ok, f"{head}: best-dev cell test accuracy {rep.test_accuracy:.4f} (>= {target}), "
                   f"slowest cell {slowest:.0f}s CPU (<= {CELL_CPU_LIMIT}s)")
    assert ok


# -- 4 and 5 ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def probe_runs(corpus, grids):
    gcfg, lex, _ = corpus
    model = grids["classification"]["model"]
    runs = []
    for s in SEEDS:
        datasets = build_probe_datasets(gcfg, "classification", seed=gcfg.seed + 1000 + s, tasks=["NEL", "SUP"])
        pcfg = ProbeConfig(seed=s)
        tuned = probe_all_layers(model, datasets, lex, pcfg, "fine-tuned")
        control = probe_all_layers(Encoder(ModelConfig.from_dict({**model.config.to_dict(), "seed": 100 + s})),
                                   datasets, lex, pcfg, "untrained")
        runs.append((s, tuned, control))
    return runs


def test_c4_probe_curve_sanity(probe_runs, verdict):
    hits = 0
    for s, tuned, control in probe_runs:
        sup, ctl = tuned["SUP"], control["SUP"]
        best, ctl_best = max(sup.scores), max(ctl.scores)
        good = best >= sup.chance + 0.15 and best >= ctl_best + 0.05
        hits += good
        print(f"  seed {s}: SUP best {best:.3f} @ layer {sup.best_layer}, chance {sup.chance:.3f}, "
              f"control best {ctl_best:.3f} -> {'ok' if good else 'miss'}")
    ok = hits >= 4
    verdict(4, ok, f"SUP beats chance+0.15 and control+0.05 in {hits}/5 seeds (need >= 4)")
    assert ok


def test_c5_phase_ordering(probe_runs, verdict):
    hits, normalized = 0, True
    for s, tuned, _ in probe_runs:
        nel, sup = tuned["NEL"].best_layer, tuned["SUP"].best_layer
        hits += nel <= sup
        pm = normalize_phase_matrix(tuned)
        for row in pm.values:
            if row.max() > row.min():
                normalized &= bool(row.min() == 0.0 and row.max() == 1.0)
            normalized &= bool(np.all((row >= 0.0) & (row <= 1.0)))
        print(f"  seed {s}: argmax NEL {nel}, argmax SUP {sup}")
    ok = hits >= 4 and normalized
    verdict(5, ok, f"argmax(NEL) <= argmax(SUP) in {hits}/5 seeds (need >= 4); rows in [0,1] exactly: {normalized}")
    assert ok


# -- 6 ------------------------------------------------------------------------------

EXPECTED_MARK = {"answer": ("diamond", RED), "question": ("star", ORANGE), "supporting-fact": ("circle", DARK_CYAN)}


def _check_roles(svg: bytes) -> bool:
    root = ET.fromstring(svg)
    ns = "{http://www.w3.org/2000/svg}"
    marks = [e for e in root.iter() if e.get("data-role") is not None]
    for e in marks:
        shape, color = EXPECTED_MARK.get(e.get("data-role"), ("circle", GRAY))
        tag = e.tag.replace(ns, "")
        if e.get("class") != shape or e.get("fill") != color:
            return False
        if tag != ("circle" if shape == "circle" else "polygon"):
            return False
    return len(marks) > 0


def _scatter_bundle(model, inp, seed=0):
    trace = forward_with_trace(model, inp)
    out = []
    for la in analyze_trace(trace, "pca", seed=seed):
        out.append((emit_layer_scatter(la.projection, highlight_clusters=True, seed=seed),
                    la.full_clusters.labels.tobytes(), la.plane_clusters.labels.tobytes()))
    return out


def test_c6_qualitative_pipeline(grids, verdict):
    g = grids["classification"]
    model, test = g["model"], g["data"]["test"]
    pred = predict(model, [x for x, _ in test], "classification")
    ok_mask = pred == targets_of(test, "classification")
    picks = [("correct", int(np.flatnonzero(ok_mask)[0]))]
    if (~ok_mask).any():
        picks.append(("incorrect", int(np.flatnonzero(~ok_mask)[0])))
    n_layers = model.config.n_layers + 1
    good = True
    notes = []
    for tag, i in picks:
        inp = test[i][0]
        first, second = _scatter_bundle(model, inp), _scatter_bundle(model, inp)
        complete = len(first) == n_layers and all(len(set(np.frombuffer(b[1], dtype=np.int64))) >= 1 for b in first)
        roles_ok = all(_check_roles(b[0]) for b in first)
        answer_drawn = all(re.search(rb'data-role="answer"', b[0]) for b in first)
        same = first == second
        good &= complete and roles_ok and same and bool(answer_drawn)
        notes.append(f"{tag}#{i}: {len(first)} layers, roles {'ok' if roles_ok else 'bad'}, "
                     f"deterministic {same}")
    verdict(6, good, "; ".join(notes))
    assert good


# -- 7 ------------------------------------------------------------------------------

TINY_MODEL = "n_layers = 4\nd_model = 16\nn_heads = 2\nd_ff = 32\n"
TINY_TRAIN = "epochs = 1\nbatch_size = 16\nlearning_rate = 0.001\n"


def _pipeline(root, seed=7):
    root.mkdir(parents=True, exist_ok=True)
    (root / "model.cfg").write_text(TINY_MODEL)
    (root / "train.cfg").write_text(TINY_TRAIN)
    run = root / "run"
    data, ck = run / "data", run / "model" / "model.lwck"
    for argv in (
        ["gen", "--out", str(data), "--n", "400", "--seed", str(seed)],
        ["train", "--data", str(data), "--out", str(run / "model"), "--config", str(root / "train.cfg"),
         "--model-config", str(root / "model.cfg"), "--eval-interval", "5", "--seed", str(seed)],
        ["trace", "--checkpoint", str(ck), "--data", str(data), "--out", str(run / "traces"),
         "--correct", "--incorrect", "--seed", str(seed)],
        ["probe", "--checkpoint", str(ck), "--data", str(data), "--out", str(run / "probes"),
         "--sizes", "train=200,dev=60,test=60", "--no-finetune", "--seed", str(seed)],
        ["analyze", "--traces", str(run / "traces"), "--out", str(run / "analysis"), "--clusters",
         "--seed", str(seed)],
        ["report", "--run", str(run)],
    ):
        assert cli.main(argv) == 0, argv
    return run


def _diff(a, b, rel=""):
    cmp = filecmp.dircmp(a, b)
    bad = [f"{rel}{x}" for x in cmp.left_only + cmp.right_only]
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    bad += [f"{rel}{x}" for x in mismatch + errors]
    for d in cmp.common_dirs:
        bad += _diff(a / d, b / d, f"{rel}{d}/")
    return bad


def test_c7_determinism(tmp_path, verdict):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    n_files = sum(1 for p in a.rglob("*") if p.is_file())
    bad = _diff(a, b)
    ok = not bad and n_files > 10
    verdict(7, ok, f"gen->report twice: {n_files} files, {len(bad)} differ {bad[:3]}")
    assert ok


# -- 8 ------------------------------------------------------------------------------

def test_c8_format_robustness(tmp_path, verdict):
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab_size=12, max_len=10, seed=3)
    m = Encoder(cfg)
    inp = EncodedInput([1, 2, 3, 4, 0, 0], [0, 0, 1, 1, 0, 0], [1, 1, 1, 1, 0, 0],
                       ["question", "question", "context", "answer", "pad", "pad"])
    checks = {}

    P.save_checkpoint(m, tmp_path / "m.lwck", meta={"seed": 3})
    m2, meta = P.load_checkpoint(tmp_path / "m.lwck")
    checks["checkpoint roundtrip"] = (m2.config == cfg and meta == {"seed": 3}
                                      and all(m2.params[k].tobytes() == v.tobytes() for k, v in m.params.items()))

    tr = forward_with_trace(m, inp)
    P.dump_trace(tr, tmp_path / "t.lwt")
    back = P.load_trace(tmp_path / "t.lwt")
    rel = max(float(np.max(np.abs(a[:4] - b) / np.maximum(np.abs(a[:4]), 1e-30))) for a, b in zip(tr.layers, back.layers))
    checks["trace roundtrip"] = rel <= 1e-6 and back.input.roles == inp.roles[:4]

    blob = P.checkpoint_bytes(m)

    def rejects(fn, data, exc):
        try:
            fn(data)
        except exc:
            return True
        except Exception:  # noqa: BLE001
            return False
        return False

    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    bumped = bytearray(blob)
    bumped[4:6] = struct.pack("<H", 9)
    checks["flipped byte"] = rejects(P.parse_checkpoint, bytes(flipped), P.CorruptFileError)
    checks["truncated checkpoint"] = all(rejects(P.parse_checkpoint, blob[:c], P.CorruptFileError)
                                         for c in (2, 8, len(blob) // 3, len(blob) - 1))
    checks["version bump"] = rejects(P.parse_checkpoint, bytes(bumped), P.VersionError)
    checks["wrong magic"] = (rejects(P.parse_trace, blob, P.CorruptFileError)
                             and rejects(P.parse_checkpoint, P.trace_bytes(tr), P.CorruptFileError))
    checks["truncated trace"] = rejects(P.parse_trace, P.trace_bytes(tr)[:-5], P.CorruptFileError)

    bad = tmp_path / "bad.jsonl"
    bad.write_bytes(b'{"a": 1}\r\n{"b": "\xff"}\n{oops\n')
    try:
        P.read_jsonl(bad)
        checks["jsonl line errors"] = False
    except P.JsonlError as exc:
        errs = dict(exc.errors)
        checks["jsonl line errors"] = set(errs) == {2, 3} and "byte offset" in errs[2]

    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    verdict(8, ok, f"{len(checks) - len(failed)}/{len(checks)} format checks passed" +
            (f"; failed: {failed}" if failed else ""))
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
