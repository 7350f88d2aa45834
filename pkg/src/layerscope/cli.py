"""Command-line pipeline: gen, train, trace, probe, analyze, report.

Stages talk only through files. Every subcommand writes under its --out
directory and echoes the seed into each artifact it writes.

Exit codes: 0 success, 1 validation error (bad flags, configs or inputs),
2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

log = logging.getLogger("layerscope")


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


# -- config files ----------------------------------------------------------------

def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {n}: expected key = value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ValidationError(f"config line {n}: empty key")
        out[k] = v
    return out


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(int(x) for x in value.replace(",", " ").split())
    return value


def config_from_kv(cls, kv: dict[str, str], **overrides):
    """Build dataclass ``cls`` from string pairs, coercing by the field defaults."""
    base = cls()
    fields = {f.name for f in dataclasses.fields(cls)}
    vals = {}
    for k, v in kv.items():
        if k not in fields:
            raise ValidationError(f"unknown {cls.__name__} field {k!r}")
        try:
            vals[k] = _coerce(v, getattr(base, k))
        except ValueError as exc:
            raise ValidationError(f"{cls.__name__}.{k}: {exc}") from exc
    vals.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**vals)
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"invalid {cls.__name__}: {exc}") from exc


def load_config(cls, path, **overrides):
    kv = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"config file not found: {p}")
        kv = parse_kv(p.read_text(encoding="utf-8"))
    return config_from_kv(cls, kv, **overrides)


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise ValidationError(f"{what} not found: {path}")
    return path


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- shared loaders -------------------------------------------------------------------

def _load_gen(data_dir: Path):
    from .synthgen import GeneratorConfig, Lexicon

    blob = json.loads(_need(data_dir / "gen_config.json", "generator config").read_text(encoding="utf-8"))
    cfg = GeneratorConfig(**blob["config"])
    return cfg, Lexicon.from_config(cfg)


def _load_split(data_dir: Path, split: str):
    from .persistence import read_jsonl
    from .synthgen import DeductionSample

    recs = read_jsonl(_need(data_dir / f"{split}.jsonl", f"{split} split"))
    return [DeductionSample.from_dict({k: v for k, v in r.items() if k != "seed"}) for r in recs]


def _base_model_config(lexicon, gen_cfg, path=None, seed=None):
    from .encoder import ModelConfig

    return load_config(ModelConfig, path, vocab_size=len(lexicon), n_classes=gen_cfg.n_kinds,
                       frozen_token_ids=tuple(lexicon.name_ids()), seed=seed)


# -- subcommands --------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .persistence import write_jsonl
    from .synthgen import GeneratorConfig, generate_splits

    cfg = load_config(GeneratorConfig, args.config, seed=args.seed)
    if args.n < 3:
        raise ValidationError("--n must be at least 3")
    out = _out_dir(args.out)
    splits = generate_splits(cfg, args.n)
    for name, samples in splits.items():
        write_jsonl(({**s.to_dict(), "seed": cfg.seed} for s in samples), out / f"{name}.jsonl")
    _dump_json({"config": dataclasses.asdict(cfg), "n": args.n, "seed": cfg.seed,
                "sizes": {k: len(v) for k, v in splits.items()}}, out / "gen_config.json")
    print(f"wrote {sum(len(v) for v in splits.values())} samples to {out}")
    return 0


def cmd_train(args) -> int:
    from .encoder import Encoder
    from .persistence import save_checkpoint, write_jsonl
    from .synthgen import encode
    from .training import TrainConfig, default_grid, fine_tune, grid_search

    data_dir = Path(args.data)
    gen_cfg, lex = _load_gen(data_dir)
    data = {s: [encode(x, lex, args.head) for x in _load_split(data_dir, s)] for s in ("train", "dev", "test")}
    mcfg = _base_model_config(lex, gen_cfg, args.model_config, args.seed)
    out = _out_dir(args.out)
    if args.grid:
        grid = default_grid(seed=mcfg.seed, eval_interval_steps=args.eval_interval or 200)
        rep, best = grid_search(lambda: Encoder(mcfg), data, args.head, grid)
        report = rep.best
        _dump_json({**rep.to_dict(), "seed": mcfg.seed}, out / "grid_report.json")
    else:
        tcfg = load_config(TrainConfig, args.config, seed=mcfg.seed, eval_interval_steps=args.eval_interval)
        report, best = fine_tune(Encoder(mcfg), data, args.head, tcfg,
                                 progress=lambda d: log.info("step %d dev %.4f", d["step"], d["dev_accuracy"]))
    _dump_json({"seed": mcfg.seed, "model": mcfg.to_dict(), "train": report.config}, out / "train_config.json")
    _dump_json({**report.to_dict(), "seed": mcfg.seed}, out / "train_report.json")
    write_jsonl(({**r, "seed": mcfg.seed} for r in report.log), out / "train_log.jsonl")
    save_checkpoint(best, out / "model.lwck", meta={"head": args.head, "seed": mcfg.seed,
                                                    "data": str(data_dir.name), "best_step": report.best_step})
    print(f"best dev {report.best_dev:.4f} at step {report.best_step}; test {report.test_accuracy}")
    return 0


def _select(n_total: int, correct: Sequence[bool], args, rng) -> list[int]:
    want = []
    if args.correct or not args.incorrect:
        want.append(True)
    if args.incorrect:
        want.append(False)
    chosen = []
    for flag in want:
        pool = [i for i in range(n_total) if correct[i] == flag]
        if not pool:
            print(f"no {'correct' if flag else 'incorrect'} samples")
            continue
        k = min(args.n, len(pool))
        chosen += sorted(int(i) for i in rng.choice(pool, size=k, replace=False))
    return chosen


def cmd_trace(args) -> int:
    from .encoder import forward_with_trace
    from .persistence import dump_trace, load_checkpoint, write_jsonl
    from .synthgen import encode
    from .tensor import make_rng
    from .training import evaluate_qa, predict, targets_of

    model, meta = load_checkpoint(_need(Path(args.checkpoint), "checkpoint"))
    head = meta.get("head", "classification")
    data_dir = Path(args.data)
    _, lex = _load_gen(data_dir)
    samples = _load_split(data_dir, args.split)
    examples = [encode(s, lex, head) for s in samples]
    pred = predict(model, [x for x, _ in examples], head)
    gold = targets_of(examples, head)
    ok = (pred == gold) if pred.ndim == 1 else (pred == gold).all(axis=1)
    out = _out_dir(args.out)
    seed = args.seed if args.seed is not None else model.config.seed
    chosen = _select(len(samples), ok.tolist(), args, make_rng(seed))
    index = []
    for i in chosen:
        inp, _ = examples[i]
        name = f"{args.split}_{i:05d}.lwt"
        dump_trace(forward_with_trace(model, inp), out / name)
        index.append({"file": name, "index": i, "split": args.split, "correct": bool(ok[i]),
                      "tokens": inp.tokens, "roles": inp.roles, "sentence_ids": inp.sentence_ids,
                      "segment_ids": inp.segment_ids, "seed": seed})
    write_jsonl(index, out / "index.jsonl")
    print(f"traced {len(index)} samples (split accuracy {evaluate_qa(model, examples, head):.4f})")
    return 0


def _parse_sizes(text):
    if text is None:
        return None
    out = {}
    for part in text.split(","):
        k, _, v = part.partition("=")
        if k.strip() not in ("train", "dev", "test") or not v.strip().isdigit():
            raise ValidationError(f"bad --sizes entry {part!r}; expected train=N,dev=N,test=N")
        out[k.strip()] = int(v)
    if set(out) != {"train", "dev", "test"}:
        raise ValidationError("--sizes needs train, dev and test")
    return out


def cmd_probe(args) -> int:
    from .encoder import Encoder
    from .persistence import load_checkpoint
    from .probing import ProbeConfig, config_dict, normalize_phase_matrix, probe_all_layers, results_csv
    from .report import emit_phase_heatmap, emit_probe_curves
    from .tasks import TASKS, build_probe_datasets

    model, meta = load_checkpoint(_need(Path(args.checkpoint), "checkpoint"))
    gen_cfg, lex = _load_gen(Path(args.data))
    tasks = args.tasks or list(TASKS)
    bad = [t for t in tasks if t not in TASKS]
    if bad:
        raise ValidationError(f"unknown task(s) {bad}; choose from {list(TASKS)}")
    seed = args.seed if args.seed is not None else model.config.seed
    pcfg = load_config(ProbeConfig, args.config, seed=seed)
    datasets = build_probe_datasets(gen_cfg, meta.get("head", "classification"), _parse_sizes(args.sizes),
                                    seed=gen_cfg.seed + 1000, tasks=tasks)
    results = list(probe_all_layers(model, datasets, lex, pcfg, "fine-tuned").values())
    if args.no_finetune:
        control = Encoder(model.config)
        results += list(probe_all_layers(control, datasets, lex, pcfg, "untrained").values())
    out = _out_dir(args.out)
    (out / "probes.csv").write_text(results_csv(results), encoding="utf-8")
    svg, _ = emit_probe_curves(results, seed)
    (out / "probes.svg").write_bytes(svg)
    tuned = {r.task: r for r in results if r.model_tag == "fine-tuned"}
    (out / "phases.svg").write_bytes(emit_phase_heatmap(normalize_phase_matrix(tuned), seed))
    _dump_json({"seed": seed, "probe": config_dict(pcfg), "tasks": tasks, "no_finetune": args.no_finetune,
                "sizes": {t: {s: len(x) for s, x in d.items()} for t, d in datasets.items()}},
               out / "probe_config.json")
    _dump_json({"seed": seed, "results": [dataclasses.asdict(r) for r in results]}, out / "probe_results.json")
    for r in results:
        print(f"{r.task:6s} {r.model_tag:10s} best layer {r.best_layer} " +
              " ".join(f"{s:.3f}" for s in r.scores))
    return 0


def cmd_analyze(args) -> int:
    from .analysis import analyze_trace
    from .persistence import load_trace, read_jsonl
    from .report import emit_layer_scatter

    tdir = Path(args.traces)
    index = read_jsonl(_need(tdir / "index.jsonl", "trace index"))
    if args.k is not None and args.k < 1:
        raise ValidationError("--k must be positive")
    out = _out_dir(args.out)
    seed = args.seed if args.seed is not None else 0
    summary = []
    for entry in index:
        trace = load_trace(_need(tdir / entry["file"], "trace"), tokens=entry["tokens"],
                           sentence_ids=entry["sentence_ids"], segment_ids=entry["segment_ids"])
        sub = _out_dir(out / Path(entry["file"]).stem)
        layers = analyze_trace(trace, args.method, args.k, seed)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "position", "token", "role", "sentence", "x", "y", "cluster", "seed"])
        for la in layers:
            p = la.projection
            for i in range(len(p)):
                w.writerow([p.layer, i, p.tokens[i], p.roles[i], p.sentences[i],
                            f"{p.x[i]:.6f}", f"{p.y[i]:.6f}", int(p.clusters[i]), seed])
            (sub / f"scatter_layer_{p.layer}.svg").write_bytes(
                emit_layer_scatter(p, highlight_clusters=args.clusters, color_by=args.color_by, seed=seed))
        (sub / "projections.csv").write_text(buf.getvalue(), encoding="utf-8")
        stats = [{"layer": la.projection.layer, "inertia": round(la.full_clusters.inertia, 6),
                  "plane_inertia": round(la.plane_clusters.inertia, 6), "ari": round(la.agreement, 6)}
                 for la in layers]
        summary.append({"file": entry["file"], "correct": entry.get("correct"), "layers": stats})
    _dump_json({"seed": seed, "method": args.method, "k": args.k, "traces": summary}, out / "analysis.json")
    print(f"analyzed {len(index)} traces with {args.method}")
    return 0


def cmd_report(args) -> int:
    from .report import write_report

    run = Path(args.run)
    if not run.is_dir():
        raise ValidationError(f"run directory not found: {run}")
    path = write_report(run)
    print(f"wrote {path}")
    return 0


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="layerscope", description="Layer-wise analysis of a toy QA encoder.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic deduction data")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=10_000, help="total samples over train/dev/test")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="fine-tune the encoder on a QA head")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="TrainConfig key=value file")
    t.add_argument("--model-config", help="ModelConfig key=value file")
    t.add_argument("--grid", action="store_true", help="run the default 8-cell grid")
    t.add_argument("--head", choices=("classification", "span"), default="classification")
    t.add_argument("--eval-interval", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("trace", help="dump per-layer hidden states for selected samples")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--split", choices=("train", "dev", "test"), default="test")
    tr.add_argument("--correct", action="store_true")
    tr.add_argument("--incorrect", action="store_true")
    tr.add_argument("--n", type=int, default=1)
    tr.add_argument("--seed", type=int)
    tr.set_defaults(func=cmd_trace)

    pr = sub.add_parser("probe", help="edge-probe every layer")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--tasks", nargs="*")
    pr.add_argument("--no-finetune", action="store_true", help="also probe an untrained control model")
    pr.add_argument("--config", help="ProbeConfig key=value file")
    pr.add_argument("--sizes", help="train=N,dev=N,test=N per task")
    pr.add_argument("--seed", type=int)
    pr.set_defaults(func=cmd_probe)

    a = sub.add_parser("analyze", help="project and cluster traced layers")
    a.add_argument("--traces", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--method", choices=("pca", "ica", "tsne"), default="pca")
    a.add_argument("--k", type=int)
    a.add_argument("--color-by", choices=("role", "sentence"), default="role")
    a.add_argument("--clusters", action="store_true", help="outline k-means clusters")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", help="assemble report.html for a run directory")
    r.add_argument("--run", required=True)
    r.set_defaults(func=cmd_report)
    return p


def _limit_threads() -> None:
    n = os.environ.get("LAYERSCOPE_THREADS")
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        raise ValidationError(f"LAYERSCOPE_THREADS must be a positive integer, got {n!r}")
    from threadpoolctl import threadpool_limits

    threadpool_limits(int(n))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from .persistence import CorruptFileError, JsonlError
    from .synthgen import GenerationError
    from .tasks import FormatError

    try:
        _limit_threads()
        return args.func(args)
    except (ValidationError, CorruptFileError, JsonlError, FormatError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
