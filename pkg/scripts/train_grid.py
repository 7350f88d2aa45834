"""Train one QA head with the default grid on freshly generated data.

    python scripts/train_grid.py --head classification --out runs/grid_cls

Prints per-cell dev accuracy, wall time and the best cell's test accuracy.
"""
import argparse
import json
import logging
import time
from pathlib import Path

from layerscope.encoder import Encoder, ModelConfig
from layerscope.persistence import save_checkpoint
from layerscope.synthgen import GeneratorConfig, Lexicon, encode, generate_splits
from layerscope.training import default_grid, fine_tune


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--head", choices=("classification", "span"), default="classification")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/grid")
    p.add_argument("--cells", type=int, nargs="*", help="subset of grid cell indices")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    gcfg = GeneratorConfig(seed=args.seed)
    lex = Lexicon.from_config(gcfg)
    data = {k: [encode(s, lex, args.head) for s in v] for k, v in generate_splits(gcfg, args.n).items()}
    mcfg = ModelConfig(vocab_size=len(lex), n_classes=gcfg.n_kinds, seed=args.seed,
                       frozen_token_ids=tuple(lex.name_ids()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = default_grid(seed=args.seed)
    rows, best = [], None
    for i, cfg in enumerate(grid):
        if args.cells and i not in args.cells:
            continue
        t0 = time.perf_counter()
        rep, model = fine_tune(Encoder(mcfg), data, args.head, cfg)
        row = {"cell": i, "lr": cfg.learning_rate, "batch": cfg.batch_size, "scheduler": cfg.scheduler,
               "dev": rep.best_dev, "test": rep.test_accuracy, "seconds": round(time.perf_counter() - t0, 1)}
        rows.append(row)
        print(json.dumps(row), flush=True)
        if best is None or rep.best_dev > best[0]:
            best = (rep.best_dev, row, model)
    (out / "grid.json").write_text(json.dumps({"cells": rows, "best": best[1]}, indent=2))
    save_checkpoint(best[2], out / "model.lwck", meta={"head": args.head, "seed": args.seed})
    print("best", json.dumps(best[1]))


if __name__ == "__main__":
    main()
