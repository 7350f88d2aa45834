"""End-to-end run: gen -> train -> trace -> probe -> analyze -> report.

    python scripts/run_pipeline.py --run runs/demo --n 10000 --seed 0
    python scripts/run_pipeline.py --run runs/quick --n 600 --quick

``--grid`` trains with the default 8-cell grid instead of one config.
Wall time of every stage is printed and written to timings.json next to
(not inside) the run directory so reruns stay byte-comparable.
"""
import argparse
import json
import sys
import time
from pathlib import Path

from layerscope import cli

QUICK_TRAIN = "epochs = 1\nbatch_size = 16\nlearning_rate = 0.001\n"
QUICK_MODEL = "n_layers = 2\nd_model = 16\nn_heads = 2\nd_ff = 32\n"


def stages(run: Path, args, cfg_dir: Path) -> list[tuple[str, list[str]]]:
    seed = str(args.seed)
    data, model = run / "data", run / "model"
    train = ["train", "--data", str(data), "--out", str(model), "--head", args.head, "--seed", seed]
    if args.grid:
        train.append("--grid")
    elif args.quick:
        train += ["--config", str(cfg_dir / "train.cfg"), "--model-config", str(cfg_dir / "model.cfg"),
                  "--eval-interval", "10"]
    probe = ["probe", "--checkpoint", str(model / "model.lwck"), "--data", str(data),
             "--out", str(run / "probes"), "--no-finetune", "--seed", seed]
    if args.sizes:
        probe += ["--sizes", args.sizes]
    return [
        ("gen", ["gen", "--out", str(data), "--n", str(args.n), "--seed", seed]),
        ("train", train),
        ("trace", ["trace", "--checkpoint", str(model / "model.lwck"), "--data", str(data),
                   "--out", str(run / "traces"), "--correct", "--incorrect", "--seed", seed]),
        ("probe", probe),
        ("analyze", ["analyze", "--traces", str(run / "traces"), "--out", str(run / "analysis"),
                     "--clusters", "--seed", seed]),
        ("report", ["report", "--run", str(run)]),
    ]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--head", choices=("classification", "span"), default="classification")
    p.add_argument("--grid", action="store_true")
    p.add_argument("--quick", action="store_true", help="tiny model and one epoch")
    p.add_argument("--sizes", help="probe sizes, e.g. train=2000,dev=500,test=500")
    args = p.parse_args(argv)

    run = Path(args.run)
    cfg_dir = run.parent / (run.name + "_configs")
    cfg_dir.mkdir(parents=True, exist_ok=True)
    (cfg_dir / "train.cfg").write_text(QUICK_TRAIN)
    (cfg_dir / "model.cfg").write_text(QUICK_MODEL)

    timings = {}
    total = time.perf_counter()
    for name, cmd in stages(run, args, cfg_dir):
        t0 = time.perf_counter()
        code = cli.main(cmd)
        timings[name] = round(time.perf_counter() - t0, 2)
        print(f"[{name}] exit {code} in {timings[name]:.1f}s", flush=True)
        if code != 0:
            return code
    timings["total"] = round(time.perf_counter() - total, 2)
    (cfg_dir / "timings.json").write_text(json.dumps(timings, indent=2))
    print(f"pipeline finished in {timings['total']:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
