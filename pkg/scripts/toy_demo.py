"""End-to-end demo through the CLI: data, both training phases, one sample per
mode, evaluation and an attention dump. A few minutes on one core.

    python scripts/toy_demo.py --work runs/demo
"""

import argparse
from pathlib import Path

from echomotion.cli import main as cli

CONFIG = """\
# small, fast settings; see README for the full toy geometry
dim=32
heads=4
layers=2
dual_layers=2
phase1_steps={p1}
phase2_steps={p2}
lr=1e-3
shift=1.0
sample_shift=1.0
sample_steps=20
checkpoint_every=100
log_every=50
dataset={work}/toy.hmvd
out_dir={work}/run
"""


def run(*argv: str) -> None:
    print("$ echomotion " + " ".join(argv), flush=True)
    code = cli(list(argv))
    if code:
        raise SystemExit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/demo")
    ap.add_argument("--phase1-steps", type=int, default=200)
    ap.add_argument("--phase2-steps", type=int, default=300)
    args = ap.parse_args()
    work = Path(args.work)
    work.mkdir(parents=True, exist_ok=True)
    cfg = work / "demo.cfg"
    cfg.write_text(CONFIG.format(p1=args.phase1_steps, p2=args.phase2_steps, work=work))

    run("gen-data", "--out", str(work / "toy.hmvd"), "--count", "100", "--seed", "1")
    run("gen-data", "--out", str(work / "heldout.hmvd"), "--count", "4", "--seed", "2")
    run("train", "--config", str(cfg), "--phase", "all")
    ckpt = str(work / "run" / "phase2.ckpt")
    run("sample", "--config", str(cfg), "--ckpt", ckpt, "--mode", "joint", "--prompt-tokens", "a dancer in red",
        "--out", str(work / "samples" / "joint"))
    run("sample", "--config", str(cfg), "--ckpt", ckpt, "--mode", "m2v", "--cond", str(work / "heldout.hmvd"),
        "--out", str(work / "samples" / "m2v"))
    run("sample", "--config", str(cfg), "--ckpt", ckpt, "--mode", "v2m", "--cond", str(work / "heldout.hmvd"),
        "--out", str(work / "samples" / "v2m"))
    run("eval", "--ckpt", ckpt, "--dataset", str(work / "heldout.hmvd"), "--report", str(work / "eval.csv"),
        "--steps", "20")
    run("inspect-attn", "--ckpt", ckpt, "--clip", str(work / "heldout.hmvd"), "--out", str(work / "attn.csv"))


if __name__ == "__main__":
    main()
