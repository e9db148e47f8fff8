"""
MFG price formation solver: adversarial training of a price network and a
control network on a particle approximation, a posteriori certification and
the linear-quadratic price oracle.

CLI:
  python main.py train      [--config PATH] [--seed N] [--out DIR]
  python main.py evaluate   --checkpoint RUN/checkpoints/final_v.ckpt --checkpoint RUN/checkpoints/final_pi.ckpt [--j-eval N]
  python main.py oracle     [--config PATH] [--j-eval N]
  python main.py grad-check [--agents 2] [--steps 5] [--samples-per-param 8 | --all-entries]

Exit codes: 0 ok, 1 internal/numerical check failed, 2 invalid config,
3 training diverged, 4 checkpoint problem, 5 model has no oracle.
"""

from __future__ import annotations

import argparse
import sys

from adversarial_trainer import ConfigError, TrainingDivergedError
from diffgraph import ShapeError
from lq_benchmark import OracleConsistencyError, UnsupportedModelError
from pipeline import GRAD_CHECK_SAMPLES, cmd_evaluate, cmd_grad_check, cmd_oracle, cmd_train
from rnn_policy import CheckpointError
from run_config import load_config

GRAD_CHECK_TOLERANCE = 1e-5

EXIT_CODES = (
    (ConfigError, 2),
    (TrainingDivergedError, 3),
    (CheckpointError, 4),
    (UnsupportedModelError, 5),
    (OracleConsistencyError, 1),
    (ShapeError, 1),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py", description="MFG price formation solver")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="YAML run config (defaults reproduce the reference experiment)")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--out", default=None, help="override output.dir")

    common(sub.add_parser("train", help="adversarial training; writes checkpoints and metrics"))
    p_eval = sub.add_parser("evaluate", help="posterior report and price vs oracle for saved checkpoints")
    common(p_eval)
    p_eval.add_argument("--checkpoint", action="append", default=[], required=True,
                        help="checkpoint file (repeat: one control _v and one price _pi)")
    p_eval.add_argument("--j-eval", type=int, default=None, help="number of evaluation supply paths")
    p_oracle = sub.add_parser("oracle", help="LQ oracle coefficient table and price paths")
    common(p_oracle)
    p_oracle.add_argument("--j-eval", type=int, default=None, help="number of oracle paths")
    p_grad = sub.add_parser("grad-check", help="finite-difference check of the adversarial loss gradients")
    common(p_grad)
    p_grad.add_argument("--agents", type=int, default=2)
    p_grad.add_argument("--steps", type=int, default=5)
    p_grad.add_argument("--samples-per-param", type=int, default=GRAD_CHECK_SAMPLES,
                        help="random entries checked per parameter array")
    p_grad.add_argument("--all-entries", action="store_true", help="check every parameter entry (slow)")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint, args.j_eval)
        elif args.command == "oracle":
            cmd_oracle(cfg, args.j_eval)
        else:
            error = cmd_grad_check(cfg, args.agents, args.steps, None if args.all_entries else args.samples_per_param)
            if error > GRAD_CHECK_TOLERANCE:
                print(f"error: gradient check failed ({error:.3e} > {GRAD_CHECK_TOLERANCE})", file=sys.stderr)
                return 1
    except tuple(exc for exc, _ in EXIT_CODES) as e:
        code = next(code for exc, code in EXIT_CODES if isinstance(e, exc))
        print(f"error: {e}", file=sys.stderr)
        return code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
