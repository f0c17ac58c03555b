#!/usr/bin/env python3
"""
SalViT CLI
Synthetic data generation, episodic training, evaluation and the robustness experiments.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

# Load environment variables from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass  # python-dotenv not installed, skip loading

sys.path.insert(0, str(Path(__file__).parent))

from salvit.checkpoint import load_detector
from salvit.config import RunConfig, load_config
from salvit.encoder import Ablation, EncoderTrace
from salvit.episodes import experiments
from salvit.episodes.metrics import MetricsLog, PredictionLog
from salvit.episodes.sampler import KeypointSet
from salvit.episodes.synth import Dataset, gen_dataset, load_dataset, save_dataset
from salvit.episodes.trainer import CHECKPOINT_NAME, eval_episodes, evaluate, train
from salvit.errors import SalViTError
from salvit.msa import export_attention_csv
from salvit.robust import OcclusionType
from salvit.transduce import Strategy

try:
    from colorama import init, Fore, Style
    init()  # Initialize colorama for Windows
    COLORS_AVAILABLE = True
except ImportError:
    COLORS_AVAILABLE = False

    class Fore:
        RED = GREEN = YELLOW = BLUE = MAGENTA = CYAN = WHITE = RESET = ""

    class Style:
        BRIGHT = DIM = NORMAL = RESET_ALL = ""


class CLIColors:
    """Color utilities for CLI output"""

    @staticmethod
    def success(text: str) -> str:
        return f"{Fore.GREEN}{text}{Style.RESET_ALL}" if COLORS_AVAILABLE else text

    @staticmethod
    def error(text: str) -> str:
        return f"{Fore.RED}{text}{Style.RESET_ALL}" if COLORS_AVAILABLE else text

    @staticmethod
    def warning(text: str) -> str:
        return f"{Fore.YELLOW}{text}{Style.RESET_ALL}" if COLORS_AVAILABLE else text

    @staticmethod
    def info(text: str) -> str:
        return f"{Fore.CYAN}{text}{Style.RESET_ALL}" if COLORS_AVAILABLE else text

    @staticmethod
    def highlight(text: str) -> str:
        return f"{Fore.MAGENTA}{Style.BRIGHT}{text}{Style.RESET_ALL}" if COLORS_AVAILABLE else text


class SalViTCLI:
    """One instance per invocation: resolved run config plus lazily loaded data and model."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg.resolve()
        self.command = command
        self.log = MetricsLog(self.cfg.out / "metrics.csv", self.cfg.config_hash(), command)
        self._ds: Optional[Dataset] = None

    @property
    def dataset(self) -> Dataset:
        if self._ds is None:
            self._ds = load_dataset(self.cfg.data.root, self.cfg.saliency, self.cfg.data.saliency_dir)
        return self._ds

    def _model(self, checkpoint: Optional[str]):
        path = Path(checkpoint) if checkpoint else self.cfg.out / CHECKPOINT_NAME
        print(CLIColors.info(f"📦 Loading checkpoint {path}"))
        return load_detector(path)

    def gen_data(self) -> bool:
        dc = self.cfg.data
        ds = gen_dataset(self.cfg.seed, dc.species, dc.per_species, self.cfg.model.encoder.image, self.cfg.saliency)
        save_dataset(ds, dc.root)
        print(CLIColors.success(f"✅ Wrote {len(ds)} images over {dc.species} species to {dc.root}"))
        return True

    def train(self) -> bool:
        print(CLIColors.info(f"🏋️  Training for {self.cfg.train.episodes} episodes (run {self.cfg.config_hash()})"))
        _, path = train(self.cfg, self.dataset, self.log)
        print(CLIColors.success(f"✅ Checkpoint saved to {path}"))
        return True

    def eval(self, checkpoint: Optional[str], predictions: bool, attention_dir: Optional[str]) -> bool:
        model = self._model(checkpoint)
        pred_log = PredictionLog(self.cfg.out / "predictions.csv", self.cfg.config_hash()) if predictions else None
        results = evaluate(self.cfg, model, self.dataset, self.log, pred_log)
        for name, value in results.items():
            print(f"  {CLIColors.highlight(name):<24} {value:8.2f}")
        if attention_dir:
            path = Path(attention_dir) / "attention.csv"
            episode = next(eval_episodes(self.dataset, self.cfg, KeypointSet.novel, count=1))
            for z, q in enumerate(episode.queries):
                trace = EncoderTrace()
                model.encode(q.rgb, q.saliency, trace=trace)
                for t, A in enumerate(trace.attentions):
                    export_attention_csv(path, A, tag=f"query{z}/block{t}")
            print(CLIColors.info(f"🔍 Attention matrices written to {path}"))
        return True

    def transduce(self, checkpoint: Optional[str]) -> bool:
        results = experiments.transduce_table(self.cfg, self._model(checkpoint), self.dataset, tuple(Strategy),
                                              self.log)
        for name, value in results.items():
            print(f"  {CLIColors.highlight(name):<24} {value:8.2f}")
        return True

    def occlude_eval(self, checkpoint: Optional[str], types: list[str]) -> bool:
        results = experiments.occlusion_eval(self.cfg, self._model(checkpoint), self.dataset,
                                             [OcclusionType(t) for t in types], log=self.log)
        for (kind, p), value in results.items():
            print(f"  {kind:<16} p={p:<4} {value:8.2f}")
        return True

    def saliency_sweep(self, checkpoint: Optional[str]) -> bool:
        for mode, t, value in experiments.saliency_sweep(self.cfg, self._model(checkpoint), self.dataset, self.log):
            label = mode if np.isnan(t) else f"{mode}@{t}"
            print(f"  {label:<20} {value:8.2f}")
        return True

    def gradcheck(self, points: int, tolerance: float) -> bool:
        worst = experiments.gradcheck_suite(self.cfg.seed, points)
        ok = True
        for name, err in worst.items():
            passed = err < tolerance
            ok &= passed
            mark = CLIColors.success("pass") if passed else CLIColors.error("FAIL")
            print(f"  {name:<24} {err:.3e}  {mark}")
            self.log.log(f"gradcheck/{name}", err)
        return ok

    def ablate(self, variants: list[str], seeds: list[int]) -> bool:
        scores = experiments.ablate(self.cfg, self.dataset, [Ablation(v) for v in variants], seeds, self.log)
        for name, values in scores.items():
            print(f"  {CLIColors.highlight(name):<24} {np.mean(values):8.2f} ± {np.std(values):.2f}")
        return True


def create_parser() -> argparse.ArgumentParser:
    """Create and configure the argument parser"""
    parser = argparse.ArgumentParser(
        description="SalViT CLI - saliency-guided few-shot keypoint detection",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s gen-data --config runs.cfg
  %(prog)s train --config runs.cfg --seed 1 --out runs/s1
  %(prog)s eval --out runs/s1 --predictions
  %(prog)s occlude-eval --out runs/s1 --types gray_box background_crop
  %(prog)s gradcheck --points 10
"""
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", type=str, help="key = value config file")
    common.add_argument("--seed", type=int, help="Override the configured seed")
    common.add_argument("--out", type=str, help="Override the output directory")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    with_ckpt = argparse.ArgumentParser(add_help=False)
    with_ckpt.add_argument("--checkpoint", type=str, help="Checkpoint file (default: <out>/model.ckpt)")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    subparsers.add_parser("gen-data", parents=[common], help="Render the synthetic dataset")
    subparsers.add_parser("train", parents=[common], help="Episodic training on seen species")

    eval_parser = subparsers.add_parser("eval", parents=[common, with_ckpt], help="Novel and base PCK on unseen species")
    eval_parser.add_argument("--predictions", action="store_true", help="Write per-keypoint predictions CSV")
    eval_parser.add_argument("--attention-csv", type=str, metavar="DIR", help="Export attention of one episode")

    subparsers.add_parser("transduce", parents=[common, with_ckpt], help="Compare prototype refinement strategies")

    occ_parser = subparsers.add_parser("occlude-eval", parents=[common, with_ckpt], help="PCK under test occlusion")
    occ_parser.add_argument("--types", nargs="+", default=[t.value for t in OcclusionType],
                            choices=[t.value for t in OcclusionType])

    subparsers.add_parser("saliency-sweep", parents=[common, with_ckpt], help="PCK with failing saliency")

    grad_parser = subparsers.add_parser("gradcheck", parents=[common], help="Finite-difference gradient suite")
    grad_parser.add_argument("--points", type=int, default=10)
    grad_parser.add_argument("--tolerance", type=float, default=1e-4)

    ablate_parser = subparsers.add_parser("ablate", parents=[common], help="Train and score encoder variants")
    ablate_parser.add_argument("--variants", nargs="+", default=[a.value for a in Ablation],
                               choices=[a.value for a in Ablation])
    ablate_parser.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])

    return parser


def main():
    """Main CLI entry point"""
    parser = create_parser()
    args = parser.parse_args()

    if not args.command:
        parser.print_help()
        sys.exit(0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        cli = SalViTCLI(load_config(args.config, args.seed, args.out), args.command)
    except Exception as e:
        print(CLIColors.error(f"❌ Failed to load configuration: {str(e)}"))
        sys.exit(1)

    success = True
    try:
        if args.command == "gen-data":
            success = cli.gen_data()

        elif args.command == "train":
            success = cli.train()

        elif args.command == "eval":
            success = cli.eval(args.checkpoint, args.predictions, args.attention_csv)

        elif args.command == "transduce":
            success = cli.transduce(args.checkpoint)

        elif args.command == "occlude-eval":
            success = cli.occlude_eval(args.checkpoint, args.types)

        elif args.command == "saliency-sweep":
            success = cli.saliency_sweep(args.checkpoint)

        elif args.command == "gradcheck":
            success = cli.gradcheck(args.points, args.tolerance)

        elif args.command == "ablate":
            success = cli.ablate(args.variants, args.seeds)

        else:
            print(CLIColors.error(f"❌ Unknown command: {args.command}"))
            parser.print_help()
            success = False
    except SalViTError as e:
        print(CLIColors.error(f"❌ {type(e).__name__}: {e}"))
        success = False
    except FileNotFoundError as e:
        print(CLIColors.error(f"❌ {e}"))
        print(CLIColors.warning("💡 Run `gen-data` or `train` first, or pass --config / --checkpoint"))
        success = False

    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
