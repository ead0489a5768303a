import argparse
import logging
import sys
import traceback
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import numba
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Add src to path
current_path = str(Path(__file__).parent.resolve())
if current_path not in sys.path:
    sys.path.insert(0, current_path)

from config.pipeline_config import SynthConfig, runtime_settings  # noqa: E402
from src.errors import FacecapError  # noqa: E402
from src.io_formats import load_mesh  # noqa: E402
from src.pipeline import STAGES, Project, run_eval  # noqa: E402
from src.primitives import ellipsoid_template, head_proxy  # noqa: E402
from src.synth import synth_scene  # noqa: E402
from utils.helpers import parse_float_list, print_section_header, print_separator  # noqa: E402

logger = logging.getLogger(__name__)

STAGE_TITLES = {
    "triangulate": "LANDMARK TRIANGULATION",
    "align": "TEMPLATE ALIGNMENT",
    "select-views": "SOURCE VIEW SELECTION",
    "mvs": "PATCHMATCH DEPTH ESTIMATION",
    "fuse": "DEPTH MAP FUSION",
    "edges": "EDGE DETECTION",
    "fit": "NON-RIGID FITTING",
    "eval": "EVALUATION",
}


class ReconstructionProcessor:
    """Runs pipeline stages for one project manifest"""

    def __init__(self, manifest_path: str, overrides: Optional[Dict[str, dict]] = None,
                 output_dir: Optional[str] = None):
        print("🚀 Loading reconstruction project...")
        self.project = Project(manifest_path, overrides, output_dir)
        print(f"✓ Manifest: {self.project.manifest_path}")
        print(f"✓ Output directory: {self.project.output_dir}\n")

    def run_stage(self, name: str, step: Optional[int] = None, **kwargs) -> dict:
        title = STAGE_TITLES[name]
        print_section_header(f"STEP {step}: {title}" if step else title)
        stage = run_eval if name == "eval" else STAGES[name]
        report = stage(self.project, **kwargs)
        for key, value in report["counts"].items():
            print(f"✓ {key.replace('_', ' ')}: {value}")
        print(f"✓ Finished in {report['timings']['seconds']:.2f} seconds\n")
        return report

    def run_pipeline(self, evaluate: bool = True) -> Dict[str, dict]:
        """Every stage in order, then evaluation when a ground-truth mesh is available"""
        print_section_header("FACE RECONSTRUCTION - PROCESSING PIPELINE")
        start_time = datetime.now()
        reports = {}
        for step, name in enumerate(STAGES, start=1):
            reports[name] = self.run_stage(name, step)
        if evaluate and self.project.path('gt_mesh') is not None:
            reports["eval"] = self.run_stage("eval", len(STAGES) + 1)

        total_duration = (datetime.now() - start_time).total_seconds()
        print_section_header("✅ PROCESSING COMPLETE")
        fit = reports["fit"]
        print(f"Fitted mesh       : {self.project.output_dir / 'fitted.ply'}")
        print(f"Final energy      : {fit['final_energy']:.6g}")
        if "eval" in reports:
            print(f"Accuracy (mean)   : {reports['eval']['accuracy_mean']:.6g}")
            print(f"Completion (mean) : {reports['eval']['completion_mean']:.6g}")
        print(f"Total Duration    : {total_duration:.2f} seconds")
        print_separator()
        return reports


def stage_overrides(args: argparse.Namespace) -> Dict[str, dict]:
    """Config overrides from the stage flags that were given"""
    overrides: Dict[str, dict] = {"view_selection": {}, "patchmatch": {}, "fusion": {}, "fit": {}}
    if getattr(args, "num_sources", None) is not None:
        overrides["view_selection"]["num_sources"] = args.num_sources
    if getattr(args, "iterations", None) is not None:
        overrides["patchmatch"]["iterations"] = args.iterations
    seed = args.seed if args.seed is not None else runtime_settings.seed
    if seed is not None:
        overrides["patchmatch"]["rng_seed"] = seed
    if getattr(args, "min_consistent_views", None) is not None:
        overrides["fusion"]["min_consistent_views"] = args.min_consistent_views
    if getattr(args, "stiffness_schedule", None) is not None:
        overrides["fit"]["stiffness_schedule"] = args.stiffness_schedule
    if getattr(args, "no_edges", False):
        overrides["fit"]["use_edges"] = False
    if getattr(args, "no_ear_landmarks", False):
        overrides["fit"]["use_ear_landmarks"] = False
    return overrides


def _float_list(text: str) -> List[float]:
    try:
        return parse_float_list(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    project = argparse.ArgumentParser(add_help=False)
    project.add_argument("manifest", help="project manifest (JSON)")
    project.add_argument("--output-dir", default=None, help="override the manifest output directory")
    project.add_argument("--num-sources", type=int, default=None)
    project.add_argument("--iterations", type=int, default=None, help="PatchMatch iterations")
    project.add_argument("--min-consistent-views", type=int, default=None)
    project.add_argument("--stiffness-schedule", type=_float_list, default=None, help="e.g. 50,20,8")
    project.add_argument("--no-edges", action="store_true", help="fit without edge constraints")
    project.add_argument("--no-ear-landmarks", action="store_true", help="fit without ear landmarks")

    parser = argparse.ArgumentParser(description="Multi-view face reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="write a synthetic project")
    synth.add_argument("out_dir")
    synth.add_argument("--mesh", default=None, help="ground-truth mesh; defaults to the bundled head proxy")
    synth.add_argument("--views", type=int, default=40)
    synth.add_argument("--arc-degrees", type=float, default=180.0)
    synth.add_argument("--width", type=int, default=320)
    synth.add_argument("--height", type=int, default=240)
    synth.add_argument("--depth-sigma", type=float, default=0.002, help="fraction of the bbox diagonal")
    synth.add_argument("--landmark-sigma", type=float, default=0.0, help="pixels")
    synth.add_argument("--subdivisions", type=int, default=5)

    for name in STAGES:
        sub.add_parser(name, parents=[common, project], help=f"run the {name} stage")

    ev = sub.add_parser("eval", parents=[common, project], help="compare against the ground-truth mesh")
    ev.add_argument("--mesh", default=None, help="mesh to evaluate; defaults to the fitted mesh")
    ev.add_argument("--align", action="store_true", help="rigidly align to the ground truth first")
    ev.add_argument("--heatmap-max", type=float, default=None, help="distance mapped to red")

    pipe = sub.add_parser("pipeline", parents=[common, project], help="run every stage")
    pipe.add_argument("--skip-eval", action="store_true")
    return parser


def configure_runtime(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else getattr(logging, runtime_settings.log_level, logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s - %(levelname)s - %(message)s")
    threads = args.threads or runtime_settings.threads
    if threads:
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


def run_synth(args: argparse.Namespace) -> None:
    seed = args.seed if args.seed is not None else (runtime_settings.seed or 0)
    cfg = SynthConfig(n_views=args.views, arc_degrees=args.arc_degrees, width=args.width, height=args.height,
                      depth_sigma_frac=args.depth_sigma, landmark_sigma_px=args.landmark_sigma,
                      subdivisions=args.subdivisions, seed=seed)
    print_section_header("SYNTHETIC PROJECT")
    if args.mesh:
        manifest = synth_scene(load_mesh(args.mesh), args.out_dir, cfg)
    else:
        manifest = synth_scene(head_proxy(cfg.subdivisions), args.out_dir, cfg,
                               template=ellipsoid_template(cfg.subdivisions))
    print(f"✓ Manifest written to {manifest}")


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for CLI execution"""
    args = build_parser().parse_args(argv)
    configure_runtime(args)
    try:
        if args.command == "synth":
            run_synth(args)
            return 0
        processor = ReconstructionProcessor(args.manifest, stage_overrides(args), args.output_dir)
        if args.command == "pipeline":
            processor.run_pipeline(evaluate=not args.skip_eval)
        elif args.command == "eval":
            processor.run_stage("eval", mesh_path=args.mesh, align=args.align, heatmap_max=args.heatmap_max)
        else:
            processor.run_stage(args.command)
        return 0
    except FacecapError as e:
        print(f"\n✗ {e.category}: {e}")
        return e.exit_code
    except Exception as e:
        print(f"\n✗ Error during processing: {e}")
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
