"""Command-line entry points: synth, segment, score, compare and sweep.

Exit codes: 0 on success, 1 when any frame failed, 2 on a configuration or
input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines, data, metrics, modelfit, synth
from .branch import DEFAULT_EXTENT_FRACTION, DEFAULT_RADIUS_SCALE
from .embedding import DEFAULT_REG, EIG_TOL, default_eigs
from .graph import select_k
from .temporal import (DEFAULT_BUDGET_FACTOR, DEFAULT_NEAR_POOL, DEFAULT_TUPLE_SIZE, METHODS, PipelineParams,
                       SequenceResult, segment_sequence)

logger = logging.getLogger("protruseg")

EXIT_OK, EXIT_FAILED_FRAME, EXIT_CONFIG = 0, 1, 2
RUN_FILE = "run.json"
CHAINS_FILE = "chains.json"
TRAJECTORY_FILE = "trajectories.csv"
SCORES_FILE = "scores.csv"
LABELING_DIR = "labelings"
COMPARE_METHODS = ("lle-kwise",) + baselines.BASELINES


class ConfigError(Exception):
    """Invalid arguments or unreadable input; maps to exit code 2."""


@dataclass
class RunConfig:
    """Every resolved setting of a run; serialized into run.json."""

    input: str
    out: str
    k: int
    eigs: list[int]
    k_auto: list[int] | None = None  # candidates k was selected from
    budget: int = DEFAULT_BUDGET_FACTOR
    radius_scale: float = DEFAULT_RADIUS_SCALE
    extent_fraction: float = DEFAULT_EXTENT_FRACTION
    reg: float = DEFAULT_REG
    eig_tol: float = EIG_TOL
    sigma: float | None = None
    near_pool: int = DEFAULT_NEAR_POOL
    tuple_size: int = DEFAULT_TUPLE_SIZE
    method: str = "kwise"
    seed: int = 0
    subsample: int = 1

    def params(self) -> PipelineParams:
        return PipelineParams(k=self.k, eigs=tuple(self.eigs), budget_factor=self.budget,
                              radius_scale=self.radius_scale, extent_fraction=self.extent_fraction, reg=self.reg,
                              eig_tol=self.eig_tol, rng_seed=self.seed, tuple_size=self.tuple_size,
                              sigma=self.sigma, near_pool=self.near_pool, method=self.method)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))


# ---------------------------------------------------------------- argument helpers


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _sigma(text: str) -> float | None:
    if text == "auto":
        return None
    try:
        v = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("sigma must be 'auto' or a positive number") from exc
    if not v > 0:
        raise argparse.ArgumentTypeError("sigma must be positive")
    return v


def _add_io(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--input", required=True, help="sequence directory (meta.json + frame files)")
    p.add_argument("--out", required=out_required, help="output directory")


def _add_pipeline(p: argparse.ArgumentParser, grid: bool = False):
    if not grid:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--k", type=int, default=PipelineParams.k, help="neighbors per point")
        g.add_argument("--k-auto", type=_int_list, metavar="MIN,MAX,STEP",
                       help="pick the largest regular k from range(MIN, MAX+1, STEP) on the first frame")
        p.add_argument("--eigs", type=_int_list, help="selected eigenvector indices (default 1..dims)")
        p.add_argument("--dims", type=int, default=len(PipelineParams.eigs), help="embedding dimension")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET_FACTOR, help="hyperedge samples per point")
    p.add_argument("--sigma", type=_sigma, default=None, help="affinity bandwidth: auto or a value")
    p.add_argument("--method", choices=METHODS, default="kwise", help="clustering in the embedded space")
    p.add_argument("--branch-radius-scale", type=float, default=DEFAULT_RADIUS_SCALE)
    p.add_argument("--reg", type=float, default=DEFAULT_REG, help="LLE regularization")
    p.add_argument("--eig-tol", type=float, default=EIG_TOL)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subsample", type=int, default=1, help="keep about N/s points per frame")


def _k_candidates(spec: Sequence[int]) -> list[int]:
    if len(spec) != 3:
        raise ConfigError("--k-auto takes MIN,MAX,STEP")
    lo, hi, step = spec
    if step < 1 or lo < 1 or hi < lo:
        raise ConfigError("--k-auto needs 1 <= MIN <= MAX and STEP >= 1")
    return list(range(lo, hi + 1, step))


def load_input(path, subsample: int, seed: int) -> data.VoxelSequence:
    try:
        seq = data.load_sequence(path)
        return data.subsample_sequence(seq, data.SubsampleParams(subsample, seed))
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def resolve_config(args, out: str | None = None) -> tuple[RunConfig, data.VoxelSequence]:
    """Turn parsed arguments into a fully resolved RunConfig and the input it runs on."""
    if args.subsample < 1:
        raise ConfigError("--subsample must be >= 1")
    seq = load_input(args.input, args.subsample, args.seed)
    eigs = list(args.eigs) if args.eigs else list(default_eigs(args.dims))
    k, cands = args.k, None
    if args.k_auto:
        cands = _k_candidates(args.k_auto)
        k, warn = select_k(seq[0].points, cands)
        if warn:
            logger.warning("no regular k in %s; using %d", cands, k)
    cfg = RunConfig(input=str(args.input), out=str(out if out is not None else args.out), k=int(k), eigs=eigs,
                    k_auto=cands, budget=args.budget, radius_scale=args.branch_radius_scale,
                    reg=args.reg, eig_tol=args.eig_tol, sigma=args.sigma, method=args.method, seed=args.seed,
                    subsample=args.subsample)
    try:
        cfg.params()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, seq


# ---------------------------------------------------------------- outputs


def write_trajectories(result: SequenceResult, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "cluster", "chain_id", "cx", "cy", "cz"])
        for t, j, cid, x, y, z in result.trajectory_rows():
            w.writerow([t, j, cid, repr(x), repr(y), repr(z)])


def chains_to_json(result: SequenceResult) -> dict:
    return {"chains": [{"chain_id": c.chain_id, "start": c.start, "kind": c.kind, "parents": list(c.parents),
                        "roots": sorted(c.roots), "frames": list(c.frames)}
                       for c in sorted(result.chains.values(), key=lambda c: c.chain_id)],
            "failed_frames": result.failed_frames}


def write_run(result: SequenceResult, seq: data.VoxelSequence, cfg: RunConfig, model: bool = False):
    out = Path(cfg.out)
    (out / LABELING_DIR).mkdir(parents=True, exist_ok=True)
    (out / RUN_FILE).write_text(cfg.to_json(), encoding="utf-8")
    for fr, frame in zip(result.frames, seq):
        if fr.ok:
            data.save_labeling(fr.chain_labels(), frame, out / LABELING_DIR / (data.FRAME_PATTERN % fr.frame_index))
    write_trajectories(result, out / TRAJECTORY_FILE)
    (out / CHAINS_FILE).write_text(json.dumps(chains_to_json(result), indent=1) + "\n", encoding="utf-8")
    if model:
        modelfit.save_model(modelfit.fit_sequence(result, seq), out / "model.json")


def apriori_for(input_dir, seq: data.VoxelSequence, files: Sequence[str] | None = None) -> list[data.AprioriSegmentation]:
    """A-priori schemes from explicit files, else from the input directory, else one scheme per link."""
    paths = [Path(f) for f in files] if files else data.find_apriori_files(input_dir)
    try:
        schemes = [data.load_apriori(p) for p in paths]
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not schemes:
        links = sorted(set(np.unique(np.concatenate([f.gt_labels for f in seq])).tolist()))
        schemes = [data.AprioriSegmentation({l: l for l in links}, "links")]
    return schemes


def _require_gt(seq: data.VoxelSequence):
    if not all(f.has_labels for f in seq):
        raise ConfigError("scoring needs ground-truth labels in the input")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if args.preset:
        seq = synth.preset_sequences(args.preset, args.frames)
        schemes = synth.star_apriori()
    else:
        try:
            links, motion = synth.load_body(args.body)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read body spec: {exc}") from exc
        seq = synth.generate_sequence(links, motion, args.voxel, name=Path(args.body).stem)
        schemes = []
    data.save_sequence(seq, args.out)
    for s in schemes:
        data.save_apriori(s, Path(args.out) / f"apriori_{s.name}.csv")
    logger.info("wrote %d frames to %s", len(seq), args.out)
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg, seq = resolve_config(args)
    result = segment_sequence(seq, cfg.params())
    write_run(result, seq, cfg, model=args.model)
    if result.failed_frames:
        print(f"failed frames: {result.failed_frames}", file=sys.stderr)
        return EXIT_FAILED_FRAME
    return EXIT_OK


def score_run_dir(run_dir, apriori_files=None) -> tuple[metrics.ScoreSeries, list[int]]:
    run_dir = Path(run_dir)
    try:
        cfg = RunConfig.from_json((run_dir / RUN_FILE).read_text(encoding="utf-8"))
        chains = json.loads((run_dir / CHAINS_FILE).read_text(encoding="utf-8"))
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"not a segment output directory: {exc}") from exc
    seq = load_input(cfg.input, cfg.subsample, cfg.seed)
    _require_gt(seq)
    roots = {c["chain_id"]: c["roots"] for c in chains["chains"]}
    labels = []
    for f in seq:
        p = run_dir / LABELING_DIR / (data.FRAME_PATTERN % f.frame_index)
        labels.append(data.load_labeling(p) if p.exists() else None)
    series = metrics.score_labelings(labels, list(seq), apriori_for(cfg.input, seq, apriori_files),
                                     lambda c: roots[int(c)])
    return series, chains["failed_frames"]


def cmd_score(args) -> int:
    series, failed = score_run_dir(args.run, args.apriori)
    out = Path(args.out) if args.out else Path(args.run) / SCORES_FILE
    series.write_csv(out)
    print(f"consistency {np.mean(series.consistency):.4f}  coarsening {np.mean(series.coarsening):.4f}  "
          f"segmentation {series.segmentation_mean:.4f}")
    return EXIT_FAILED_FRAME if failed else EXIT_OK


def run_method(method: str, seq: data.VoxelSequence, params: PipelineParams) -> SequenceResult:
    if method == "lle-kwise":
        return segment_sequence(seq, params)
    return baselines.run_baseline(method, seq, params)


def _score_job(job):
    method, seq, params, schemes = job
    result = run_method(method, seq, params)
    return metrics.score_sequence(result, seq, schemes), result.failed_frames


def _map(jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [_score_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as ex:
        return list(ex.map(_score_job, jobs))


def cmd_compare(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in COMPARE_METHODS]
    if unknown or not methods:
        raise ConfigError(f"unknown methods {unknown}; choose from {','.join(COMPARE_METHODS)}")
    cfg, seq = resolve_config(args)
    _require_gt(seq)
    schemes = apriori_for(cfg.input, seq)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_FILE).write_text(cfg.to_json(), encoding="utf-8")
    results = _map([(m, seq, cfg.params(), schemes) for m in methods], args.threads)
    failed = False
    rows = []
    for m, (series, bad) in zip(methods, results):
        (out / m).mkdir(exist_ok=True)
        series.write_csv(out / m / SCORES_FILE)
        failed |= bool(bad)
        rows.append([m, np.mean(series.consistency), np.mean(series.coarsening), series.segmentation_mean])
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "consistency_mean", "coarsening_mean", "segmentation_mean"])
        for r in rows:
            w.writerow([r[0]] + [f"{x:.6f}" for x in r[1:]])
    for r in rows:
        print(f"{r[0]:<14} consistency {r[1]:.4f}  coarsening {r[2]:.4f}  segmentation {r[3]:.4f}")
    return EXIT_FAILED_FRAME if failed else EXIT_OK


def cmd_sweep(args) -> int:
    if not args.ks or not args.dims:
        raise ConfigError("empty sweep grid")
    seq = load_input(args.input, args.subsample, args.seed)
    _require_gt(seq)
    schemes = apriori_for(args.input, seq)
    grid = [(k, d) for k in args.ks for d in args.dims]
    jobs = []
    for k, d in grid:
        try:
            params = PipelineParams(k=k, eigs=default_eigs(d), budget_factor=args.budget, radius_scale=args.branch_radius_scale,
                                    reg=args.reg, eig_tol=args.eig_tol, rng_seed=args.seed, sigma=args.sigma,
                                    method=args.method)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        jobs.append(("lle-kwise", seq, params, schemes))
    results = _map(jobs, args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = False
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "dims", "consistency_mean", "segmentation_mean", "average"])
        for (k, d), (series, bad) in zip(grid, results):
            failed |= bool(bad)
            c, s = float(np.mean(series.consistency)), series.segmentation_mean
            w.writerow([k, d, f"{c:.6f}", f"{s:.6f}", f"{(c + s) / 2:.6f}"])
    return EXIT_FAILED_FRAME if failed else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="protruseg", description="Temporally coherent protrusion segmentation of voxel sequences.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--threads", type=int, default=1, help="maximum worker processes")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic sequence with ground truth")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=synth.PRESET_NAMES)
    src.add_argument("--body", help="JSON body and motion spec")
    s.add_argument("--frames", type=int, default=25, help="frames for a preset")
    s.add_argument("--voxel", type=float, default=synth.VOXEL_MM, help="voxel pitch in mm for --body")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("segment", help="segment a sequence")
    _add_io(s)
    _add_pipeline(s)
    s.add_argument("--model", action="store_true", help="also fit ellipsoids and write model.json")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("score", help="score a segment output against ground truth")
    s.add_argument("--run", required=True, help="segment output directory")
    s.add_argument("--apriori", nargs="*", help="a-priori scheme files (default: apriori_*.csv of the input)")
    s.add_argument("--out", help="scores CSV path (default: <run>/scores.csv)")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("compare", help="score the pipeline against the baselines")
    _add_io(s)
    _add_pipeline(s)
    s.add_argument("--methods", default=",".join(COMPARE_METHODS), help="comma-separated subset of " + ",".join(COMPARE_METHODS))
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="scores over a (k, dims) grid")
    _add_io(s)
    _add_pipeline(s, grid=True)
    s.add_argument("--ks", type=_int_list, default=[14, 16, 18, 20, 22])
    s.add_argument("--dims", type=_int_list, default=[3, 4, 5, 6, 7])
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
