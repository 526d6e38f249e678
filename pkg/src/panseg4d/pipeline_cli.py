"""Command-line entry point wiring the pipeline into runnable workflows.

Subcommands:

* ``synth``     generate a synthetic dataset in the SemanticKITTI layout
* ``segment``   run aggregation, proposal voting, merging, and id stitching
* ``evaluate``  score predictions against ground truth (or re-emit the
  combined score from a fixture of (s_assoc, s_cls) pairs)
* ``ablate``    sweep prior kind x label-noise grid and tabulate the scores
* ``inspect``   dump header/stats of any supported file

Configuration comes from one plain-text key-value file plus flag overrides;
flags win. Diagnostics go to stderr, data to files. Exit code 0 iff no
errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import sk_formats, synthlab
from .errors import ConfigError, CountMismatch, PipelineError
from .lstq_eval import LSTQReport, SequenceEvaluator, lstq
from .proposal_engine import (
    DEFAULT_DBSCAN_EPS_M,
    DEFAULT_DBSCAN_MIN_PTS,
    DEFAULT_GROUP_RADIUS_M,
    DEFAULT_HUBER_DELTA_M,
    dbscan,
    default_proposal_count,
    farthest_point_sample,
    merge_and_assign,
    radius_group,
    refine_proposal,
    shift_to_centers,
)
from .scan_aggregator import aggregate, lidar_pose_from_camera_pose
from .semantic_prior import CONFIDENCE, ONE_HOT, ClassMap, FileProvider, remap
from .synthlab import OracleProvider, SceneConfig, generate, write_dataset
from .window_tracker import TrackState, WindowSegmentation, stitch

ENV_DATASET_ROOT = "PANSEG4D_DATA"

logger = logging.getLogger("panseg4d")


def bundled_path(name: str) -> Path:
    resource = resources.files("panseg4d").joinpath(f"data/{name}")
    with resources.as_file(resource) as path:
        return Path(path)


@dataclass
class PipelineConfig:
    """Everything a segment/ablate run needs, file-loadable and overridable."""

    dataset_root: Path = field(default_factory=lambda: Path(os.environ.get(ENV_DATASET_ROOT, ".")))
    out_dir: Path = Path("out")
    sequences: tuple[str, ...] = ("00",)
    window_n: int = 2
    stride: int = 0  # 0 = auto (window_n - 1, minimum 1)
    prior_kind: str = ONE_HOT
    source: str = "oracle"  # "oracle" | "files"
    scene_config: Path | None = None
    semantic_dir: str | None = None  # may contain {seq}
    confidence_dir: str | None = None
    offset_dir: str | None = None
    offset_frame: str = "window"
    flip_prob: float = 0.0
    offset_sigma: float = 0.0
    noise_seed: int = 0
    k_proposals: int = 0  # 0 = auto
    group_radius_m: float = DEFAULT_GROUP_RADIUS_M
    dbscan_eps_m: float = DEFAULT_DBSCAN_EPS_M
    dbscan_min_pts: int = DEFAULT_DBSCAN_MIN_PTS
    huber_delta_m: float = DEFAULT_HUBER_DELTA_M
    group_space: str = "shifted"  # "shifted" | "raw"
    threads: int = 1
    seed: int = 42

    @property
    def effective_stride(self) -> int:
        return self.stride if self.stride > 0 else max(1, self.window_n - 1)

    def validate(self) -> None:
        if self.window_n < 1:
            raise ConfigError("window_n must be >= 1")
        if self.stride and not 1 <= self.stride <= self.window_n:
            raise ConfigError(f"stride must lie in [1, window_n], got {self.stride}")
        if self.prior_kind not in (ONE_HOT, CONFIDENCE):
            raise ConfigError(f"prior_kind must be one_hot or confidence, got {self.prior_kind!r}")
        if self.source not in ("oracle", "files"):
            raise ConfigError(f"source must be oracle or files, got {self.source!r}")
        if self.source == "oracle" and self.scene_config is None:
            raise ConfigError("source=oracle requires scene_config")
        if self.source == "files":
            if self.offset_dir is None:
                raise ConfigError("source=files requires offset_dir")
            if self.prior_kind == ONE_HOT and self.semantic_dir is None:
                raise ConfigError("source=files with one_hot priors requires semantic_dir")
            if self.prior_kind == CONFIDENCE and self.confidence_dir is None:
                raise ConfigError("source=files with confidence priors requires confidence_dir")
        if self.offset_frame not in ("window", "sensor"):
            raise ConfigError(f"offset_frame must be window or sensor, got {self.offset_frame!r}")
        if self.group_space not in ("shifted", "raw"):
            raise ConfigError(f"group_space must be shifted or raw, got {self.group_space!r}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must lie in [0, 1]")
        if self.offset_sigma < 0:
            raise ConfigError("offset_sigma must be >= 0")
        if self.k_proposals < 0 or self.threads < 1 or self.dbscan_min_pts < 1:
            raise ConfigError("k_proposals >= 0, threads >= 1, dbscan_min_pts >= 1 required")
        if min(self.group_radius_m, self.dbscan_eps_m, self.huber_delta_m) <= 0:
            raise ConfigError("group_radius_m, dbscan_eps_m, huber_delta_m must be positive")

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        values: dict = {}
        known = {spec.name: spec for spec in fields(cls)}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition(":")
            key = key.strip()
            if not sep or key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_config_value(key, value.strip(), f"{path}:{lineno}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


_INT_KEYS = {"window_n", "stride", "noise_seed", "k_proposals", "dbscan_min_pts", "threads", "seed"}
_FLOAT_KEYS = {
    "flip_prob", "offset_sigma", "group_radius_m", "dbscan_eps_m", "huber_delta_m",
}
_PATH_KEYS = {"dataset_root", "out_dir", "scene_config"}
_STR_KEYS = {
    "prior_kind", "source", "offset_frame", "group_space",
    "semantic_dir", "confidence_dir", "offset_dir",
}


def _parse_config_value(key: str, value: str, where: str):
    try:
        if key == "sequences":
            return tuple(tok for tok in value.replace(",", " ").split() if tok)
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _PATH_KEYS:
            return Path(value)
        if key in _STR_KEYS:
            return value
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}: unhandled config key {key!r}")


def plan_windows(n_scans: int, window_n: int, stride: int) -> list[tuple[int, int]]:
    """Window starts covering every scan; a clipped tail window if needed."""
    if window_n > n_scans:
        raise ConfigError(f"window_n={window_n} exceeds the {n_scans} scans available")
    starts = list(range(0, n_scans - window_n + 1, stride))
    if starts[-1] + window_n < n_scans:
        starts.append(n_scans - window_n)
    return [(start, window_n) for start in starts]


def overlap_origins_between(
    prev_window: tuple[int, int], new_window: tuple[int, int], scan_sizes: list[int]
) -> np.ndarray:
    """(scan_index, point_index) pairs present in both windows."""
    lo = max(prev_window[0], new_window[0])
    hi = min(prev_window[0] + prev_window[1], new_window[0] + new_window[1])
    rows = []
    for scan_index in range(lo, hi):
        origin = np.empty((scan_sizes[scan_index], 2), dtype=np.int64)
        origin[:, 0] = scan_index
        origin[:, 1] = np.arange(scan_sizes[scan_index])
        rows.append(origin)
    return np.concatenate(rows) if rows else np.zeros((0, 2), dtype=np.int64)


def load_sequence(dataset_root, sequence: str):
    """Scans, lidar poses, and the sequence directory for one sequence."""
    seq_dir = Path(dataset_root) / sequence
    scan_paths = sorted((seq_dir / "velodyne").glob("*.bin"))
    if not scan_paths:
        raise ConfigError(f"no scans under {seq_dir / 'velodyne'}")
    scans = [sk_formats.read_scan(path, index) for index, path in enumerate(scan_paths)]
    calib = sk_formats.read_calib(seq_dir / "calib.txt")
    camera_poses = sk_formats.read_poses(seq_dir / "poses.txt")
    if len(camera_poses) != len(scans):
        raise CountMismatch(
            f"{seq_dir}: {len(camera_poses)} poses for {len(scans)} scans"
        )
    lidar_poses = [lidar_pose_from_camera_pose(pose, calib) for pose in camera_poses]
    return scans, lidar_poses, seq_dir


def build_provider(config: PipelineConfig, sequence: str, scans, lidar_poses, class_map: ClassMap):
    if config.source == "oracle":
        scene = SceneConfig.load(config.scene_config)
        generated_scans, _, gt = generate(scene)
        if len(generated_scans) != len(scans) or any(
            len(a) != len(b) for a, b in zip(generated_scans, scans)
        ):
            raise ConfigError(
                f"scene_config {config.scene_config} does not match dataset {sequence}"
            )
        return OracleProvider(
            scans=scans,
            lidar_poses=lidar_poses,
            gt=gt,
            class_map=class_map,
            prior_kind=config.prior_kind,
            flip_prob=config.flip_prob,
            offset_sigma=config.offset_sigma,
            noise_seed=config.noise_seed,
        )

    def scan_paths(template: str, extension: str) -> list[Path]:
        directory = Path(template.format(seq=sequence))
        return [directory / f"{k:06d}{extension}" for k in range(len(scans))]

    sizes = [len(scan) for scan in scans]
    return FileProvider(
        class_map=class_map,
        scan_sizes=sizes,
        semantic_paths=scan_paths(config.semantic_dir, ".label") if config.prior_kind == ONE_HOT else None,
        confidence_paths=scan_paths(config.confidence_dir, ".conf") if config.prior_kind == CONFIDENCE else None,
        offset_paths=scan_paths(config.offset_dir, ".offset"),
        lidar_poses=lidar_poses,
        offset_frame=config.offset_frame,
    )


@dataclass
class SegmentStats:
    sequence: str
    n_scans: int
    total_points: int
    window_rows: list[str]
    core_points_per_sec: float
    wall_time_s: float
    uncovered_thing_points: int


def _segment_window(config, window, scans, lidar_poses, priors, provider, thing_mask):
    timing: dict[str, float] = {}

    def clock(name, fn):
        start = time.perf_counter()
        result = fn()
        timing[name] = time.perf_counter() - start
        return result

    cloud = clock("aggregate", lambda: aggregate(scans, lidar_poses, priors, window))
    offsets = clock("offsets", lambda: provider.window_offsets(window))
    centers = clock("shift", lambda: shift_to_centers(cloud.positions, offsets))
    k = config.k_proposals or default_proposal_count(len(cloud))
    seed_indices = clock("fps", lambda: farthest_point_sample(centers, k))
    group_candidates = centers if config.group_space == "shifted" else cloud.positions
    groups = clock(
        "group", lambda: radius_group(centers[seed_indices], group_candidates, config.group_radius_m)
    )
    if config.group_space == "raw":
        # Grouping by raw positions around a shifted center need not reach
        # the seed point itself; keep proposals nonempty and seed-owning.
        groups = [
            members if seed in members else np.union1d(members, [seed])
            for seed, members in zip(seed_indices, groups)
        ]
    proposals = clock(
        "refine",
        lambda: [
            refine_proposal(cloud.positions, centers, members, seed)
            for seed, members in zip(seed_indices, groups)
        ],
    )
    cluster_ids = clock(
        "dbscan",
        lambda: dbscan(
            np.stack([p.embedding for p in proposals]) if proposals else np.zeros((0, 3)),
            config.dbscan_eps_m,
            config.dbscan_min_pts,
        ),
    )
    segmentation = clock(
        "merge",
        lambda: merge_and_assign(centers, proposals, cluster_ids, cloud.prior, thing_mask),
    )
    result = WindowSegmentation(segmentation=segmentation, origins=cloud.origin, window=window)
    return result, timing, len(cloud), len(proposals)


def segment_sequence(config: PipelineConfig, sequence: str) -> SegmentStats:
    """Run the full window pipeline for one sequence and write predictions."""
    config.validate()
    wall_start = time.perf_counter()
    class_map = ClassMap.semantic_kitti()
    scans, lidar_poses, _ = load_sequence(config.dataset_root, sequence)
    provider = build_provider(config, sequence, scans, lidar_poses, class_map)
    priors = [provider.semantic_prior(k).matrix for k in range(len(scans))]
    windows = plan_windows(len(scans), config.window_n, config.effective_stride)
    scan_sizes = [len(scan) for scan in scans]

    def job(window):
        return _segment_window(config, window, scans, lidar_poses, priors, provider, class_map.thing_mask)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(job, windows))
    else:
        results = [job(window) for window in windows]

    out_seq = Path(config.out_dir) / sequence
    pred_dir = out_seq / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)

    state = TrackState()
    previous: WindowSegmentation | None = None
    emitted = [False] * len(scans)
    window_rows: list[str] = []
    core_time = 0.0
    core_points = 0
    uncovered_total = 0
    for (window_seg, timing, n_points, n_proposals), window in zip(results, windows):
        overlap = (
            overlap_origins_between(previous.window, window, scan_sizes)
            if previous is not None
            else np.zeros((0, 2), dtype=np.int64)
        )
        state, stitched = stitch(state, previous, window_seg, overlap)
        previous = stitched
        ids = stitched.segmentation.instance
        n_instances = len(np.unique(ids[ids > 0]))
        uncovered_total += stitched.segmentation.uncovered_thing_points
        core = timing["shift"] + timing["fps"] + timing["group"]
        core_time += core
        core_points += n_points
        row = (
            f"window start={window[0]} n={window[1]} points={n_points} "
            f"proposals={n_proposals} instances={n_instances} "
            + " ".join(f"{name}={seconds * 1e3:.1f}ms" for name, seconds in timing.items())
        )
        window_rows.append(row)
        logger.info("%s: %s", sequence, row)

        for scan_index in range(window[0], window[0] + window[1]):
            if emitted[scan_index]:
                continue
            rows = stitched.rows_for_scan(scan_index)
            raw_semantic = class_map.train_to_raw[stitched.segmentation.semantic[rows]]
            instance = stitched.segmentation.instance[rows]
            sk_formats.write_predictions(
                pred_dir / f"{scan_index:06d}.label",
                np.stack([raw_semantic, instance], axis=1),
            )
            emitted[scan_index] = True

    rate = core_points / core_time if core_time > 0 else float("inf")
    stats = SegmentStats(
        sequence=sequence,
        n_scans=len(scans),
        total_points=int(sum(scan_sizes)),
        window_rows=window_rows,
        core_points_per_sec=rate,
        wall_time_s=time.perf_counter() - wall_start,
        uncovered_thing_points=uncovered_total,
    )
    log_lines = window_rows + [
        f"core shift+fps+group throughput: {rate:,.0f} points/sec",
        f"uncovered thing points: {uncovered_total}",
        f"wall time: {stats.wall_time_s:.2f} s",
    ]
    (out_seq / "run_log.txt").write_text("\n".join(log_lines) + "\n")
    logger.info("%s: %s", sequence, log_lines[-3])
    return stats


def _sequence_scan_counts(seq_dir: Path) -> list[tuple[str, int]]:
    names = []
    for path in sorted((seq_dir / "velodyne").glob("*.bin")):
        size = path.stat().st_size
        if size % sk_formats.POINT_RECORD_BYTES:
            raise CountMismatch(f"{path}: truncated scan file")
        names.append((path.stem, size // sk_formats.POINT_RECORD_BYTES))
    if not names:
        raise ConfigError(f"no scans under {seq_dir / 'velodyne'}")
    return names


def evaluate_directories(
    pred_root,
    dataset_root,
    sequences,
    class_map: ClassMap,
    out_dir,
) -> tuple[dict[str, LSTQReport], LSTQReport]:
    """Score predictions per sequence plus an all-sequence accumulation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    overall = SequenceEvaluator(class_map)
    reports: dict[str, LSTQReport] = {}
    for sequence in sequences:
        seq_dir = Path(dataset_root) / sequence
        evaluator = SequenceEvaluator(class_map)
        for stem, count in _sequence_scan_counts(seq_dir):
            gt_path = seq_dir / "labels" / f"{stem}.label"
            # Predictions live under <seq>/predictions; falling back to
            # <seq>/labels lets a dataset be scored against itself.
            pred_path = Path(pred_root) / sequence / "predictions" / f"{stem}.label"
            if not pred_path.exists():
                fallback = Path(pred_root) / sequence / "labels" / f"{stem}.label"
                if fallback.exists():
                    pred_path = fallback
                else:
                    raise CountMismatch(f"missing prediction file {pred_path}")
            gt = sk_formats.read_labels(gt_path, count)
            pred = sk_formats.read_labels(pred_path, count)
            gt_sem = remap(gt, class_map)
            pred_sem = remap(pred, class_map)
            evaluator.add_scan(pred_sem, pred.instance_id, gt_sem, gt.instance_id)
            overall.add_scan(pred_sem, pred.instance_id, gt_sem, gt.instance_id)
        report = evaluator.report()
        reports[sequence] = report
        (out_dir / f"report_{sequence}.kv").write_text(report.as_keyvalues(class_map.names))
        (out_dir / f"report_{sequence}.txt").write_text(
            report.as_table(class_map.names, class_map.thing_mask)
        )
    overall_report = overall.report()
    (out_dir / "report_overall.kv").write_text(overall_report.as_keyvalues(class_map.names))
    (out_dir / "report_overall.txt").write_text(
        overall_report.as_table(class_map.names, class_map.thing_mask)
    )
    return reports, overall_report


def reemit_fixture_scores(fixture_path, out_path=None) -> list[tuple[str, float, float, float, float | None]]:
    """Recompute the combined score from (s_assoc, s_cls) percent pairs.

    Fixture lines: ``name s_assoc s_cls [expected_combined]``, comments with
    '#'. Returns (name, s_assoc, s_cls, computed, expected) rows.
    """
    rows = []
    for lineno, line in enumerate(Path(fixture_path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ConfigError(f"{fixture_path}:{lineno}: expected 3 or 4 columns")
        name, assoc_pct, cls_pct = parts[0], float(parts[1]), float(parts[2])
        expected = float(parts[3]) if len(parts) == 4 else None
        computed = 100.0 * lstq(cls_pct / 100.0, assoc_pct / 100.0)
        rows.append((name, assoc_pct, cls_pct, computed, expected))
    if out_path is not None:
        lines = [
            f"{name}: {computed:.2f}" + (f" (published {expected:.2f})" if expected is not None else "")
            for name, _, _, computed, expected in rows
        ]
        Path(out_path).write_text("\n".join(lines) + "\n")
    return rows


def run_ablation(
    config: PipelineConfig,
    flip_grid: list[float],
    prior_kinds: list[str],
) -> str:
    """Segment + evaluate over the prior x flip-probability grid."""
    class_map = ClassMap.semantic_kitti()
    header = (
        f"{'prior':<12s} {'flip':>5s} {'LSTQ':>7s} {'S_assoc':>8s} {'S_cls':>7s} "
        f"{'IoU_Th':>7s} {'IoU_St':>7s}"
    )
    lines = [header, "-" * len(header)]
    for prior_kind in prior_kinds:
        for flip_prob in flip_grid:
            tag = f"ablate_{prior_kind}_{flip_prob:g}"
            sub = replace(
                config,
                prior_kind=prior_kind,
                flip_prob=flip_prob,
                out_dir=Path(config.out_dir) / tag,
            )
            for sequence in config.sequences:
                segment_sequence(sub, sequence)
            _, overall = evaluate_directories(
                sub.out_dir, config.dataset_root, config.sequences, class_map, sub.out_dir
            )
            lines.append(
                f"{prior_kind:<12s} {flip_prob:5.2f} {100 * overall.lstq:7.2f} "
                f"{100 * overall.s_assoc:8.2f} {100 * overall.s_cls:7.2f} "
                f"{100 * overall.iou_th:7.2f} {100 * overall.iou_st:7.2f}"
            )
    return "\n".join(lines) + "\n"


def inspect_path(path) -> str:
    """Human-readable summary of any supported file."""
    path = Path(path)
    if path.suffix == ".bin":
        scan = sk_formats.read_scan(path)
        if len(scan) == 0:
            return f"{path}: scan with 0 points"
        lo, hi = scan.points.min(axis=0), scan.points.max(axis=0)
        return (
            f"{path}: scan with {len(scan)} points\n"
            f"  x [{lo[0]:.2f}, {hi[0]:.2f}] y [{lo[1]:.2f}, {hi[1]:.2f}] "
            f"z [{lo[2]:.2f}, {hi[2]:.2f}]\n"
            f"  feature [{scan.feature.min():.3f}, {scan.feature.max():.3f}]"
        )
    if path.suffix in (".label", ".offset", ".conf"):
        size = path.stat().st_size
        if path.suffix == ".offset":
            return f"{path}: {size // 12} offset rows"
        if path.suffix == ".conf":
            return f"{path}: {size} bytes of confidence rows (row width depends on class count)"
        labels = sk_formats.read_labels(path, size // sk_formats.LABEL_RECORD_BYTES)
        raw_values, raw_counts = np.unique(labels.semantic_raw, return_counts=True)
        top = sorted(zip(raw_counts, raw_values), reverse=True)[:8]
        instances = np.unique(labels.instance_id[labels.instance_id > 0])
        histogram = ", ".join(f"{value}:{count}" for count, value in top)
        return (
            f"{path}: {len(labels)} labels, {len(instances)} instances\n"
            f"  raw id histogram (top): {histogram}"
        )
    if path.name == "poses.txt":
        poses = sk_formats.read_poses(path)
        if not poses:
            return f"{path}: 0 poses"
        travel = float(np.linalg.norm(poses[-1].translation - poses[0].translation))
        return f"{path}: {len(poses)} camera-frame poses, net travel {travel:.2f} m"
    if path.name == "calib.txt":
        calib = sk_formats.read_calib(path)
        return f"{path}: Tr rotation\n{calib.rotation}\n  translation {calib.translation}"
    if path.suffix == ".cfg":
        scene = SceneConfig.load(path)
        return (
            f"{path}: scene with {scene.n_scans} scans x {scene.points_per_scan} points, "
            f"{scene.n_objects} objects, seed {scene.seed}"
        )
    if path.suffix == ".kv":
        return f"{path}:\n{path.read_text().rstrip()}"
    raise ConfigError(f"{path}: unsupported file kind")


def cmd_synth(args) -> int:
    scene_path = args.scene_config or bundled_path("reference_scene.cfg")
    scene = SceneConfig.load(scene_path)
    if args.seed is not None:
        scene.seed = args.seed
        scene.validate()
    class_map = ClassMap.semantic_kitti()
    scans, poses, gt = generate(scene)
    seq_dir = write_dataset(args.out, args.sequence, scans, poses, gt, class_map, scene_config=scene)
    if args.emit_offsets:
        # Sensor-frame oracle offsets, one file per scan; consume with
        # source=files, offset_frame=sensor (the labels/ directory already
        # serves as the semantic input).
        offset_dir = seq_dir / "oracle_offsets"
        offset_dir.mkdir(exist_ok=True)
        for k, scan in enumerate(scans):
            sk_formats.write_offsets(
                offset_dir / f"{k:06d}.offset", gt.centers[k] - scan.points
            )
    total = sum(len(scan) for scan in scans)
    print(
        f"wrote {len(scans)} scans ({total} points, {scene.n_objects} objects) to {seq_dir}"
    )
    return 0


def _config_from_args(args) -> PipelineConfig:
    overrides = {
        "dataset_root": args.dataset_root,
        "out_dir": args.out,
        "sequences": tuple(args.sequences.replace(",", " ").split()) if args.sequences else None,
        "window_n": args.window_n,
        "stride": args.stride,
        "prior_kind": args.prior,
        "source": args.source,
        "scene_config": args.scene_config,
        "semantic_dir": args.semantic_dir,
        "confidence_dir": args.confidence_dir,
        "offset_dir": args.offset_dir,
        "offset_frame": args.offset_frame,
        "flip_prob": args.flip_prob,
        "offset_sigma": args.offset_sigma,
        "noise_seed": args.noise_seed,
        "k_proposals": args.k_proposals,
        "group_radius_m": args.group_radius,
        "dbscan_eps_m": args.dbscan_eps,
        "dbscan_min_pts": args.dbscan_min_pts,
        "group_space": args.group_space,
        "threads": args.threads,
        "seed": args.seed,
    }
    if args.config:
        config = PipelineConfig.from_file(args.config, **overrides)
    else:
        config = PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})
    config.validate()
    return config


def cmd_segment(args) -> int:
    config = _config_from_args(args)
    for sequence in config.sequences:
        stats = segment_sequence(config, sequence)
        print(
            f"{sequence}: {stats.n_scans} scans, {stats.total_points} points, "
            f"{stats.core_points_per_sec:,.0f} points/sec core, "
            f"{stats.wall_time_s:.2f} s wall"
        )
    return 0


def cmd_evaluate(args) -> int:
    out_dir = Path(args.out)
    if args.fixture:
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = reemit_fixture_scores(args.fixture, out_dir / "fixture_scores.kv")
        for name, assoc, cls_value, computed, expected in rows:
            suffix = f" (published {expected:.2f})" if expected is not None else ""
            print(f"{name}: s_assoc={assoc:.2f} s_cls={cls_value:.2f} -> {computed:.2f}{suffix}")
        return 0
    if args.pred_root is None:
        raise ConfigError("evaluate requires --pred-root (or --fixture)")
    class_map = ClassMap.semantic_kitti()
    sequences = tuple(args.sequences.replace(",", " ").split()) if args.sequences else ("00",)
    reports, overall = evaluate_directories(
        args.pred_root, args.dataset_root, sequences, class_map, out_dir
    )
    for sequence, report in reports.items():
        print(f"sequence {sequence}:")
        print(report.as_table(class_map.names, class_map.thing_mask))
    if len(reports) > 1:
        print("overall:")
        print(overall.as_table(class_map.names, class_map.thing_mask))
    return 0


def cmd_ablate(args) -> int:
    config = _config_from_args(args)
    flip_grid = [float(tok) for tok in args.flip_grid.replace(",", " ").split()] if args.flip_grid else []
    prior_kinds = (
        [tok for tok in args.prior_kinds.replace(",", " ").split()]
        if args.prior_kinds
        else [ONE_HOT, CONFIDENCE]
    )
    table = run_ablation(config, flip_grid, prior_kinds)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_inspect(args) -> int:
    for path in args.paths:
        print(inspect_path(path))
    return 0


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key-value pipeline config file")
    parser.add_argument("--dataset-root", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=None)
    parser.add_argument("--sequences", default=None, help="comma or space separated")
    parser.add_argument("--window-n", type=int, default=None, dest="window_n")
    parser.add_argument("--stride", type=int, default=None)
    parser.add_argument("--prior", choices=[ONE_HOT, CONFIDENCE], default=None)
    parser.add_argument("--source", choices=["oracle", "files"], default=None)
    parser.add_argument("--scene-config", type=Path, default=None, dest="scene_config")
    parser.add_argument("--semantic-dir", default=None, dest="semantic_dir")
    parser.add_argument("--confidence-dir", default=None, dest="confidence_dir")
    parser.add_argument("--offset-dir", default=None, dest="offset_dir")
    parser.add_argument("--offset-frame", choices=["window", "sensor"], default=None, dest="offset_frame")
    parser.add_argument("--flip-prob", type=float, default=None, dest="flip_prob")
    parser.add_argument("--offset-sigma", type=float, default=None, dest="offset_sigma")
    parser.add_argument("--noise-seed", type=int, default=None, dest="noise_seed")
    parser.add_argument("--k-proposals", type=int, default=None, dest="k_proposals")
    parser.add_argument("--group-radius", type=float, default=None, dest="group_radius")
    parser.add_argument("--dbscan-eps", type=float, default=None, dest="dbscan_eps")
    parser.add_argument("--dbscan-min-pts", type=int, default=None, dest="dbscan_min_pts")
    parser.add_argument("--group-space", choices=["shifted", "raw"], default=None, dest="group_space")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panseg4d",
        description="4D panoptic LiDAR segmentation pipeline and evaluator",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--scene-config", type=Path, default=None, dest="scene_config")
    synth.add_argument("--out", type=Path, required=True)
    synth.add_argument("--sequence", default="00")
    synth.add_argument("--seed", type=int, default=None)
    synth.add_argument("--emit-offsets", action="store_true", dest="emit_offsets",
                       help="also write sensor-frame oracle offset files")
    synth.set_defaults(handler=cmd_synth)

    segment = sub.add_parser("segment", help="run the instance pipeline")
    _add_pipeline_flags(segment)
    segment.set_defaults(handler=cmd_segment)

    evaluate = sub.add_parser("evaluate", help="score predictions against labels")
    evaluate.add_argument("--pred-root", type=Path, default=None, dest="pred_root")
    evaluate.add_argument("--dataset-root", type=Path, default=Path(os.environ.get(ENV_DATASET_ROOT, ".")))
    evaluate.add_argument("--sequences", default=None)
    evaluate.add_argument("--out", type=Path, required=True)
    evaluate.add_argument("--fixture", type=Path, default=None,
                          help="re-emit combined scores from (s_assoc, s_cls) pairs")
    evaluate.set_defaults(handler=cmd_evaluate)

    ablate = sub.add_parser("ablate", help="sweep priors x label noise")
    _add_pipeline_flags(ablate)
    ablate.add_argument("--flip-grid", default=None, dest="flip_grid",
                        help="comma separated label flip probabilities")
    ablate.add_argument("--prior-kinds", default=None, dest="prior_kinds")
    ablate.set_defaults(handler=cmd_ablate)

    inspect = sub.add_parser("inspect", help="summarize a supported file")
    inspect.add_argument("paths", nargs="+", type=Path)
    inspect.set_defaults(handler=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
