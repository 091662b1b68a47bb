"""End-to-end replay harness: per-window matching, keep/mask decisions,
recall metrics, threshold sweeps and the background compositor.

Replay partitions the frame clock into consecutive windows of `window_s`
(10 s by default, matching clip-level evaluation); the assignment is solved
once per window and per-frame decisions are emitted from that solution.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ClockSkew, DimensionMismatch, MissingGroundTruth
from .geometry import (
    AnchorPose,
    CameraExtrinsics,
    CameraIntrinsics,
    HeadDetection,
    head_box_to_world,
)
from .matching import (
    AssignmentResult,
    CostMatrix,
    Tracklet,
    mahalanobis,
    overlap_matrix,
    solve_assignment,
)
from .nlos import NlosDetectorModel
from .tracking import InitPolicy, NoiseModel, TagTrajectory, UwbSample, track_tag


@dataclass
class ReplayConfig:
    anchor: AnchorPose
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    noise: NoiseModel
    w_r: float
    h_tag: float
    c_th: float = 1.5
    u_th: float = 1.5
    window_s: float = 10.0
    align_tolerance: float = 0.25
    min_support: int = 10  # frames of shared confident evidence required per pair
    detector: Optional[NlosDetectorModel] = None  # None => treat all samples as LoS
    init: InitPolicy = field(default_factory=InitPolicy)


@dataclass
class FrameDecision:
    timestamp: float
    # (tag_id, tracklet_id, head box (u, v, w, h), keep flag)
    assignments: List[Tuple[str, str, Tuple[float, float, float, float], bool]]
    unmatched: List[str]  # tracklet ids present this frame but kept by no tag


@dataclass
class RunMetrics:
    recall: float
    misidentification_count: int
    misid_rate: float
    frames_total: int
    frames_visible: int
    mean_latency_ms: float
    per_tag_recall: Dict[str, float] = field(default_factory=dict)
    per_crowd_size: Dict[int, float] = field(default_factory=dict)


class _SequenceDetector:
    def __init__(self, flags):
        self._flags = list(flags)
        self._k = 0

    def is_nlos(self, features) -> bool:
        flag = self._flags[self._k]
        self._k += 1
        return bool(flag)


def _check_sorted(times: np.ndarray, what: str):
    if times.size > 1 and np.any(np.diff(times) < -1.0):
        raise ClockSkew(f"{what} stream goes backwards by more than 1 s")


def _filter_tags(samples: Sequence[UwbSample], cfg: ReplayConfig) -> Dict[str, TagTrajectory]:
    """One switched-UKF trajectory per tag; detector decisions batched upfront."""
    by_tag: Dict[str, List[UwbSample]] = {}
    for s in samples:
        by_tag.setdefault(s.tag_id, []).append(s)
    trajectories = {}
    for tag_id, tag_samples in by_tag.items():
        tag_samples.sort(key=lambda s: s.timestamp)
        if cfg.detector is None:
            flags = [False] * len(tag_samples)
        else:
            feats = np.array([s.features for s in tag_samples])
            flags = list(cfg.detector.predict_proba_batch(feats) > cfg.detector.threshold)
        trajectories[tag_id] = track_tag(
            tag_samples,
            cfg.anchor,
            cfg.noise,
            _SequenceDetector(flags[1:]),
            init=cfg.init,
            u_th=cfg.u_th,
        )
    return trajectories


def detections_to_tracklets(
    detections: Sequence[HeadDetection],
    cfg: ReplayConfig,
) -> Dict[str, Tracklet]:
    """Group detections by tracklet id and back-project to world ground points.

    The z component is pinned to the calibrated tag height so the camera and
    UWB points live on comparable heights.
    """
    by_id: Dict[str, List[HeadDetection]] = {}
    for d in detections:
        by_id.setdefault(d.tracklet_id, []).append(d)
    tracklets = {}
    for tid, dets in by_id.items():
        dets.sort(key=lambda d: d.timestamp)
        pts = np.array(
            [head_box_to_world(d, cfg.intrinsics, cfg.extrinsics, cfg.w_r) for d in dets]
        )
        pts[:, 2] = cfg.h_tag
        tracklets[tid] = Tracklet(
            tracklet_id=tid,
            timestamps=np.array([d.timestamp for d in dets]),
            positions=pts,
        )
    return tracklets


def run_replay(
    uwb_samples: Sequence[UwbSample],
    detections: Sequence[HeadDetection],
    cfg: ReplayConfig,
    ground_truth: Optional[Sequence[dict]] = None,
) -> Tuple[List[FrameDecision], Optional[RunMetrics]]:
    """Replay the streams, matching per window; metrics if ground truth is given."""
    _check_sorted(np.array([s.timestamp for s in uwb_samples]), "uwb")
    _check_sorted(np.array([d.timestamp for d in detections]), "tracklet")

    t_start = time.perf_counter()
    trajectories = _filter_tags(uwb_samples, cfg)
    tag_ids = sorted(trajectories)
    tracklets = detections_to_tracklets(detections, cfg)

    frame_times = np.unique(np.round([d.timestamp for d in detections], 6))
    dets_by_frame: Dict[float, List[HeadDetection]] = {}
    for d in detections:
        dets_by_frame.setdefault(round(d.timestamp, 6), []).append(d)

    decisions: List[FrameDecision] = []
    if frame_times.size == 0:
        return decisions, None

    t0 = frame_times[0]
    n_windows = int(math.floor((frame_times[-1] - t0) / cfg.window_s)) + 1
    for w in range(n_windows):
        lo = t0 + w * cfg.window_s
        hi = lo + cfg.window_s
        in_window = frame_times[(frame_times >= lo - 1e-9) & (frame_times < hi - 1e-9)]
        if in_window.size == 0:
            continue
        assigned = _solve_window(trajectories, tag_ids, tracklets, in_window, cfg)
        for t in in_window:
            frame_dets = dets_by_frame.get(float(t), [])
            rows = []
            unmatched = []
            for d in frame_dets:
                tag = assigned.get(d.tracklet_id)
                box = (d.u, d.v, d.w_p, d.h_p)
                if tag is not None:
                    rows.append((tag, d.tracklet_id, box, True))
                else:
                    rows.append(("", d.tracklet_id, box, False))
                    unmatched.append(d.tracklet_id)
            decisions.append(FrameDecision(timestamp=float(t), assignments=rows, unmatched=unmatched))

    elapsed_ms = (time.perf_counter() - t_start) * 1000.0
    metrics = None
    if ground_truth is not None:
        metrics = evaluate_recall(decisions, ground_truth)
        metrics.mean_latency_ms = elapsed_ms / max(1, len(decisions))
    return decisions, metrics


def _solve_window(
    trajectories: Dict[str, TagTrajectory],
    tag_ids: List[str],
    tracklets: Dict[str, Tracklet],
    window_times: np.ndarray,
    cfg: ReplayConfig,
) -> Dict[str, str]:
    """Cost matrix + assignment over one window; returns tracklet id -> tag id."""
    t_lo, t_hi = window_times[0], window_times[-1]

    # restrict tracklets to the window
    active: List[Tuple[str, np.ndarray, np.ndarray]] = []
    for tid in sorted(tracklets):
        trk = tracklets[tid]
        m = (trk.timestamps >= t_lo - 1e-9) & (trk.timestamps <= t_hi + 1e-9)
        if np.any(m):
            active.append((tid, np.round(trk.timestamps[m], 6), trk.positions[m]))
    if not active or not tag_ids:
        return {}

    # per-tag query cache over the window frame clock
    queries: Dict[str, Dict[float, Optional[tuple]]] = {}
    for tag in tag_ids:
        traj = trajectories[tag]
        cache = {}
        for t in window_times:
            q = traj.query(float(t), cfg.align_tolerance)
            if q is None or q.uncertain:
                cache[float(t)] = None
            else:
                cache[float(t)] = (q.position, q.position_cov)
        queries[tag] = cache

    n, m = len(tag_ids), len(active)
    costs = np.full((n, m), math.inf)
    support = np.zeros((n, m), dtype=int)
    for i, tag in enumerate(tag_ids):
        cache = queries[tag]
        for j, (tid, ts, pts) in enumerate(active):
            total, count = 0.0, 0
            for t, p in zip(ts, pts):
                q = cache.get(float(t))
                if q is None:
                    continue
                total += mahalanobis(p - q[0], q[1])
                count += 1
            if count >= max(1, cfg.min_support):
                costs[i, j] = total / count
                support[i, j] = count

    time_sets = [set(ts.tolist()) for _, ts, _ in active]
    overlaps = np.zeros((m, m), dtype=bool)
    for a in range(m):
        for b in range(a + 1, m):
            overlaps[a, b] = overlaps[b, a] = not time_sets[a].isdisjoint(time_sets[b])

    result = solve_assignment(CostMatrix(costs=costs, support=support), overlaps, cfg.c_th)
    assigned: Dict[str, str] = {}
    for i in range(n):
        for j in range(m):
            if result.x[i, j]:
                assigned[active[j][0]] = tag_ids[i]
    return assigned


def evaluate_recall(
    decisions: Sequence[FrameDecision],
    ground_truth: Sequence[dict],
) -> RunMetrics:
    """Recall = correctly-identified frames / frames the carrier appeared in.

    Ground-truth records are {t, tracklet_id, person_id, carries_tag} with
    carries_tag holding the tag id (or null). A frame is misidentified for a
    tag when a non-carrier tracklet was kept for it.
    """
    if ground_truth is None or len(ground_truth) == 0:
        raise MissingGroundTruth("ground-truth records required")

    person_of: Dict[Tuple[float, str], str] = {}
    carrier_of_tag: Dict[str, str] = {}
    visible: Dict[str, set] = {}
    for rec in ground_truth:
        t = round(float(rec["t"]), 6)
        person_of[(t, str(rec["tracklet_id"]))] = str(rec["person_id"])
        tag = rec.get("carries_tag")
        if tag:
            carrier_of_tag[str(tag)] = str(rec["person_id"])
            visible.setdefault(str(tag), set()).add(t)

    correct: Dict[str, set] = {tag: set() for tag in carrier_of_tag}
    misid_frames: Dict[str, set] = {tag: set() for tag in carrier_of_tag}
    for dec in decisions:
        t = round(dec.timestamp, 6)
        for tag_id, tracklet_id, _box, keep in dec.assignments:
            if not keep or tag_id not in carrier_of_tag:
                continue
            person = person_of.get((t, tracklet_id))
            if person == carrier_of_tag[tag_id]:
                correct[tag_id].add(t)
            else:
                misid_frames[tag_id].add(t)

    per_tag = {}
    misid_count = 0
    for tag, frames in visible.items():
        per_tag[tag] = len(correct[tag] & frames) / len(frames) if frames else math.nan
        misid_count += len(misid_frames[tag])

    frames_visible = sum(len(f) for f in visible.values())
    recall = (
        float(np.mean([r for r in per_tag.values() if not math.isnan(r)]))
        if any(not math.isnan(r) for r in per_tag.values())
        else math.nan
    )
    return RunMetrics(
        recall=recall,
        misidentification_count=misid_count,
        misid_rate=misid_count / frames_visible if frames_visible else math.nan,
        frames_total=len(decisions),
        frames_visible=frames_visible,
        mean_latency_ms=0.0,
        per_tag_recall=per_tag,
    )


def sweep_threshold(
    uwb_samples: Sequence[UwbSample],
    detections: Sequence[HeadDetection],
    ground_truth: Sequence[dict],
    cfg: ReplayConfig,
    c_th_values: Sequence[float],
    sweep_u_th: bool = False,
) -> List[dict]:
    """Recall / misidentification-rate table over c_th values; AUC by trapezoid.

    With sweep_u_th=True, u_th is swept together with c_th.
    """
    if len(c_th_values) < 2:
        raise ValueError("need at least 2 threshold values")
    rows = []
    from dataclasses import replace

    for c_th in c_th_values:
        run_cfg = replace(cfg, c_th=float(c_th))
        if sweep_u_th:
            run_cfg = replace(run_cfg, u_th=float(c_th))
        _, metrics = run_replay(uwb_samples, detections, run_cfg, ground_truth)
        rows.append(
            {
                "c_th": float(c_th),
                "recall": metrics.recall,
                "misid_rate": metrics.misid_rate,
            }
        )
    return rows


def pr_auc(rows: Sequence[dict]) -> float:
    """Trapezoid-rule area under recall vs misidentification rate."""
    pts = sorted((r["misid_rate"], r["recall"]) for r in rows)
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    if xs.size < 2 or xs[-1] == xs[0]:
        return 0.0
    return float(np.trapezoid(ys, xs))


def compose_mask(
    frame: np.ndarray,
    background: np.ndarray,
    decision: FrameDecision,
) -> np.ndarray:
    """Background image with kept head-box rectangles copied from the live frame."""
    frame = np.asarray(frame)
    background = np.asarray(background)
    if frame.shape != background.shape:
        raise DimensionMismatch(
            f"frame {frame.shape} vs background {background.shape}"
        )
    out = background.copy()
    h, w = frame.shape[:2]
    for _tag, _tid, (u, v, bw, bh), keep in decision.assignments:
        if not keep:
            continue
        x0 = max(0, int(round(u - bw / 2)))
        x1 = min(w, int(round(u + bw / 2)))
        y0 = max(0, int(round(v - bh / 2)))
        y1 = min(h, int(round(v + bh / 2)))
        if x1 > x0 and y1 > y0:
            out[y0:y1, x0:x1] = frame[y0:y1, x0:x1]
    return out


def metrics_csv_row(
    scene_id: str,
    n_people: int,
    n_tags: int,
    cfg: ReplayConfig,
    metrics: RunMetrics,
) -> str:
    return (
        f"{scene_id},{n_people},{n_tags},{cfg.c_th},{cfg.u_th},"
        f"{metrics.recall:.6f},{metrics.misid_rate:.6f},{metrics.mean_latency_ms:.3f}"
    )


METRICS_CSV_HEADER = "scene_id,n_people,n_tags,c_th,u_th,recall,misid_rate,mean_latency_ms"
