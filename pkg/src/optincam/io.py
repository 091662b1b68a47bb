"""File formats: UWB/tracklet/ground-truth JSONL, pipeline config JSON, and
binary PPM (P6) images.

Record field order is fixed so rewritten files are byte-identical.
"""

from __future__ import annotations

import json
from typing import Iterable, List, Optional

import numpy as np

from .errors import SchemaError
from .geometry import (
    AnchorPose,
    CameraExtrinsics,
    CameraIntrinsics,
    HeadDetection,
    PolarMeasurement,
)
from .tracking import NoiseModel, UwbSample

UWB_FIELDS = ("tag_id", "t", "radial_m", "azimuth_rad", "elevation_rad", "feat")
TRACKLET_FIELDS = ("tracklet_id", "t", "u_px", "v_px", "w_px", "h_px")
GROUNDTRUTH_FIELDS = ("t", "tracklet_id", "person_id", "carries_tag")


def _parse_lines(path, fields, kind: str) -> List[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{kind} line {n}: invalid JSON: {e}") from e
            missing = [f for f in fields if f not in rec]
            if missing:
                raise SchemaError(f"{kind} line {n}: missing fields {missing}")
            records.append(rec)
    return records


def read_uwb_jsonl(path) -> List[UwbSample]:
    samples = []
    for rec in _parse_lines(path, UWB_FIELDS, "uwb"):
        try:
            samples.append(
                UwbSample(
                    tag_id=str(rec["tag_id"]),
                    timestamp=float(rec["t"]),
                    z=PolarMeasurement(
                        radial=float(rec["radial_m"]),
                        azimuth=float(rec["azimuth_rad"]),
                        elevation=float(rec["elevation_rad"]),
                    ),
                    features=np.array([float(x) for x in rec["feat"]]),
                )
            )
        except (TypeError, ValueError) as e:
            raise SchemaError(f"uwb record malformed: {e}") from e
    return samples


def write_uwb_jsonl(path, samples: Iterable[UwbSample]):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "tag_id": s.tag_id,
                        "t": s.timestamp,
                        "radial_m": s.z.radial,
                        "azimuth_rad": s.z.azimuth,
                        "elevation_rad": s.z.elevation,
                        "feat": list(map(float, s.features)),
                    }
                )
                + "\n"
            )


def read_tracklet_jsonl(path) -> List[HeadDetection]:
    dets = []
    for rec in _parse_lines(path, TRACKLET_FIELDS, "tracklet"):
        try:
            dets.append(
                HeadDetection(
                    timestamp=float(rec["t"]),
                    tracklet_id=str(rec["tracklet_id"]),
                    u=float(rec["u_px"]),
                    v=float(rec["v_px"]),
                    w_p=float(rec["w_px"]),
                    h_p=float(rec["h_px"]),
                )
            )
        except (TypeError, ValueError) as e:
            raise SchemaError(f"tracklet record malformed: {e}") from e
    return dets


def write_tracklet_jsonl(path, detections: Iterable[HeadDetection]):
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(
                json.dumps(
                    {
                        "tracklet_id": d.tracklet_id,
                        "t": d.timestamp,
                        "u_px": d.u,
                        "v_px": d.v,
                        "w_px": d.w_p,
                        "h_px": d.h_p,
                    }
                )
                + "\n"
            )


def read_groundtruth_jsonl(path) -> List[dict]:
    return _parse_lines(path, GROUNDTRUTH_FIELDS, "groundtruth")


def write_groundtruth_jsonl(path, records: Iterable[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "t": r["t"],
                        "tracklet_id": r["tracklet_id"],
                        "person_id": r["person_id"],
                        "carries_tag": r["carries_tag"],
                    }
                )
                + "\n"
            )


def config_to_dict(
    anchor: AnchorPose,
    intr: CameraIntrinsics,
    extr: CameraExtrinsics,
    noise: NoiseModel,
    w_r: float,
    h_tag: float,
    c_th: float = 1.5,
    u_th: float = 1.5,
    window_s: float = 10.0,
    align_tolerance: float = 0.25,
    seed: int = 0,
    detector_path: Optional[str] = None,
) -> dict:
    return {
        "anchor": {
            "position": anchor.position.tolist(),
            "orientation": anchor.orientation.tolist(),
        },
        "intrinsics": {"f_x": intr.f_x, "f_y": intr.f_y, "c_x": intr.c_x, "c_y": intr.c_y},
        "extrinsics": {
            "rotation": extr.rotation.tolist(),
            "translation": extr.translation.tolist(),
        },
        "noise": {
            "r_los_diag": noise.r_los.diagonal().tolist(),
            "r_nlos_diag": noise.r_nlos.diagonal().tolist(),
            "q_velocity_var": noise.q_velocity_var,
            "q_height_var": noise.q_height_var,
        },
        "w_r": w_r,
        "h_tag": h_tag,
        "c_th": c_th,
        "u_th": u_th,
        "window_s": window_s,
        "align_tolerance": align_tolerance,
        "seed": seed,
        "detector_path": detector_path,
    }


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise SchemaError(f"config: invalid JSON: {e}") from e
    for key in ("anchor", "intrinsics", "extrinsics", "noise", "w_r", "h_tag"):
        if key not in cfg:
            raise SchemaError(f"config: missing key {key!r}")
    return cfg


def save_config(path, cfg: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2)


def parse_config(cfg: dict):
    """Config dict -> (anchor, intrinsics, extrinsics, noise, rest-of-dict)."""
    anchor = AnchorPose(
        position=np.array(cfg["anchor"]["position"], dtype=float),
        orientation=np.array(cfg["anchor"]["orientation"], dtype=float),
    )
    intr = CameraIntrinsics(**{k: float(v) for k, v in cfg["intrinsics"].items()})
    extr = CameraExtrinsics(
        rotation=np.array(cfg["extrinsics"]["rotation"], dtype=float),
        translation=np.array(cfg["extrinsics"]["translation"], dtype=float),
    )
    noise = NoiseModel(
        r_los=np.diag(np.array(cfg["noise"]["r_los_diag"], dtype=float)),
        r_nlos=np.diag(np.array(cfg["noise"]["r_nlos_diag"], dtype=float)),
        q_velocity_var=float(cfg["noise"].get("q_velocity_var", 4.0)),
        q_height_var=float(cfg["noise"].get("q_height_var", 0.25)),
    )
    return anchor, intr, extr, noise


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6) -> (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        tokens.append(data[start:i])
    if tokens[0] != b"P6":
        raise SchemaError("not a binary PPM (P6) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise SchemaError("only maxval 255 PPM supported")
    i += 1  # single whitespace after header
    pixels = np.frombuffer(data[i : i + w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise SchemaError("PPM pixel data truncated")
    return pixels.reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray):
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())
