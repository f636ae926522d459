"""File-based stage orchestration: ground -> doc -> render.

Every stage writes its outputs under the sequence's output directory plus a
``stage.json`` record holding a content hash of its inputs. A stage is
skipped when the record matches and all its outputs exist. A stage that
actually runs gets a fresh stamp, and since downstream keys include the
upstream stamp, its dependents rerun too.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import threading
import time
import uuid
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import yaml

from . import doc, ground, render
from . import io as dio
from .config import PipelineConfig, stable_hash
from .core import Label, PointCloud
from .plotting import depth_preview
from .errors import CorruptFileError

log = logging.getLogger(__name__)

STAGES = ("ground", "doc", "render")


def file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


class FrameLoader:
    """Thread-safe LRU cache of decoded clouds, optionally with a label directory."""

    def __init__(self, clouds: List[Path], labels_dir: Optional[Path] = None, max_frames: int = 128):
        self.clouds = list(clouds)
        self.labels_dir = labels_dir
        self.max_frames = max_frames
        self._cache: "OrderedDict[int, PointCloud]" = OrderedDict()
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.clouds)

    def __call__(self, i: int) -> PointCloud:
        with self._lock:
            c = self._cache.get(i)
            if c is not None:
                self._cache.move_to_end(i)
                return c
        cloud = dio.read_cloud_bin(self.clouds[i])
        if self.labels_dir is not None:
            cloud = PointCloud(cloud.points, dio.read_labels(label_path(self.labels_dir, i), len(cloud)))
        with self._lock:
            self._cache[i] = cloud
            while len(self._cache) > self.max_frames:
                self._cache.popitem(last=False)
        return cloud


def label_path(d, i) -> Path:
    return Path(d) / f"{i:06d}.label"


def read_sensor_resolution(root) -> Dict[str, float]:
    """``vertical/horizontal_resolution_deg`` from ``sensor.yaml`` next to the manifest, if present."""
    p = Path(root) / "sensor.yaml"
    if not p.exists():
        return {}
    data = yaml.safe_load(p.read_text()) or {}
    return {k: float(v) for k, v in data.items() if k in ("vertical_resolution_deg", "horizontal_resolution_deg")}


@dataclass
class StageReport:
    name: str
    cached: bool
    frames: int
    wall_time: float
    per_frame: float
    extra: Dict[str, float] = field(default_factory=dict)


class Pipeline:
    """Runs the annotation stages for one manifest."""

    def __init__(self, manifest: dio.SequenceManifest, config: PipelineConfig = PipelineConfig(),
                 resume: bool = False, force: bool = False, previews: bool = True):
        self.manifest = manifest
        sensor = read_sensor_resolution(manifest.root)
        self.config = config.with_sensor_resolution(sensor.get("vertical_resolution_deg"),
                                                    sensor.get("horizontal_resolution_deg"))
        self.out = Path(manifest.output_dir)
        self.resume = resume
        self.force = force
        self.previews = previews
        self._traj = None
        self._input_digest = None

    # -- shared inputs -----------------------------------------------------
    @property
    def traj(self):
        if self._traj is None:
            self._traj = self.manifest.load_trajectory()
        return self._traj

    def rig(self) -> dio.CameraRig:
        return dio.read_rig(self.config.rig) if self.config.rig else self.manifest.load_rig()

    def input_digest(self) -> str:
        if self._input_digest is None:
            files = [*self.manifest.clouds, self.manifest.poses]
            if self.manifest.lidar_times is not None:
                files.append(self.manifest.lidar_times)
            self._input_digest = file_digest(files)
        return self._input_digest

    def stage_dir(self, stage) -> Path:
        return self.out / {"ground": "ground", "doc": "labels", "render": "depth"}[stage]

    # -- stage records -----------------------------------------------------
    def _record_path(self, stage):
        return self.stage_dir(stage) / "stage.json"

    def read_record(self, stage) -> Optional[dict]:
        p = self._record_path(stage)
        if not p.exists():
            return None
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError:
            return None

    def stage_key(self, stage) -> str:
        parts = {"params": self.config.stage_params(stage), "manifest_pose_format": self.manifest.pose_format}
        if stage == "ground":
            parts["inputs"] = self.input_digest()
        else:
            prev = STAGES[STAGES.index(stage) - 1]
            rec = self.read_record(prev)
            parts["upstream"] = rec.get("stamp") if rec and rec.get("complete") else None
        if stage == "render":
            rig = Path(self.config.rig) if self.config.rig else self.manifest.rig
            parts["camera"] = file_digest([rig, self.manifest.camera_times])
        return stable_hash(parts)

    def expected_outputs(self, stage) -> List[Path]:
        d = self.stage_dir(stage)
        if stage in ("ground", "doc"):
            return [label_path(d, i) for i in range(len(self.manifest.clouds))]
        n = len(self.manifest.load_camera_times())
        return [d / f"{j:06d}.png" for j in range(n)] + [d / f"{j:06d}.bin" for j in range(n)]

    def is_cached(self, stage) -> bool:
        if self.force:
            return False
        rec = self.read_record(stage)
        if not rec or not rec.get("complete") or rec.get("key") != self.stage_key(stage):
            return False
        return all(p.exists() for p in self.expected_outputs(stage))

    def _write_record(self, stage, key, complete, timings=None):
        rec = {"key": key, "complete": complete, "stamp": uuid.uuid4().hex if complete else None,
               "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}
        if timings is not None:
            rec["timings"] = timings
        p = self._record_path(stage)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(rec, indent=1))

    def _partial_ok(self, stage, key) -> bool:
        """With ``resume``, per-frame outputs of an interrupted run with the same key are kept."""
        rec = self.read_record(stage)
        return bool(self.resume and rec and not rec.get("complete") and rec.get("key") == key)

    # -- stages ------------------------------------------------------------
    def run_ground(self) -> StageReport:
        if self.is_cached("ground"):
            return StageReport("ground", True, len(self.manifest.clouds), 0.0, 0.0)
        key = self.stage_key("ground")
        self._write_record("ground", key, False)
        d = self.stage_dir("ground")
        load = FrameLoader(self.manifest.clouds)
        t0 = time.perf_counter()
        flags = ground.segment_sequence(load, self.traj, self.config.ground, workers=self.config.workers)
        for i, f in enumerate(flags):
            dio.write_labels(label_path(d, i), np.where(f, Label.GROUND, Label.STATIC).astype(np.uint8))
        wall = time.perf_counter() - t0
        n = len(flags)
        log.info("ground: %d frames in %.2f s (%.4f s/frame)", n, wall, wall / max(n, 1))
        self._write_record("ground", key, True, {"wall": wall, "per_frame": wall / max(n, 1)})
        return StageReport("ground", False, n, wall, wall / max(n, 1))

    def run_doc(self) -> StageReport:
        if self.is_cached("doc"):
            return StageReport("doc", True, len(self.manifest.clouds), 0.0, 0.0)
        key = self.stage_key("doc")
        d = self.stage_dir("doc")
        todo = list(range(len(self.manifest.clouds)))
        if self._partial_ok("doc", key):
            todo = [i for i in todo if not label_path(d, i).exists()]
            log.info("doc: resuming, %d frames left", len(todo))
        self._write_record("doc", key, False)
        load = FrameLoader(self.manifest.clouds, self.stage_dir("ground"))
        times: List[float] = []
        lock = threading.Lock()

        def on_frame(i, labels, dt):
            dio.write_labels(label_path(d, i), labels)
            with lock:
                times.append(dt)
            log.debug("doc: frame %d %.3f s, %d dynamic", i, dt, int(np.sum(labels == Label.DYNAMIC)))

        t0 = time.perf_counter()
        doc.classify_sequence(load, self.traj, self.config.keyframes, self.config.voting,
                              workers=self.config.workers, indices=todo, on_frame=on_frame)
        wall = time.perf_counter() - t0
        per = float(np.mean(times)) if times else 0.0
        log.info("doc: %d frames in %.2f s (%.4f s/frame)", len(todo), wall, per)
        self._write_record("doc", key, True, {"wall": wall, "per_frame": per})
        return StageReport("doc", False, len(todo), wall, per)

    def run_render(self) -> StageReport:
        if self.is_cached("render"):
            n = len(self.manifest.load_camera_times())
            return StageReport("render", True, n, 0.0, 0.0)
        key = self.stage_key("render")
        d = self.stage_dir("render")
        cam_times = self.manifest.load_camera_times()
        todo = list(range(len(cam_times)))
        if self._partial_ok("render", key):
            todo = [j for j in todo if not ((d / f"{j:06d}.bin").exists() and (d / f"{j:06d}.png").exists())]
            log.info("render: resuming, %d maps left", len(todo))
        self._write_record("render", key, False)
        rig = self.rig()
        load = FrameLoader(self.manifest.clouds, self.stage_dir("doc"))
        rows: Dict[int, list] = {}
        times: List[float] = []
        lock = threading.Lock()
        params = self.config.render

        def one(j):
            t1 = time.perf_counter()
            res = render.render_at(float(cam_times[j]), load, self.traj, rig, params)
            dio.write_depth_bin(res.depth, d / f"{j:06d}.bin")
            dio.write_depth_png(res.depth, d / f"{j:06d}.png")
            if self.previews:
                depth_preview(res.depth, self.out / "previews" / f"{j:06d}.png", title=f"t = {cam_times[j]:.3f} s")
            dt = time.perf_counter() - t1
            with lock:
                rows[j] = [j, float(cam_times[j]), res.density, len(res.static_frames), res.dynamic_frame]
                times.append(dt)
            log.debug("render: map %d %.3f s, density %.3f", j, dt, res.density)

        t0 = time.perf_counter()
        if self.config.workers <= 1:
            for j in todo:
                one(j)
        else:
            with ThreadPoolExecutor(max_workers=self.config.workers) as ex:
                list(ex.map(one, todo))
        wall = time.perf_counter() - t0
        self._write_density(rows)
        per = float(np.mean(times)) if times else 0.0
        dens = self.density_table()
        mean_density = float(np.mean([r["density"] for r in dens])) if dens else 0.0
        log.info("render: %d maps in %.2f s (%.4f s/map), mean density %.3f", len(todo), wall, per, mean_density)
        self._write_record("render", key, True, {"wall": wall, "per_frame": per})
        return StageReport("render", False, len(todo), wall, per, {"mean_density": mean_density})

    def _write_density(self, rows):
        p = self.out / "density.csv"
        old = {r["index"]: r for r in self.density_table()} if p.exists() else {}
        for j, r in rows.items():
            old[j] = dict(zip(("index", "time", "density", "static_frames", "dynamic_frame"), r))
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "time", "density", "static_frames", "dynamic_frame"])
            for j in sorted(old):
                r = old[j]
                w.writerow([j, f"{float(r['time']):.6f}", f"{float(r['density']):.6f}", r["static_frames"],
                            r["dynamic_frame"]])

    def density_table(self) -> List[dict]:
        p = self.out / "density.csv"
        if not p.exists():
            return []
        with open(p, newline="") as f:
            rows = list(csv.DictReader(f))
        for r in rows:
            r["index"] = int(r["index"])
            r["density"] = float(r["density"])
        return rows

    def run(self, stages=STAGES, on_stage: Optional[Callable[[StageReport], None]] = None) -> List[StageReport]:
        out = []
        for s in stages:
            rep = getattr(self, f"run_{s}")()
            log.info("stage %s: %s", s, "cached" if rep.cached else f"{rep.wall_time:.2f} s")
            if on_stage is not None:
                on_stage(rep)
            out.append(rep)
        return out

    def check_upstream(self, stage):
        """Make sure the stage feeding ``stage`` has complete outputs."""
        prev = STAGES[STAGES.index(stage) - 1]
        missing = [p for p in self.expected_outputs(prev) if not p.exists()]
        if missing:
            raise CorruptFileError(f"{stage} needs the {prev} stage outputs; missing {missing[0]}")
