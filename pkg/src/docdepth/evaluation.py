"""Metrics: classification accuracy, depth error, point-to-point distance,
density and the two-LiDAR cross-check."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .core import Label, PointCloud
from .errors import EvaluationError
from .io import CameraRig, DepthMap


@dataclass
class ClassificationReport:
    tp_static: int
    fp_static: int      # truth dynamic, predicted static
    tp_dynamic: int
    fp_dynamic: int     # truth static, predicted dynamic

    @property
    def gt_static(self):
        return self.tp_static + self.fp_dynamic

    @property
    def gt_dynamic(self):
        return self.tp_dynamic + self.fp_static

    @property
    def fn_dynamic(self):
        return self.fp_static

    @property
    def SA(self) -> Optional[float]:
        return 100.0 * self.tp_static / self.gt_static if self.gt_static else None

    @property
    def DA(self) -> Optional[float]:
        return 100.0 * self.tp_dynamic / self.gt_dynamic if self.gt_dynamic else None

    @property
    def precision(self) -> Optional[float]:
        pred = self.tp_dynamic + self.fp_dynamic
        return self.tp_dynamic / pred if pred else None

    @property
    def recall(self) -> Optional[float]:
        return self.tp_dynamic / self.gt_dynamic if self.gt_dynamic else None

    @property
    def F1(self) -> Optional[float]:
        p, r = self.precision, self.recall
        if p is None or r is None:
            return None
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    @property
    def F1_sa_da(self) -> Optional[float]:
        """Harmonic mean of SA and DA (as fractions), the balanced score used
        in dynamic-removal benchmark tables."""
        sa, da = self.SA, self.DA
        if sa is None or da is None:
            return None
        return 0.0 if sa + da == 0 else 2 * sa * da / (sa + da) / 100.0

    def __add__(self, other: "ClassificationReport") -> "ClassificationReport":
        return ClassificationReport(self.tp_static + other.tp_static, self.fp_static + other.fp_static,
                                    self.tp_dynamic + other.tp_dynamic, self.fp_dynamic + other.fp_dynamic)

    def as_dict(self):
        d = asdict(self)
        d.update(SA=self.SA, DA=self.DA, F1=self.F1, F1_sa_da=self.F1_sa_da, precision=self.precision,
                 recall=self.recall)
        return d


def _dynamic_flags(x) -> np.ndarray:
    x = np.asarray(x)
    return x if x.dtype == bool else x == Label.DYNAMIC


def score_classification(pred, truth) -> ClassificationReport:
    """Compare predicted labels with truth (labels or boolean dynamic flags).

    Ground and static predictions both count as static.
    """
    p = _dynamic_flags(pred)
    t = _dynamic_flags(truth)
    if p.shape != t.shape:
        raise EvaluationError(f"length mismatch: {p.shape} vs {t.shape}")
    return ClassificationReport(
        tp_static=int(np.sum(~p & ~t)),
        fp_static=int(np.sum(~p & t)),
        tp_dynamic=int(np.sum(p & t)),
        fp_dynamic=int(np.sum(p & ~t)),
    )


def score_sequence(preds: Iterable, truths: Iterable) -> ClassificationReport:
    total = ClassificationReport(0, 0, 0, 0)
    for p, t in zip(preds, truths):
        total = total + score_classification(p, t)
    return total


@dataclass
class DepthReport:
    rmse: float
    mae: float
    absrel: float
    density: float
    n: int
    point_to_point: Optional[float] = None
    coverage: Optional[float] = None

    def as_dict(self):
        return asdict(self)


def _errors_report(err, ref, density, coverage=None):
    err = np.asarray(err, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if err.size == 0:
        raise EvaluationError("no pixels to evaluate")
    return DepthReport(float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err))),
                       float(np.mean(np.abs(err) / ref)), density, int(err.size), coverage=coverage)


def score_depth(pred: DepthMap, truth: DepthMap, mode: str = "both") -> DepthReport:
    """RMSE / MAE / AbsRel of ``pred`` against ``truth``.

    ``mode="both"`` evaluates pixels valid in both maps. ``mode="truth"``
    evaluates every truth-valid pixel and scores missing predictions as 0 m.
    """
    if pred.depth.shape != truth.depth.shape:
        raise EvaluationError("depth maps differ in size")
    pv, tv = pred.valid, truth.valid
    if mode == "both":
        mask = pv & tv
        d = pred.depth[mask]
    elif mode == "truth":
        mask = tv
        d = np.where(pv, pred.depth, 0.0)[mask]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    g = truth.depth[mask]
    cov = float((pv & tv).sum() / tv.sum()) if tv.any() else None
    return _errors_report(d - g, g, pred.density, cov)


def deproject(depth: DepthMap, K) -> np.ndarray:
    """Camera-frame 3D points of every valid pixel (pixel centres at integer coordinates)."""
    rows, cols = np.nonzero(depth.valid)
    z = depth.depth[rows, cols]
    pix = np.stack([cols, rows, np.ones_like(cols)], axis=1).astype(float)
    return (pix @ np.linalg.inv(np.asarray(K, dtype=float)).T) * z[:, None]


def point_to_point(cloud_a, cloud_b) -> float:
    """Mean distance from each point of ``a`` to its nearest neighbour in ``b``."""
    a = cloud_a.points if isinstance(cloud_a, PointCloud) else np.asarray(cloud_a, dtype=float)
    b = cloud_b.points if isinstance(cloud_b, PointCloud) else np.asarray(cloud_b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise EvaluationError("point_to_point needs non-empty clouds")
    d, _ = cKDTree(b).query(a, k=1)
    return float(np.mean(d))


def project_sparse(points_b, rig_b: CameraRig):
    """Project sensor-B points into the camera; returns ``(rows, cols, z)`` inside the image."""
    pc = rig_b.C_cl.inverse().apply(points_b)
    z = pc[:, 2]
    front = z > 0
    pc, z = pc[front], z[front]
    uvw = pc @ rig_b.K.T
    cols = np.floor(uvw[:, 0] / z + 0.5).astype(np.int64)
    rows = np.floor(uvw[:, 1] / z + 0.5).astype(np.int64)
    inside = (cols >= 0) & (cols < rig_b.width) & (rows >= 0) & (rows < rig_b.height)
    return rows[inside], cols[inside], z[inside]


def cross_lidar_validate(pairs: Sequence[Tuple[DepthMap, PointCloud]], rig_b: CameraRig,
                         occlusion_margin: float = 0.5) -> DepthReport:
    """Compare dense depth maps with sparse frames of a second, time-aligned LiDAR.

    ``rig_b.C_cl`` is the camera-to-B extrinsic. A B point farther than the
    dense depth by more than ``occlusion_margin`` sees a surface hidden from
    the camera and is excluded.
    """
    errs, refs, dens = [], [], []
    for dense, cloud in pairs:
        rows, cols, z = project_sparse(cloud.points, rig_b)
        d = dense.depth[rows, cols]
        ok = np.isfinite(d) & ~(z - d > occlusion_margin)
        errs.append(d[ok] - z[ok])
        refs.append(z[ok])
        dens.append(dense.density)
    err = np.concatenate(errs) if errs else np.zeros(0)
    if err.size == 0:
        raise EvaluationError("no overlapping valid pixels between dense depth and sensor B")
    return _errors_report(err, np.concatenate(refs), float(np.mean(dens)))
