"""Pipeline configuration: every stage parameter in one YAML-loadable object.

Angles are given in degrees on disk. Unknown keys are rejected so that a
typo never silently falls back to a default.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .doc import KeyFrameParams, VotingParams
from .errors import ConfigError
from .ground import GroundParams
from .render import RenderParams


def _voting_to_dict(vp: VotingParams) -> Dict[str, Any]:
    return {"dtheta_deg": math.degrees(vp.dtheta), "dphi_deg": math.degrees(vp.dphi), "tau": vp.tau, "w": vp.w}


def _voting_from_dict(d) -> VotingParams:
    base = _voting_to_dict(VotingParams())
    base.update(d)
    return VotingParams(dtheta=math.radians(base["dtheta_deg"]), dphi=math.radians(base["dphi_deg"]),
                        tau=float(base["tau"]), w=int(base["w"]))


@dataclass
class PipelineConfig:
    ground: GroundParams = field(default_factory=GroundParams)
    keyframes: KeyFrameParams = field(default_factory=KeyFrameParams)
    voting: VotingParams = field(default_factory=VotingParams)
    render: RenderParams = field(default_factory=RenderParams)
    manifest: Optional[str] = None
    rig: Optional[str] = None          # overrides the manifest's rig
    workers: int = 1
    seed: int = 0
    # set when the LiDAR resolution was given explicitly rather than read
    # from the sequence's sensor description
    render_resolution_explicit: bool = False

    def __post_init__(self):
        if int(self.workers) < 1:
            raise ConfigError("workers must be >= 1")

    # -- serialisation -----------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        d = {
            "ground": asdict(self.ground),
            "keyframes": asdict(self.keyframes),
            "voting": _voting_to_dict(self.voting),
            "render": self._render_dict(),
            "workers": self.workers,
            "seed": self.seed,
        }
        if self.manifest is not None:
            d["manifest"] = self.manifest
        if self.rig is not None:
            d["rig"] = self.rig
        return d

    def _render_dict(self) -> Dict[str, Any]:
        d = asdict(self.render)
        if not self.render_resolution_explicit:
            # filled from the sequence at run time
            d.pop("lidar_vres_deg")
            d.pop("lidar_hres_deg")
        return d

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "PipelineConfig":
        data = dict(data or {})
        sections = {"ground": GroundParams, "keyframes": KeyFrameParams, "render": RenderParams}
        top = {"ground", "keyframes", "voting", "render", "manifest", "rig", "workers", "seed"}
        unknown = sorted(set(data) - top)
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        kw: Dict[str, Any] = {}
        for name, typ in sections.items():
            sec = data.get(name) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"config section {name} must be a mapping")
            allowed = {f.name for f in fields(typ)}
            bad = sorted(set(sec) - allowed)
            if bad:
                raise ConfigError(f"unknown config key: {name}.{bad[0]}")
            try:
                kw[name] = typ(**sec)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid {name} parameters: {e}") from None
        vsec = data.get("voting") or {}
        bad = sorted(set(vsec) - set(_voting_to_dict(VotingParams())))
        if bad:
            raise ConfigError(f"unknown config key: voting.{bad[0]}")
        try:
            kw["voting"] = _voting_from_dict(vsec)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid voting parameters: {e}") from None
        rsec = data.get("render") or {}
        kw["render_resolution_explicit"] = "lidar_vres_deg" in rsec or "lidar_hres_deg" in rsec
        for key in ("manifest", "rig"):
            if data.get(key) is not None:
                kw[key] = str(data[key])
        try:
            kw["workers"] = int(data.get("workers", 1))
            kw["seed"] = int(data.get("seed", 0))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid integer setting: {e}") from None
        return cls(**kw)

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    # -- cache keys --------------------------------------------------------
    def stage_params(self, stage: str) -> Dict[str, Any]:
        """Parameters that influence one stage's outputs (used for staleness hashing)."""
        if stage == "ground":
            return {"ground": asdict(self.ground)}
        if stage == "doc":
            return {"keyframes": asdict(self.keyframes), "voting": _voting_to_dict(self.voting)}
        if stage == "render":
            return {"render": asdict(self.render)}
        raise ValueError(f"unknown stage {stage!r}")

    def with_sensor_resolution(self, vres_deg: Optional[float], hres_deg: Optional[float]) -> "PipelineConfig":
        """Fill the render's LiDAR resolution from the sequence, unless set explicitly."""
        if self.render_resolution_explicit or not vres_deg or not hres_deg:
            return self
        return replace(self, render=replace(self.render, lidar_vres_deg=float(vres_deg),
                                            lidar_hres_deg=float(hres_deg)))


def load_config(path=None, **overrides) -> PipelineConfig:
    """Read a YAML config (or defaults when ``path`` is None) and apply
    non-None keyword overrides (``workers``, ``seed``, ``manifest``, ``rig``)."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    return PipelineConfig.from_dict(data)


def stable_hash(obj) -> str:
    """Short content hash of a JSON-serialisable object."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
