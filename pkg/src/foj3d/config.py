"""Run configuration: one JSON document overlaid on module defaults."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .solver import SolverConfig


def _strict(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ValueError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class PgdSection:
    lam: float | None = None
    n_outer: int = 10
    warm_start: bool = True
    n_init: int = 1
    n_refine: int = 1


@dataclass
class TomoSection:
    views: int = 20
    photons: float = 1000.0
    method: str = "pgd"
    normalize_operator: bool = True


@dataclass
class PointCloudSection:
    grid_dim: int = 32
    k: int | None = None  # None: number of clean voxels estimated from the raw cloud
    sigma_surface: float | None = None
    pad: float = 10.0


@dataclass
class IoSection:
    slices_png: bool = False


@dataclass
class RunConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    pgd: PgdSection = field(default_factory=PgdSection)
    tomo: TomoSection = field(default_factory=TomoSection)
    pointcloud: PointCloudSection = field(default_factory=PointCloudSection)
    io: IoSection = field(default_factory=IoSection)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "solver": self.solver.to_dict(),
            "pgd": asdict(self.pgd),
            "tomo": asdict(self.tomo),
            "pointcloud": asdict(self.pointcloud),
            "io": asdict(self.io),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {"solver", "pgd", "tomo", "pointcloud", "io", "seed"}
        unknown = set(d) - sections
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            solver=SolverConfig.from_dict(d.get("solver", {})),
            pgd=_strict(PgdSection, d.get("pgd", {}), "pgd"),
            tomo=_strict(TomoSection, d.get("tomo", {}), "tomo"),
            pointcloud=_strict(PointCloudSection, d.get("pointcloud", {}), "pointcloud"),
            io=_strict(IoSection, d.get("io", {}), "io"),
            seed=int(d.get("seed", 0)),
        )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(doc)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
