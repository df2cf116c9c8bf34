"""Pipeline configuration: JSON schema, defaults and seed propagation.

A config file is a JSON object; every key is optional and missing keys take
the defaults below::

    {
      "seed": 0,
      "workspace": "tractpipe_ws",
      "phantom":      {"dims": [32, 32, 32], "n_tracts": 3, ...},
      "registration": {"gamma": ..., "step_size": ..., "max_iters": ..., "rel_tol": ...},
      "model":        {"patch_radius": 2, "hidden_size": 32},
      "train_a":      {"learning_rate": ..., "epochs": ..., "batch_voxels": ...},
      "train_b":      {...}
    }

The top-level ``seed`` is the only seed that matters: stage seeds are derived
from it, so one number reproduces the whole run.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .phantom import PhantomConfig
from .registration import RegistrationConfig
from .segmentation import TrainConfig

__all__ = ["ModelConfig", "PipelineConfig", "load_config", "WORKSPACE_ENV"]

WORKSPACE_ENV = "TRACTPIPE_WORKSPACE"

# phantom defaults for the acceptance run; the library-level dataclass defaults stay generic
DEFAULT_PHANTOM = dict(
    dims=(32, 32, 32),
    n_tracts=3,
    channels=3,
    tube_radius=2.5,
    deform_amplitude=2.0,
    deform_smoothness=4.0,
    noise_sigma=0.1,
    cohort_size=16,
    n_test=5,
)
# gamma weighs a per-element mean against a per-voxel sum, so it scales with the voxel count
DEFAULT_REGISTRATION = dict(gamma=1.0e6, step_size=0.01, max_iters=200, rel_tol=1e-6)
DEFAULT_TRAIN = dict(learning_rate=0.05, epochs=50, batch_voxels=256, binarize_threshold=0.5)


@dataclass(frozen=True)
class ModelConfig:
    patch_radius: int = 2
    hidden_size: int = 32


def _build(cls, defaults: dict, overrides: dict | None):
    overrides = dict(overrides or {})
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{**defaults, **overrides})


@dataclass(frozen=True)
class PipelineConfig:
    phantom: PhantomConfig = field(default_factory=lambda: PhantomConfig(**DEFAULT_PHANTOM))
    registration: RegistrationConfig = field(default_factory=lambda: RegistrationConfig(**DEFAULT_REGISTRATION))
    model: ModelConfig = field(default_factory=ModelConfig)
    train_a: TrainConfig = field(default_factory=lambda: TrainConfig(**DEFAULT_TRAIN))
    train_b: TrainConfig = field(default_factory=lambda: TrainConfig(**DEFAULT_TRAIN))
    workspace: str = "tractpipe_ws"
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(
            phantom=_build(PhantomConfig, DEFAULT_PHANTOM, data.get("phantom")),
            registration=_build(RegistrationConfig, DEFAULT_REGISTRATION, data.get("registration")),
            model=_build(ModelConfig, {}, data.get("model")),
            train_a=_build(TrainConfig, DEFAULT_TRAIN, data.get("train_a")),
            train_b=_build(TrainConfig, DEFAULT_TRAIN, data.get("train_b")),
            workspace=str(data.get("workspace", "tractpipe_ws")),
            seed=int(data.get("seed", 0)),
        )
        return cfg.with_seed(cfg.seed)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Propagate ``seed`` to every stage."""
        seed = int(seed)
        return replace(
            self,
            seed=seed,
            phantom=replace(self.phantom, seed=seed),
            registration=replace(self.registration, seed=seed),
            train_a=replace(self.train_a, seed=seed + 1),
            train_b=replace(self.train_b, seed=seed + 2),
        )

    def with_workspace(self, workspace) -> "PipelineConfig":
        return replace(self, workspace=str(workspace))

    @property
    def model_seed(self) -> int:
        return self.seed + 3

    @property
    def workspace_path(self) -> Path:
        return Path(self.workspace)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "workspace": self.workspace,
            "phantom": self.phantom.to_dict(),
            "registration": self.registration.to_dict(),
            "model": asdict(self.model),
            "train_a": self.train_a.to_dict(),
            "train_b": self.train_b.to_dict(),
        }


def load_config(path=None, seed: int | None = None, workspace=None) -> PipelineConfig:
    """Read a config file (or defaults), then apply overrides.

    Workspace precedence: ``workspace`` argument, then ``$TRACTPIPE_WORKSPACE``,
    then the file.
    """
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: config is not valid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
    cfg = PipelineConfig.from_dict(data)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    env_ws = os.environ.get(WORKSPACE_ENV)
    if workspace is not None:
        cfg = cfg.with_workspace(workspace)
    elif env_ws:
        cfg = cfg.with_workspace(env_ws)
    return cfg
