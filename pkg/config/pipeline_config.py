"""
Pipeline Configuration Module
Stage configs, the project manifest and environment-driven runtime settings
"""
import os
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Load environment variables
load_dotenv()

MANIFEST_SCHEMA_VERSION = 1


class StageConfig(BaseModel):
    """Base for stage configs: unknown keys are rejected"""

    model_config = ConfigDict(extra="forbid")


class ViewSelConfig(StageConfig):
    """Source-view selection; angles in degrees"""

    theta0: float = Field(default=10.0, ge=0.0)
    sigma1: float = Field(default=5.0, gt=0.0)
    sigma2: float = Field(default=10.0, gt=0.0)
    num_sources: int = Field(default=12, ge=1)
    visibility_tolerance: float = Field(default=0.01, gt=0.0)


class PatchMatchConfig(StageConfig):
    """Multi-view PatchMatch depth estimation"""

    iterations: int = Field(default=8, ge=1)
    window: int = Field(default=11, ge=3)
    window_step: int = Field(default=1, ge=1)
    cost_top_k: int = Field(default=4, ge=1)
    depth_range_frac: float = Field(default=0.05, ge=0.0)
    cost_threshold: float = Field(default=0.6, gt=0.0, le=2.0)
    refinement_steps: int = Field(default=4, ge=0)
    normal_perturbation: float = Field(default=0.3, ge=0.0)
    rng_seed: int = 0
    prior_filter_tau: float = Field(default=0.05, gt=0.0)

    @field_validator("window")
    @classmethod
    def _odd_window(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("window must be odd")
        return value


class FusionConfig(StageConfig):
    """Depth-map fusion consistency test"""

    min_consistent_views: int = Field(default=3, ge=1)
    rel_depth_eps: float = Field(default=0.01, gt=0.0)
    normal_agreement_deg: float = Field(default=30.0, gt=0.0, le=180.0)


class PclConstraintConfig(StageConfig):
    """Point-cloud constraint extraction; None means "derive from the template diagonal\""""

    search_radius: Optional[float] = Field(default=None, gt=0.0)
    axial_threshold: Optional[float] = Field(default=None, gt=0.0)
    min_points: int = Field(default=3, ge=1)
    search_radius_frac: float = Field(default=0.02, gt=0.0)
    axial_threshold_frac: float = Field(default=0.005, gt=0.0)

    def resolved(self, diagonal: float) -> "PclConstraintConfig":
        """Absolute radii for a template with the given bounding-box diagonal"""
        return self.model_copy(update={
            "search_radius": self.search_radius or self.search_radius_frac * diagonal,
            "axial_threshold": self.axial_threshold or self.axial_threshold_frac * diagonal,
        })


class EdgeConfig(StageConfig):
    """Image edge detection and edge-constraint matching"""

    low: float = Field(default=0.1, gt=0.0, le=1.0)
    high: float = Field(default=0.2, gt=0.0, le=1.0)
    smoothing_sigma: float = Field(default=1.0, ge=0.0)
    tau_edge_px: Optional[float] = Field(default=None, gt=0.0)
    reference_width: int = Field(default=640, gt=0)
    tau_edge_px_reference: float = Field(default=10.0, gt=0.0)

    @model_validator(mode="after")
    def _ordered(self) -> "EdgeConfig":
        if self.low > self.high:
            raise ValueError("low threshold exceeds high threshold")
        return self

    def tau_for_width(self, width: int) -> float:
        """Explicit tau wins; otherwise the reference tau scaled to the image width"""
        if self.tau_edge_px is not None:
            return self.tau_edge_px
        return self.tau_edge_px_reference * width / self.reference_width


class FitConfig(StageConfig):
    """Non-rigid template fitting schedules and weights"""

    stiffness_schedule: List[float] = Field(default_factory=lambda: [50, 20, 8, 3, 1.5, 0.8, 0.5, 0.35])
    landmark_weight_schedule: List[float] = Field(default_factory=lambda: [10, 8, 6, 4, 2, 1.5, 1, 1])
    edge_weight: float = Field(default=2.0, ge=0.0)
    gamma_skew: float = Field(default=1.0, gt=0.0)
    inner_max_iters: int = Field(default=10, ge=1)
    inner_tol: float = Field(default=1e-4, gt=0.0)
    refresh_every: int = Field(default=1, ge=1)
    use_edges: bool = True
    use_ear_landmarks: bool = True

    @model_validator(mode="before")
    @classmethod
    def _align_schedules(cls, data):
        # a shortened stiffness override keeps the leading landmark weights
        if isinstance(data, dict) and "stiffness_schedule" in data:
            s = list(data["stiffness_schedule"])
            w = list(data.get("landmark_weight_schedule", [10, 8, 6, 4, 2, 1.5, 1, 1]))
            if len(w) > len(s):
                data = {**data, "landmark_weight_schedule": w[:len(s)]}
        return data

    @model_validator(mode="after")
    def _schedules(self) -> "FitConfig":
        s, w = self.stiffness_schedule, self.landmark_weight_schedule
        if not s:
            raise ValueError("stiffness_schedule is empty")
        if len(w) != len(s):
            raise ValueError("stiffness and landmark weight schedules differ in length")
        if min(s) <= 0 or min(w) <= 0:
            raise ValueError("schedules must be strictly positive")
        if any(b > a for a, b in zip(s, s[1:])):
            raise ValueError("stiffness schedule must be non-increasing")
        return self


class LandmarkConfig(StageConfig):
    """Landmark triangulation"""

    min_confidence: float = Field(default=0.9, ge=0.0, le=1.0)
    robust: bool = True
    huber_px: float = Field(default=2.0, gt=0.0)
    max_iterations: int = Field(default=100, ge=1)


class SynthConfig(StageConfig):
    """Synthetic scene generation"""

    n_views: int = Field(default=40, ge=2)
    arc_degrees: float = Field(default=180.0, gt=0.0, le=360.0)
    width: int = Field(default=320, gt=0)
    height: int = Field(default=240, gt=0)
    depth_sigma_frac: float = Field(default=0.002, ge=0.0)
    landmark_sigma_px: float = Field(default=0.0, ge=0.0)
    subdivisions: int = Field(default=5, ge=1, le=6)
    seed: int = 0


class StageConfigs(StageConfig):
    """All stage configs of one project"""

    view_selection: ViewSelConfig = Field(default_factory=ViewSelConfig)
    patchmatch: PatchMatchConfig = Field(default_factory=PatchMatchConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    landmarks: LandmarkConfig = Field(default_factory=LandmarkConfig)
    pointcloud: PclConstraintConfig = Field(default_factory=PclConstraintConfig)
    edges: EdgeConfig = Field(default_factory=EdgeConfig)
    fit: FitConfig = Field(default_factory=FitConfig)


class ProjectManifest(BaseModel):
    """Paths (relative to the manifest file) plus every stage config"""

    model_config = ConfigDict(extra="forbid")

    schema_version: int = MANIFEST_SCHEMA_VERSION
    cameras: str
    landmarks: str
    correspondence: str
    template: str
    edge_maps: Optional[str] = None
    gt_mesh: Optional[str] = None
    output_dir: str = "output"
    configs: StageConfigs = Field(default_factory=StageConfigs)

    @field_validator("schema_version")
    @classmethod
    def _supported(cls, value: int) -> int:
        if value != MANIFEST_SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema version {value}")
        return value

    def resolve(self, root: Path, relative: Optional[str]) -> Optional[Path]:
        if relative is None:
            return None
        p = Path(relative)
        return p if p.is_absolute() else (root / p)


class RuntimeSettings:
    """Runtime settings read from FACECAP_* environment variables"""

    def __init__(self):
        self.threads = int(os.getenv('FACECAP_THREADS', '0')) or None
        self.log_level = os.getenv('FACECAP_LOG_LEVEL', 'INFO').upper()
        seed = os.getenv('FACECAP_SEED')
        self.seed = int(seed) if seed else None
        self.output_dir = os.getenv('FACECAP_OUTPUT_DIR')

        if self.threads is not None and self.threads < 1:
            raise ValueError("FACECAP_THREADS must be positive")


# Global instance
runtime_settings = RuntimeSettings()
