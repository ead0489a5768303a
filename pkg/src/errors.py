"""
Error Categories
Every failure the pipeline reports maps to one category and one CLI exit code
"""
from typing import Optional


class FacecapError(Exception):
    """Base class for all pipeline errors"""

    category = "error"
    exit_code = 1


class GeometryError(FacecapError, ValueError):
    """Invalid geometric input: behind-camera points, non-positive depth, empty meshes"""

    category = "geometry"
    exit_code = 5


class ConfigurationError(FacecapError, ValueError):
    """Invalid manifest, config value or CLI override"""

    category = "configuration"
    exit_code = 2


class FormatError(FacecapError, ValueError):
    """Malformed input file"""

    category = "format"
    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None,
                 offset: Optional[int] = None, line: Optional[int] = None):
        self.path = path
        self.offset = offset
        self.line = line
        where = []
        if path:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class SolverError(FacecapError, ArithmeticError):
    """Singular or rank-deficient linear system"""

    category = "solver"
    exit_code = 6


class TriangulationError(FacecapError):
    """A single landmark could not be triangulated"""

    category = "triangulation"
    exit_code = 5

    def __init__(self, landmark_id: int, reason: str):
        self.landmark_id = landmark_id
        self.reason = reason
        super().__init__(f"landmark {landmark_id}: {reason}")


class MissingArtifactError(FacecapError):
    """An upstream stage has not produced the artifact a stage needs"""

    category = "missing-artifact"
    exit_code = 4

    def __init__(self, artifact: str, stage: str):
        self.artifact = artifact
        self.stage = stage
        super().__init__(f"missing {artifact}; run the '{stage}' stage first")
