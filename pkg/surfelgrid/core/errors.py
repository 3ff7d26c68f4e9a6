from pathlib import Path
from typing import Optional, Union


class SurfelgridError(Exception):
    """Base class for every error the library raises on purpose"""


class ConfigError(SurfelgridError):
    """Invalid or conflicting configuration"""


class DatasetError(SurfelgridError):
    """A dataset could not be read; `path` names the offending file"""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)


class MissingFileError(DatasetError):
    pass


class MalformedFileError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class UnknownSceneError(DatasetError):
    pass


class CheckpointError(SurfelgridError):
    """A checkpoint file could not be decoded"""


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TrainingDivergedError(SurfelgridError):
    """Loss became non-finite; a diagnostic checkpoint was written first"""

    def __init__(self, message: str, checkpoint_path: Optional[Path] = None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


class EmptyReportError(SurfelgridError):
    """Evaluation was asked to summarize zero views"""
