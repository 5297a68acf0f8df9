"""Exception types. Every error carries a short machine-readable ``code`` used by the CLI."""


class AngioError(Exception):
    code = "E_GENERIC"


class ManifestError(AngioError, ValueError):
    code = "E_MANIFEST"


class PatientLeakageError(ManifestError):
    code = "E_LEAKAGE"


class MissingFileError(ManifestError, FileNotFoundError):
    code = "E_MISSING_FILE"


class PhaseError(AngioError, ValueError):
    code = "E_PHASE"


class ShapeError(AngioError, ValueError):
    code = "E_SHAPE"


class ConfigError(AngioError, ValueError):
    code = "E_CONFIG"


class CheckpointError(AngioError, ValueError):
    code = "E_CHECKPOINT"


class MetricError(AngioError, ValueError):
    code = "E_METRIC"


class DataError(AngioError, ValueError):
    code = "E_DATA"
