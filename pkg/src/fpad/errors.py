"""Exception hierarchy.

ValidationError and its subclasses mark problems with user-supplied inputs
(configs, manifests, data); the CLI maps them to exit status 1. Everything
else is treated as a runtime failure (exit status 2).
"""


class FpadError(Exception):
    pass


class ValidationError(FpadError):
    pass


class ConfigError(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class IngestionError(ValidationError):
    pass


class SampleRejectionError(ValidationError):
    def __init__(self, message, sample_ids=()):
        super().__init__(message)
        self.sample_ids = list(sample_ids)


class SamplingError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class ScoringError(ValidationError):
    pass


class TrainingError(ValidationError):
    pass


class MetricError(ValidationError):
    pass


class ProtocolError(ValidationError):
    pass


class DependencyError(ValidationError):
    pass


class CheckpointError(FpadError):
    pass


class CamError(FpadError):
    pass


class CompatibilityError(FpadError):
    pass
