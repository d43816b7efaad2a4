from .deft_models import (
    DEFAULT_POOL_RATIOS,
    TOGGLES,
    DefectKind,
    DataSourceKind,
    GradCheckScope,
    ModelConfig,
    LossWeights,
    TrainConfig,
    SynthSpec,
    DataConfig,
    RunConfig,
    ConfusionCounts,
    CurvePoint,
    MetricsReport,
    IngestRecord,
    LossRecord,
    GradCheckRow,
    ModuleCost,
    AblationRow,
    ErrorResponse
)
from .errors import (
    DeftError,
    ConfigError,
    DataIOError,
    NumericError,
    DimensionError,
    UsageError
)

__all__ = [
    'DEFAULT_POOL_RATIOS',
    'TOGGLES',
    'DefectKind',
    'DataSourceKind',
    'GradCheckScope',
    'ModelConfig',
    'LossWeights',
    'TrainConfig',
    'SynthSpec',
    'DataConfig',
    'RunConfig',
    'ConfusionCounts',
    'CurvePoint',
    'MetricsReport',
    'IngestRecord',
    'LossRecord',
    'GradCheckRow',
    'ModuleCost',
    'AblationRow',
    'ErrorResponse',
    'DeftError',
    'ConfigError',
    'DataIOError',
    'NumericError',
    'DimensionError',
    'UsageError'
]
