from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Optional, List, Dict, Tuple
from enum import Enum

DEFAULT_POOL_RATIOS = [[12, 16, 20, 24], [6, 8, 10, 12], [3, 4, 5, 6], [1, 2, 3, 4]]
TOGGLES = ("use_csb", "use_pab", "use_lpb", "use_lmps", "use_cffn")


class DefectKind(str, Enum):
    BLOB = "blob"
    SCRATCH = "scratch"


class DataSourceKind(str, Enum):
    SYNTH = "synth"
    FOLDER = "folder"


class GradCheckScope(str, Enum):
    OP = "op"
    BLOCK = "block"
    MODEL = "model"


class ModelConfig(BaseModel):
    base_channels: int = Field(64, ge=1, description="Base channel width C")
    depths: List[int] = Field(default_factory=lambda: [3, 3, 18, 3], description="DefT blocks per stage (L)")
    heads: List[int] = Field(default_factory=lambda: [1, 2, 4, 8], description="Attention heads per stage (H)")
    pool_ratios: List[List[int]] = Field(
        default_factory=lambda: [list(r) for r in DEFAULT_POOL_RATIOS],
        description="Multi-pooling ratios per stage (P)"
    )
    sr_ratios: List[int] = Field(
        default_factory=lambda: [8, 4, 2, 1],
        description="Single reduction ratio per stage used when LMPS is disabled"
    )
    expansion: int = Field(4, ge=1, description="CFFN expansion ratio (E)")
    in_channels: int = Field(3, ge=1, description="Input image channels")
    input_size: int = Field(224, ge=32, description="Nominal square input size")
    use_csb: bool = Field(True, description="Convolutional stem block")
    use_pab: bool = Field(True, description="Overlapping patch aggregation")
    use_lpb: bool = Field(True, description="Locally position-aware block")
    use_lmps: bool = Field(True, description="Multi-pooling self-attention")
    use_cffn: bool = Field(True, description="Convolutional feed-forward network")
    stem_norm: bool = Field(True, description="Batch normalization after every stem conv")

    @model_validator(mode="after")
    def validate_stages(self):
        for name in ("depths", "heads", "sr_ratios"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} must list exactly 4 stages")
        if len(self.pool_ratios) != 4:
            raise ValueError("pool_ratios must list exactly 4 stages")
        if any(d < 1 for d in self.depths):
            raise ValueError("every stage depth must be >= 1")
        if any(h < 1 for h in self.heads):
            raise ValueError("every head count must be >= 1")
        for stage, ratios in enumerate(self.pool_ratios):
            if not ratios or any(r < 1 for r in ratios):
                raise ValueError(f"stage {stage + 1} pool ratios must be non-empty and >= 1")
        if any(r < 1 for r in self.sr_ratios):
            raise ValueError("every reduction ratio must be >= 1")
        for channels, heads in zip(self.stage_channels, self.heads):
            if channels % heads:
                raise ValueError(f"stage width {channels} is not divisible by {heads} heads")
        return self

    @property
    def stage_channels(self) -> List[int]:
        c = self.base_channels
        return [c, 2 * c, 4 * c, 8 * c]

    def with_overrides(self, **overrides) -> "ModelConfig":
        return ModelConfig(**{**self.model_dump(), **overrides})


class LossWeights(BaseModel):
    bce: float = Field(1.0, ge=0)
    ssim: float = Field(1.0, ge=0)
    iou: float = Field(1.0, ge=0)


class TrainConfig(BaseModel):
    epochs: int = Field(700, ge=0, description="Training epochs")
    batch_size: int = Field(8, ge=1, description="Mini-batch size")
    base_lr: float = Field(0.003, gt=0, description="Initial learning rate")
    momentum: float = Field(0.9, ge=0, lt=1, description="SGD momentum")
    weight_decay: float = Field(1e-4, ge=0, description="L2 weight decay folded into the gradient")
    poly_power: float = Field(0.9, gt=0, description="Poly schedule power")
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    seed: int = Field(0, ge=0, description="Seed for shuffling, cropping and initialization")
    resize_to: int = Field(256, ge=1, description="Training resize side")
    crop_to: int = Field(224, ge=1, description="Training crop side")
    log_every: int = Field(10, ge=1, description="Iterations between log lines")
    checkpoint_every: int = Field(0, ge=0, description="Epochs between checkpoints, 0 for final only")
    prefetch: int = Field(0, ge=0, description="Background batch queue depth, 0 for synchronous")
    hflip: bool = Field(False, description="Random horizontal flips")
    data_fraction: float = Field(1.0, gt=0, le=1, description="Seeded fraction of the training set to use")
    max_iterations: Optional[int] = Field(None, ge=1, description="Optional hard cap on iterations")

    @model_validator(mode="after")
    def validate_crop(self):
        if self.crop_to > self.resize_to:
            raise ValueError("crop_to must not exceed resize_to")
        return self


class SynthSpec(BaseModel):
    count: int = Field(8, ge=0, description="Number of samples")
    image_size: int = Field(224, ge=0, description="Square image side in pixels")
    defect_count_range: Tuple[int, int] = Field((1, 3), description="Inclusive range of genuine defects per image")
    defect_kinds: List[DefectKind] = Field(default_factory=lambda: [DefectKind.BLOB, DefectKind.SCRATCH])
    defect_size_range: Tuple[float, float] = Field((0.05, 0.15), description="Defect extent as a fraction of the side")
    pseudo_defect_density: float = Field(2.0, ge=0, description="Expected pseudo-defects per image")
    noise_sigma: float = Field(0.02, ge=0, description="Per-pixel Gaussian noise")
    texture_scale: int = Field(32, ge=1, description="Coarsest value-noise cell in pixels")
    contrast: float = Field(0.35, gt=0, le=1, description="Intensity offset of genuine defects")
    seed: int = Field(7, ge=0)

    @field_validator("defect_count_range")
    @classmethod
    def validate_count_range(cls, v):
        if v[0] < 0 or v[1] < v[0]:
            raise ValueError("defect_count_range must satisfy 0 <= low <= high")
        return v

    @field_validator("defect_size_range")
    @classmethod
    def validate_size_range(cls, v):
        if not 0 < v[0] <= v[1] <= 1:
            raise ValueError("defect_size_range must satisfy 0 < low <= high <= 1")
        return v


class DataConfig(BaseModel):
    source: DataSourceKind = Field(DataSourceKind.SYNTH, description="Where training samples come from")
    synth: SynthSpec = Field(default_factory=SynthSpec)
    images_dir: Optional[str] = Field(None, description="Folder source images")
    masks_dir: Optional[str] = Field(None, description="Folder source masks")

    @model_validator(mode="after")
    def validate_folder(self):
        if self.source == DataSourceKind.FOLDER and not (self.images_dir and self.masks_dir):
            raise ValueError("folder source needs images_dir and masks_dir")
        return self


class RunConfig(BaseModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    output_dir: str = Field("runs/deft", description="Directory receiving every artifact")
    threshold: float = Field(0.5, ge=0, le=1, description="Binarization threshold for scalar metrics")
    n_thresholds: int = Field(256, ge=2, description="Thresholds in the curve sweep")


class ConfusionCounts(BaseModel):
    tp: int = Field(0, ge=0)
    fp: int = Field(0, ge=0)
    tn: int = Field(0, ge=0)
    fn: int = Field(0, ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp, fp=self.fp + other.fp,
            tn=self.tn + other.tn, fn=self.fn + other.fn
        )


class CurvePoint(BaseModel):
    threshold: float = Field(..., ge=0, le=1)
    precision: float = Field(..., ge=0, le=1)
    recall: float = Field(..., ge=0, le=1)
    f_measure: float = Field(..., ge=0, le=1)


class MetricsReport(BaseModel):
    fpr: float = Field(..., ge=0, le=1, description="Background pixels predicted as defect")
    fnr: float = Field(..., ge=0, le=1, description="Defect pixels predicted as background")
    acc: float = Field(..., ge=0, le=1, description="Pixel accuracy")
    f1: float = Field(..., ge=0, le=1, description="F1 score")
    mae: float = Field(..., ge=0, le=1, description="Mean absolute error of continuous predictions")
    threshold: float = Field(0.5, ge=0, le=1)
    counts: ConfusionCounts = Field(default_factory=ConfusionCounts)
    curves: Optional[List[CurvePoint]] = Field(None, description="Threshold sweep")


class IngestRecord(BaseModel):
    stem: str
    status: str


class LossRecord(BaseModel):
    iteration: int
    epoch: int
    lr: float
    total_loss: float
    bce: float
    ssim: float
    iou: float


class GradCheckRow(BaseModel):
    scope: GradCheckScope
    name: str
    max_rel_error: float
    tolerance: float
    passed: bool


class ModuleCost(BaseModel):
    module: str
    params: int = Field(..., ge=0)
    flops: int = Field(0, ge=0)


class AblationRow(BaseModel):
    variant: str
    toggles: Dict[str, bool]
    params: int
    flops: int
    mae: float
    f1: float
    acc: float
    fpr: float
    fnr: float


class ErrorResponse(BaseModel):
    error: str = Field(..., description="Error message")
    code: str = Field(..., description="Error code")
    details: Optional[Dict] = Field(None, description="Additional error details")
