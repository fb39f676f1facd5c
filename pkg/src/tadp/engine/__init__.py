from .conditioning import CaptionCacheMissError, ConditioningProvider
from .metrics import (
    AP_THRESHOLDS,
    ConfusionMatrix,
    DepthAccumulator,
    MetricReport,
    average_precision,
    box_iou,
    depth_metrics,
    detection_ap,
    miou,
    multiscale_probs,
)
from .schedules import (
    PROSE_BACKBONE_LR_SCALE,
    SCHEDULES,
    ParameterOverlapError,
    Schedule,
    ScheduleError,
    build_lr_scheduler,
    build_optimizer,
    get_schedule,
    lr_factor,
)
