from .anchors import (
    Anchor,
    AnchorConfig,
    Anchors,
    Matches,
    decode_boxes,
    encode_boxes,
    generate_anchors,
    iou_matrix,
    match_anchors,
)
from .inference import Detection, NmsConfig, class_scores, infer, nms, select_detections
from .loss import multibox_loss
from .model import DetectorModel, backbone_forward, heads_forward, split_background
from .training import (
    DESK_FINETUNE,
    DESK_PRETRAIN,
    FULL_SCALE_SCHEDULE,
    AblationFlags,
    FinetuneResult,
    Schedule,
    TrainingDiverged,
    finetune,
    pretrain,
)
