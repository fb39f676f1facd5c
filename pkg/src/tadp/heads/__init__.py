from .dense import DepthHead, SegHead
from .detection import DetectionHead, DetectionHeadConfig, Detections, detection_loss
from .losses import IGNORE_INDEX, EmptyTargetError, depth_loss, seg_loss
from .pyramid import FPNNeck, LayoutMismatchError, PyramidDecoder, check_layout, pyramid_of
