"""Open-vocabulary spatio-temporal action detection with a frozen video-language encoder.

Modules follow the data flow: ``backend`` (encoder features and pyramid), ``prior``
(attention-derived box priors), ``head`` (cascaded query mixing), ``dfa`` (fused
query-text alignment), ``criterion`` (set-matching loss), ``evaluation`` (tubes and
video mAP), ``data`` (files, splits, synthetic set) and ``cli``.
"""
from .backend import BackendConfig, VideoClip, VLMFeatureBundle, encode_clip, make_backend
from .config import RunConfig, load_config, save_config
from .dfa import ActionClass, Vocabulary
from .errors import ConfigError, InputError, OpenMixerError, ValidationError
from .evaluation import DetectionTube, EvalProtocol, EvalReport, FrameDetection, video_map
from .head import HeadConfig, QueryState
from .model import Detector, Inference, evaluate_detector

__all__ = [
    "ActionClass", "BackendConfig", "ConfigError", "DetectionTube", "Detector", "EvalProtocol",
    "EvalReport", "FrameDetection", "HeadConfig", "Inference", "InputError", "OpenMixerError",
    "QueryState", "RunConfig", "ValidationError", "VideoClip", "VLMFeatureBundle", "Vocabulary",
    "encode_clip", "evaluate_detector", "load_config", "make_backend", "save_config", "video_map",
]
__version__ = "0.1.0"
