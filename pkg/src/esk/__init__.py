"""Acoustic escalation detection toolkit.

End-to-end pieces of an escalation classifier for short conversation
clips: energy-based voice activity detection, MFCC / log-filterbank
extraction, a small residual network with global average pooling that can
be pretrained on an emotion task and fine-tuned, embedding extraction and
fusion, a linear SVM backend, and UAR-based evaluation.
"""

from esk.dataset_io import AudioClip, Manifest, ManifestEntry, SynthSpec
from esk.features import FeatureConfig, FeatureMatrix
from esk.metrics import EvalReport, evaluate
from esk.net import NetConfig, NetModel
from esk.train import TrainConfig, TrainHistory
from esk.vad import FrameDecisions, VadConfig

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "EvalReport",
    "FeatureConfig",
    "FeatureMatrix",
    "FrameDecisions",
    "Manifest",
    "ManifestEntry",
    "NetConfig",
    "NetModel",
    "SynthSpec",
    "TrainConfig",
    "TrainHistory",
    "VadConfig",
    "evaluate",
]
