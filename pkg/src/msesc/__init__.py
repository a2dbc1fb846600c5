"""Multi-stream environmental sound classification with temporal attention."""

from .audio import AudioClip, Segment, SynthSpec, synth_dataset
from .config import RunConfig, load_run_config, load_synth_spec
from .model import ModelConfig, MultiStreamNet

__all__ = [
    "AudioClip",
    "ModelConfig",
    "MultiStreamNet",
    "RunConfig",
    "Segment",
    "SynthSpec",
    "load_run_config",
    "load_synth_spec",
    "synth_dataset",
]
