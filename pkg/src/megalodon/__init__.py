"""Byte-level Megalodon: CEMA, timestep normalization, chunked normalized attention."""

from .block import BOS, MegalodonLM, ModelConfig, StreamState, stream_forward
from .cema import CEMA, CemaParams, CemaState, cema_forward_chunk, cema_forward_fft, cema_forward_recurrent
from .checkpoint import load_checkpoint, save_checkpoint
from .norms import LayerNormPlus1, TimestepNorm, timestep_norm

__all__ = [
    "BOS", "MegalodonLM", "ModelConfig", "StreamState", "stream_forward",
    "CEMA", "CemaParams", "CemaState", "cema_forward_chunk", "cema_forward_fft", "cema_forward_recurrent",
    "load_checkpoint", "save_checkpoint", "LayerNormPlus1", "TimestepNorm", "timestep_norm",
]
