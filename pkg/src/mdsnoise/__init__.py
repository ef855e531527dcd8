"""Micro-Doppler spectrogram simulation, GAN noise modelling and denoising."""
from .errors import MdsError
from .spectrogram import ACTIVITIES, PATCH_SHAPE, ActivityLabel, NoisePatch, Spectrogram

__version__ = "0.1.0"
__all__ = ["ACTIVITIES", "PATCH_SHAPE", "ActivityLabel", "MdsError", "NoisePatch", "Spectrogram", "__version__"]
