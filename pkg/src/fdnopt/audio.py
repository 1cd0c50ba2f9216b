"""Mono WAV input/output (32-bit float)."""

import numpy as np
from scipy.io import wavfile

from .errors import ConfigurationError


def write_wav(path, samples: np.ndarray, fs: int) -> None:
    """Write a mono float32 WAV file."""
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim != 1:
        raise ConfigurationError("only mono signals are written")
    wavfile.write(path, int(fs), samples)


def read_wav(path):
    """Read a WAV file as (float64 mono samples, sample rate)."""
    fs, data = wavfile.read(path)
    if data.ndim > 1:
        data = data[:, 0]
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        data = data.astype(np.float64) / max(abs(info.min), info.max)
    else:
        data = data.astype(np.float64)
    return data, int(fs)
