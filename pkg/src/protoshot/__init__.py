"""Few-shot bioacoustic sound event detection with prototypical networks.

Pipeline: WAV ingestion -> mel spectrogram front-end (log or PCEN) ->
spectrogram augmentation -> episodic training of a 3-block conv encoder ->
5-shot inference with prototype softmax -> onset/offset post-processing ->
event-based scoring.
"""

__version__ = "0.1.0"

SAMPLE_RATE = 22050
N_FFT = 1024
HOP = 256
N_MELS = 128
HOP_SECONDS = HOP / SAMPLE_RATE
