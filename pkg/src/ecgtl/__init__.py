"""ECG spectrogram transfer-learning pipeline.

Parses WFDB/MIT-BIH records, detects R peaks, turns beats into STFT
spectrogram images, pretrains a ResNet on arrhythmia beats and
fine-tunes it to a binary responder task with cross-validated
accuracy/sensitivity/specificity reporting.
"""

__version__ = "0.1.0"
