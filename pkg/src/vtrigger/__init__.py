"""Second-pass voice-trigger re-scorer: frontend, models, CTC training, evaluation, int8 inference."""

__version__ = "0.1.0"
