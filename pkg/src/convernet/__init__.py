"""Thread-ending post prediction with a layer-normalised BiLSTM and length-conditioned attention."""

__version__ = "0.1.0"
