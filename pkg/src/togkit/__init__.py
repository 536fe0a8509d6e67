"""togkit: train an RNN transducer on speech and rasterized-text inputs,
then adapt it to new text domains without audio."""

__version__ = "0.1.0"
