"""Speaker-verification back-end: cepstral front-end, i-vector extraction,
embedding compensation, PLDA scoring, score post-processing and a batch CLI.
"""

__version__ = "0.1.0"
