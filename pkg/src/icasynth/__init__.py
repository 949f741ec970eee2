"""ICA-based class-conditional synthetic data generation and
multimodal MLP classification for subject-by-feature matrices.
"""

__version__ = "0.1.0"
