"""Sequential convolutional gait recognition on silhouette sequences."""

__version__ = "0.1.0"
