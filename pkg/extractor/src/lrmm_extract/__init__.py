"""Item-image feature extraction into the LRMMFEAT binary format."""

__version__ = "0.1.0"
