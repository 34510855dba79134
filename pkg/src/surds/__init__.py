"""Two-stage writer-independent offline signature verification.

Stage 1 pre-trains a ResNet-18 encoder by reconstructing signature images
from attention-pooled patch features; stage 2 fine-tunes it with a projector
head under a dual (intra-writer + cross-writer) triplet loss. Verification
compares a query's mean embedding distance to a writer's references against
a swept threshold.
"""
from .errors import (AllBackground, CountMismatch, DataError, DegenerateInput, InsufficientSamples,
                     MissingEmbedding, MissingFile, NumericalError, ParseError, ShapeMismatch)

__version__ = "0.1.0"
