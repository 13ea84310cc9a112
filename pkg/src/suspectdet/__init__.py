"""Two-stage detection trained on annotated positives plus unannotated negatives.

Negative images contribute a top likelihood loss on their highest-scoring
anchors and a cosine similarity loss against positive foreground proposals.
"""

__version__ = "0.1.0"
