"""Document-level relation extraction over mention graphs.

Pipeline: a small trainable token encoder produces contextual embeddings;
mention/sentence/document nodes are pooled into a heterogeneous graph;
a decoder stack applies graph-masked self-attention plus cross-attention
back into the token sequence; an adaptive-threshold bilinear head scores
every ordered entity pair against the full relation inventory.
"""

__version__ = "0.1.0"
