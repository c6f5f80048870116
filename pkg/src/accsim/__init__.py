"""Adaptive contextual caching simulator.

A desk-scale testbed for semantic caching in retrieval-augmented
generation at the edge: a synthetic embedded corpus, an HNSW vector
index, a capacity-bounded semantic cache, classic replacement policies
(FIFO / LRU / LFU / semantic / GDSF), and a DQN meta-policy that picks
replacement actions per candidate chunk.
"""

__version__ = "0.1.0"
