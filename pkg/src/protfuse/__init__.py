"""protfuse: desk-scale multimodal protein understanding.

Per-residue structure and sequence encoders project into a causal byte-level
decoder's embedding space, fuse by element-wise addition, and train in two
freeze-controlled stages on verbalized protein tasks.
"""

__version__ = "0.1.0"
