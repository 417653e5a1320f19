"""Joint visual question answering / question generation with an invertible
low-rank bilinear fusion core, trained end-to-end on a synthetic micro-world.

Everything is dense float64 numpy plus a small hand-rolled reverse-mode tape;
no deep-learning framework is involved.
"""

__version__ = "0.1.0"
