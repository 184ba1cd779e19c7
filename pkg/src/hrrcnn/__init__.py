"""Heterogeneous graph attention and a two-stage relational detector on numpy.

Modules: ``autodiff`` (tape-based reverse mode), ``geometry`` (boxes, IoU,
RoIAlign), ``graphs`` (pixel/scale/RoI relation graphs), ``gam`` (graph
attention module), ``detector`` (backbone, stages, loss, inference),
``training``, ``synthdata`` (procedural scenes), ``metrics`` (AP, regression,
parameter counts) and ``cli`` (commands and on-disk formats).
"""

__version__ = "0.1.0"
