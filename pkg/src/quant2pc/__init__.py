"""Two-party secure inference for low bit-width quantized networks.

Modules:

* ``ring`` - fixed-point tensors over 2^l rings and the plaintext oracles.
* ``transport`` - framed, metered channels (in-process or TCP).
* ``ot`` - batched oblivious transfer.
* ``primitives`` - share-level extension, truncation, re-quantization, ReLU.
* ``matmul`` - the four matrix-multiplication constructions and their costs.
* ``graph`` - network IR, graph passes, estimator and executors.
* ``planner`` - communication-aware bit-width allocation.
* ``runner`` / ``cli`` - end-to-end runs and the ``quant2pc`` command.
"""

from .ring import QuantMeta, RingTensor

__all__ = ["QuantMeta", "RingTensor"]
__version__ = "0.1.0"
