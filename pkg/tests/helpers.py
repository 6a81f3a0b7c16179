"""Small hand-built traces for unit tests."""
from __future__ import annotations

from hmtier.trace import LayerSpec, TensorSpec, Trace, TrainingStepSpec


def tensor(tid, size, alloc, free, accesses, step=0):
    """Step-local tensor alive from layer ``alloc`` to ``free``; ``accesses`` maps layer -> count (all reads)."""
    acc = tuple((layer, c, 0) for layer, c in sorted(accesses.items()))
    return TensorSpec(tid, size, (step, alloc), (step, free), acc)


def persistent(tid, size, accesses, num_layers, num_steps=1):
    acc = tuple((layer, c, 0) for layer, c in sorted(accesses.items()))
    return TensorSpec(tid, size, (0, 0), (num_steps - 1, num_layers - 1), acc)


def one_step(num_layers, tensors, base_ns=1000.0, bucket_id=0):
    layers = tuple(LayerSpec(i, base_ns) for i in range(num_layers))
    return Trace(steps=(TrainingStepSpec(layers, tuple(tensors), bucket_id),), seed=0)
