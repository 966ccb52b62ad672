"""Programming knowledge tracing on a small numpy autodiff core.

Modules: ``numkernel`` (tensors, tape, Adam), ``datamodel`` (schema, I/O,
simulator), ``graphembed`` (problem vectors), ``codeembed`` (verdict
classifier embeddings), ``dsm`` (double-sequence model), ``trainer`` and ``cli``.
"""
__version__ = "0.1.0"
