"""Layout-aware document understanding at desk scale.

The package covers the full pre-training pipeline for visually rich
documents: reading-order serialization from OCR word boxes, tri-modal
(text / vision / layout) input embedding, a transformer with spatially
disentangled attention, four pre-training objectives, downstream task
heads with their metrics, and a synthetic-corpus training harness.
"""

from __future__ import annotations

__version__ = "0.1.0"

from vrdu.kernels import BACKEND as KERNEL_BACKEND
