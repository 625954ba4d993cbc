"""Musubi: dense grounding of paragraph descriptions in 3D point-cloud scenes.

The core library lives in the :mod:`musubi` package. A built-in synthetic
scene/paragraph world stands in for scanned datasets so that every stage can be
trained and checked on a desk-scale CPU budget.
"""

from __future__ import annotations

__all__ = [
    "__version__",
]

__version__ = "0.1.0"
