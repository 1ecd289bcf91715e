"""Desk-scale ocular screening pipeline.

Capture-protocol validation, eye-region preprocessing, sector-grid feature
extraction, sparsity-regularized classification, identity-disjoint
cross-validated evaluation, a synthetic eye-image corpus generator, and an
HTTP triage service.
"""

__version__ = "0.1.0"
