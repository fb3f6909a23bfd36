"""fldkit: synthetic-cohort fatty-liver screening toolkit.

Pipeline: generate a cohort with planted metadata/image signal, rank and
select indicators (Pearson + Shapley), train the fusion network, evaluate
with stratified k-fold and cross-cohort migration.
"""
from __future__ import annotations

__version__ = "0.1.0"

from . import errors  # noqa: F401
