# Copyright 2026 The optgqa Authors
# SPDX-License-Identifier: Apache-2.0
"""Grouped-query attention kernels, paged KV cache, scheduler and bench harness."""

from ._optgqa import *  # noqa: F401,F403
from ._optgqa import __doc__  # noqa: F401
