"""castline: an IIoT timeseries platform for process-industry digital twins.

The package bundles an asset/series registry, a columnar timeseries store
with automatic rollup and retention, time-to-position transformation views
for continuous casting lines, zero-copy federation of legacy data sources,
an HTTP API with streaming responses, and an operator CLI with a casting
simulator.
"""

from castline.platform import Platform

__all__ = ["Platform"]
__version__ = "0.1.0"
