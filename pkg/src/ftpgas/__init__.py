"""Fault-tolerant PGAS-style runtime with a distributed Lanczos eigensolver.

Subpackages:

- ``transport``: segments, one-sided writes, ping, kill and group commit over
  an in-process deterministic simulator or local OS processes.
- ``detector``: the dedicated ping-scanning fault detector.
- ``recovery``: failure-notice polling and non-shrinking worker-group rebuild.
- ``checkpoint``: neighbor-level checkpoint/restart library.
- ``solver``: stencil matrix generation, halo-exchange spMVM, Lanczos and QL.
- ``harness``: launcher, fault injection, scenarios and overhead metrics.
"""

__version__ = "0.1.0"
