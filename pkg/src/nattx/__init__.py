"""Strictly serializable distributed transactions on a simulated network.

Subpackages cover the timestamp-based protocol engines (client and server),
classic baseline protocols, a deterministic discrete-event network, a
post-hoc serializability checker, and benchmark workloads.
"""

__version__ = "0.1.0"
