"""Cloud-assisted packet recovery.

Erasure-codes duplicated traffic across and within flows at a relay
datacenter, detects losses at the receiver with a two-state timeout
model, and repairs them from a second datacenter using parity plus
cooperative re-uploads from peer receivers — so the cloud path carries
coded overhead instead of full copies, and pays egress only for what
was actually lost.  Ships with a deterministic discrete-event simulator
and a scenario CLI that reproduces the headline behaviors.
"""

__version__ = "0.1.0"
