"""A three-tier federation of digital object repositories.

Tier-1 nodes serve Surrogates and Datastreams over OAI-PMH and OpenURL,
Tier-2 maps identifiers to repositories and components to interfaces, and
the Tier-3 federator exposes the whole federation through the same
interfaces as a single node.
"""

__version__ = "0.1.0"
