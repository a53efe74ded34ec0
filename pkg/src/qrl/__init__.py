"""Goal-conditioned value learning with quasimetric critics.

Learns optimal goal-conditioned values by maximizing a parametrized
quasimetric subject to local transition-cost constraints, and validates
the result against exact shortest-path oracles on discrete MDPs.
"""

__version__ = "0.1.0"
