"""Numerical laboratory for the ratio processes of self-similar CBIs and
their generalized Fleming-Viot processes with immigration.

Modules
    mechanisms   branching/immigration mechanisms and the coalescent pair M
    cbi_sim      CBI paths, the measure-valued flow and its time change
    coalescent   rates, exact chains and simulation of the M-coalescent
    gfvi_sim     finite-N particle system of the Fleming-Viot process
    genlab       deterministic checks of the generator identities
    harness      the ``fvlab`` command line
"""

from .mechanisms import (BetaPart, CoalescentM, FellerCase, StableCase,
                         theorem1_correspondence)

__version__ = "0.1.0"

__all__ = ["BetaPart", "CoalescentM", "FellerCase", "StableCase", "theorem1_correspondence"]
