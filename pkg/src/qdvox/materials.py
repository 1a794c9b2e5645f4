"""Voxel material ids.

The ids double as CPPN output channel indices, so their order is also the
argmax tie-break order used when decoding.
"""

EMPTY = 0
PASSIVE_SOFT = 1
PASSIVE_RIGID = 2
ACTIVE_H = 3
ACTIVE_V = 4

N_MATERIALS = 5
ACTIVE = (ACTIVE_H, ACTIVE_V)

# text dump characters, indexed by material id
CHARS = ".srhv"
NAMES = ("empty", "passive_soft", "passive_rigid", "active_h", "active_v")
