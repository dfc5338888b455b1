from . import jobs
from . import identities

__all__ = [
    "jobs",
    "identities",
]
