"""Line-protocol runner hosting one candidate mechanism per process."""

from .loader import ALLOWED_IMPORTS, CandidateError, CandidateModule, load_candidate
from .serve import PROTOCOL_VERSION, serve

__version__ = "0.1.0"

__all__ = [
    "ALLOWED_IMPORTS",
    "CandidateError",
    "CandidateModule",
    "PROTOCOL_VERSION",
    "load_candidate",
    "serve",
]
