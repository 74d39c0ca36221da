"""One-time-pad session encryption over UDP.

Subsystems: `codec` (packet sealing), `vault` (on-disk pad store), `session`
(stop-and-wait protocol engine), `transport` (real UDP and a deterministic
simulator), `hub` (reserve carving and pad distribution), `config`/`app`
(operator daemon), `jamlab` (hostile-traffic cost experiments).
"""

__version__ = "0.1.0"

from .errors import PadlinkError

__all__ = ["PadlinkError", "__version__"]
