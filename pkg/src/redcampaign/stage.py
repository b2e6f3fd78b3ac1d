"""Campaign stages."""

from __future__ import annotations

import enum


class Stage(enum.Enum):
    RECON = "RECON"
    EXPLOIT = "EXPLOIT"
    EXFILTRATE = "EXFILTRATE"
    END_OF_CAMPAIGN = "END_OF_CAMPAIGN"


# Only these stages keep command history; reconnaissance is deterministic
# enough that logging it would be pure overhead.
MEMORY_STAGES = (Stage.EXPLOIT, Stage.EXFILTRATE)
