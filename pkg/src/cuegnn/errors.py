"""Exception hierarchy shared by all cuegnn modules.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific class that applies.
"""


class CueGnnError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CueGnnError):
    """Dimension mismatch between arrays; the message names both shapes."""


class DataError(CueGnnError):
    """Malformed manifest, record, or feature file.

    Carries ``sample_id`` and ``cue`` when the offending record is known.
    """

    def __init__(self, message, sample_id=None, cue=None):
        parts = []
        if sample_id is not None:
            parts.append(f"sample '{sample_id}'")
        if cue is not None:
            parts.append(f"cue '{cue}'")
        if parts:
            message = f"{message} ({', '.join(parts)})"
        super().__init__(message)
        self.sample_id = sample_id
        self.cue = cue


class CheckpointError(CueGnnError):
    """Unreadable checkpoint or manifest-fingerprint mismatch."""


class NumericalError(CueGnnError):
    """Non-finite values where finite ones are required (e.g. gradients)."""
