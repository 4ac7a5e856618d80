"""Score-to-audio synthesis: expressive timing, polyphonic mel synthesis and
Griffin-Lim inversion on a small numpy autodiff core."""

from .score import AlignedNote, AlignedScore, Note, Score, ScoreError

__version__ = "0.1.0"

__all__ = ["AlignedNote", "AlignedScore", "Note", "Score", "ScoreError", "__version__"]
