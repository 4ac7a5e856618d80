"""Score-to-recording alignment by dynamic time warping over CQT frames.

The score is rendered with the oracle synthesizer at constant tempo, both
signals are analysed with :func:`scoresynth.dsp.cqt`, and the warping path
between them carries each note's frames over to recording time.

Memory and time are O(N·M) for an N × M cost matrix; pass ``band`` to
restrict the search to a Sakoe-Chiba band for long recordings.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from . import dsp
from .score import AlignedNote, AlignedScore, Score, naive_align

Path = List[Tuple[int, int]]


class AlignmentError(ValueError):
    pass


def frame_cost(a, b) -> np.ndarray:
    """Euclidean distance between every frame of ``a`` and every frame of ``b``.

    Accepts :class:`~scoresynth.dsp.CqtSpectrogram` objects or raw ``bins × T``
    arrays; returns an ``N × M`` matrix.
    """
    A = a.data if hasattr(a, "data") else np.asarray(a, dtype=np.float64)
    B = b.data if hasattr(b, "data") else np.asarray(b, dtype=np.float64)
    if A.shape[0] != B.shape[0]:
        raise AlignmentError(f"bin count mismatch: {A.shape[0]} vs {B.shape[0]}")
    # direct differences (not the Gram expansion) keep identical frames at exactly 0
    return cdist(A.T, B.T)


def dtw(cost, band: Optional[int] = None) -> Tuple[Path, float]:
    """Minimum-cost monotone path from (0, 0) to (N-1, M-1).

    Steps are (+1, +1), (+1, 0) and (0, +1), all with unit weight; ties are
    resolved in that order. ``band`` limits ``|i·M/N - j|`` to at most ``band``.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2 or C.size == 0:
        raise AlignmentError("cost matrix must be non-empty and 2-D")
    if np.any(C < 0) or not np.all(np.isfinite(C)):
        raise AlignmentError("cost entries must be finite and non-negative")
    N, M = C.shape
    D = np.full((N, M), np.inf)
    if band is not None:
        ii, jj = np.indices((N, M))
        centre = ii * (M - 1) / max(N - 1, 1)
        C = np.where(np.abs(jj - centre) <= band, C, np.inf)

    D[0] = np.cumsum(C[0])
    for i in range(1, N):
        prev = D[i - 1]
        row = C[i]
        best = np.empty(M)
        best[0] = prev[0]
        best[1:] = np.minimum(prev[:-1], prev[1:])
        cur = row + best
        # horizontal moves chain along the row
        out = D[i]
        out[0] = cur[0]
        for j in range(1, M):
            h = out[j - 1] + row[j]
            c = cur[j]
            out[j] = h if h < c else c
    total = float(D[N - 1, M - 1])
    if not np.isfinite(total):
        raise AlignmentError("no valid path within the band")

    path = [(N - 1, M - 1)]
    i, j = N - 1, M - 1
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag, up, left = D[i - 1, j - 1], D[i - 1, j], D[i, j - 1]
            if diag <= up and diag <= left:
                i, j = i - 1, j - 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
        path.append((i, j))
    path.reverse()
    return path, total


def path_cost(cost, path: Sequence[Tuple[int, int]]) -> float:
    C = np.asarray(cost)
    return float(sum(C[i, j] for i, j in path))


def is_valid_path(path: Sequence[Tuple[int, int]], N: int, M: int) -> bool:
    if not path or tuple(path[0]) != (0, 0) or tuple(path[-1]) != (N - 1, M - 1):
        return False
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
            return False
    return True


def transfer_alignment(path: Sequence[Tuple[int, int]], synth_aligned: AlignedScore,
                       num_frames: Optional[int] = None) -> AlignedScore:
    """Map note frames from synthesized time to recording time along ``path``.

    A note's onset maps to the first recording frame paired with it; its last
    frame maps to the last paired recording frame, so durations stay stable
    where the path dwells.
    """
    path = np.asarray(path, dtype=np.int64)
    n_synth = int(path[:, 0].max()) + 1
    first = np.full(n_synth, -1, dtype=np.int64)
    last = np.full(n_synth, -1, dtype=np.int64)
    for i, j in path:
        if first[i] < 0:
            first[i] = j
        last[i] = j
    out = []
    for k, an in enumerate(synth_aligned.aligned_notes):
        if an.onset_frames >= n_synth:
            raise AlignmentError(
                f"note {k} onset frame {an.onset_frames} beyond path range {n_synth}"
            )
        end = min(an.end_frame - 1, n_synth - 1)
        onset = int(first[an.onset_frames])
        offset = int(last[end]) + 1
        out.append(AlignedNote(an.note, onset, max(1, offset - onset)))
    if num_frames is None:
        num_frames = max(int(path[:, 1].max()) + 1, max((a.end_frame for a in out), default=0))
    num_frames = max(num_frames, max((a.end_frame for a in out), default=0))
    return AlignedScore(tuple(out), num_frames=num_frames, performer_id=synth_aligned.performer_id)


def align_recording(score: Score, recording: dsp.AudioClip,
                    cqt_params: dsp.CqtParams = dsp.CqtParams(),
                    band: Optional[int] = None):
    """Full dataset-construction step for one (score, recording) pair.

    Returns ``(aligned, path, cost)`` where ``aligned`` is the ground-truth
    alignment in recording frames.
    """
    synth_aligned = naive_align(score)
    rendered = dsp.additive_synth(synth_aligned)
    a = dsp.cqt(rendered, cqt_params)
    b = dsp.cqt(recording, cqt_params)
    cost = frame_cost(a, b)
    path, _ = dtw(cost, band=band)
    rec_frames = dsp.num_frames(len(recording), cqt_params.hop_length)
    aligned = transfer_alignment(path, synth_aligned, num_frames=rec_frames)
    return aligned, path, cost
