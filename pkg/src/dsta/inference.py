"""Nine-clip ensemble prediction and accuracy evaluation.

Each video is sampled into three temporal windows times three spatial
crops; the nine per-clip softmax vectors are arithmetically averaged and
the argmax (lowest index on ties) is the prediction.
"""

from __future__ import annotations

import concurrent.futures
import math
import random
from dataclasses import dataclass

from .data import StoredVideo, sample_inference_clips
from .errors import DataError, NumericError
from .model import ModelConfig, VideoTransformer
from .tensor import Tensor


def softmax_probs(logits: Tensor) -> list[float]:
    """Stable softmax of a 1-d logits tensor, as plain floats."""
    vals = list(logits.data)
    m = max(vals)
    exps = [math.exp(v - m) for v in vals]
    total = sum(exps)
    return [e / total for e in exps]


def _argmax_lowest(values: list[float]) -> int:
    best, best_i = values[0], 0
    for i in range(1, len(values)):
        if values[i] > best:
            best, best_i = values[i], i
    return best_i


def ensemble_average(clip_probs: list[list[float]]) -> tuple[list[float], int]:
    """Arithmetic mean of per-clip probabilities and its argmax (lowest-index ties).

    When every clip produced the same vector the mean is that vector by
    definition; returning it directly keeps the collapse bit-exact instead
    of within rounding of the nine-term sum.
    """
    first = clip_probs[0]
    if all(cp == first for cp in clip_probs[1:]):
        return list(first), _argmax_lowest(first)
    n_classes = len(first)
    avg = [sum(cp[j] for cp in clip_probs) / len(clip_probs) for j in range(n_classes)]
    return avg, _argmax_lowest(avg)


@dataclass
class Prediction:
    video_id: str
    label: int
    clip_probs: list[list[float]]  # 9 x num_classes
    probs: list[float]  # averaged, sums to 1
    predicted: int

    def tag(self) -> str:
        """TP/FP/TN/FN for two-class tasks, treating class 1 as positive."""
        if len(self.probs) != 2:
            return "NA"
        if self.predicted == 1:
            return "TP" if self.label == 1 else "FP"
        return "FN" if self.label == 1 else "TN"



def predict(
    video: StoredVideo,
    model: VideoTransformer,
    cfg: ModelConfig,
    rng: random.Random,
    *,
    deterministic: bool = False,
) -> Prediction:
    """Sample nine clips, average their softmax scores, take the argmax."""
    clips = sample_inference_clips(video, cfg, rng, deterministic=deterministic)
    clip_probs = []
    for i, clip in enumerate(clips):
        try:
            logits = model.forward(clip)
        except NumericError as e:
            raise NumericError(f"clip {i} of video {video.video_id}: {e}") from e
        clip_probs.append(softmax_probs(logits))
    avg, predicted = ensemble_average(clip_probs)
    return Prediction(
        video_id=video.video_id,
        label=video.label,
        clip_probs=clip_probs,
        probs=avg,
        predicted=predicted,
    )


@dataclass
class Evaluation:
    accuracy: float
    records: list[Prediction]

    def report_lines(self) -> list[str]:
        lines = []
        for r in self.records:
            probs = ",".join(f"{p:.6f}" for p in r.probs)
            lines.append(
                f"item={r.video_id} label={r.label} pred={r.predicted} "
                f"probs=[{probs}] tag={r.tag()}"
            )
        lines.append(f"accuracy={self.accuracy:.4f}")
        return lines


def evaluate(
    videos: list[StoredVideo],
    model: VideoTransformer,
    cfg: ModelConfig,
    *,
    seed: int = 0,
    deterministic: bool = False,
    threads: int = 1,
) -> Evaluation:
    """Ensemble accuracy over a split, with per-item records.

    Each video gets its own derived rng, so results are identical whether
    items run serially or across threads.
    """
    if not videos:
        raise DataError("cannot evaluate an empty split")

    def one(index: int) -> Prediction:
        rng = random.Random(f"{seed}:eval:{index}")
        return predict(videos[index], model, cfg, rng, deterministic=deterministic)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, range(len(videos))))
    else:
        records = [one(i) for i in range(len(videos))]
    hits = sum(1 for r in records if r.predicted == r.label)
    return Evaluation(accuracy=hits / len(records), records=records)
