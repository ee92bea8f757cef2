"""Ensemble inference by probability averaging.

The ensemble probability is the arithmetic mean of the member models' final
probability maps, binarized at 0.5. Members are sorted by id and accumulated
in double precision, so the result is independent of the order the models
were supplied in.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .network import UNet3D
from .volume import BinaryMask, CaseRecord, ProbabilityMap, case_channels


class EnsembleError(ValueError):
    pass


def ensemble_predict(
    models: list[tuple[str, UNet3D]] | dict[str, UNet3D],
    case: CaseRecord,
) -> tuple[ProbabilityMap, BinaryMask]:
    """Average the final probability maps of (id, model) members for one case."""
    if isinstance(models, dict):
        models = list(models.items())
    if not models:
        raise EnsembleError("empty model list")
    x = torch.from_numpy(case_channels(case))
    acc = None
    for _, model in sorted(models, key=lambda item: item[0]):
        with torch.no_grad():
            prob = model(x, train=False).final.squeeze(0).numpy().astype(np.float64)
        acc = prob if acc is None else acc + prob
    mean = (acc / len(models)).astype(np.float32)
    mask = (mean >= 0.5).astype(np.uint8)
    return ProbabilityMap(case.grid, mean), BinaryMask(case.grid, mask)


def build_ensemble_n(ranked_ids: list[str], n: int) -> list[str]:
    """First n ids of a best-first ranking."""
    if not (1 <= n <= len(ranked_ids)):
        raise EnsembleError(f"n={n} outside [1, {len(ranked_ids)}]")
    return list(ranked_ids[:n])


def write_ensemble_spec(checkpoint_paths: list[str | Path], path: str | Path) -> None:
    """Ordered checkpoint list consumed by ensemble inference."""
    payload = {"checkpoints": [str(p) for p in checkpoint_paths]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_ensemble_spec(path: str | Path) -> list[str]:
    payload = json.loads(Path(path).read_text())
    paths = payload.get("checkpoints")
    if not isinstance(paths, list) or not paths:
        raise EnsembleError(f"{path}: expected a non-empty 'checkpoints' list")
    return [str(p) for p in paths]
