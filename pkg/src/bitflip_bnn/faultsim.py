"""Stochastic bit-flip injection into stored weights and accuracy sweeps.

Errors model imperfect programming of the memory holding the binarized
weights: each weight bit is XOR-flipped independently with probability BER,
once per trial (persistent write errors, not read disturb). Thresholds and
the network structure are assumed error-free, and padding bits are never
touched. Trials are independent; each derives its own RNG stream from
(master_seed, ber_index, trial_index), so a sweep is reproducible for any
execution order or worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bitcore import (
    BitTensor,
    BnnModel,
    _pack_bool_rows,
    model_predict_batch,
)
from .mnist_io import Dataset, binarize_input

THREADS_ENV_VAR = "BITFLIP_BNN_THREADS"


@dataclass
class FaultTrialConfig:
    """One point of a fault-injection experiment (weight bits only)."""

    ber: float
    trials: int = 5
    master_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ber <= 1.0:
            raise ValueError(f"ber must lie in [0,1], got {self.ber}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class SweepResult:
    """Per-trial accuracies plus per-BER mean and sample std."""

    bers: list[float]
    trials: int
    accuracies: np.ndarray  # (n_bers, trials)
    mean_accuracy: np.ndarray = field(init=False)
    std_accuracy: np.ndarray = field(init=False)

    def __post_init__(self):
        self.accuracies = np.asarray(self.accuracies, dtype=np.float64)
        if self.accuracies.shape != (len(self.bers), self.trials):
            raise ValueError("accuracy matrix shape mismatch")
        if self.accuracies.size and (
            self.accuracies.min() < 0.0 or self.accuracies.max() > 1.0
        ):
            raise ValueError("accuracies must lie in [0,1]")
        self.mean_accuracy = self.accuracies.mean(axis=1)
        if self.trials > 1:
            self.std_accuracy = self.accuracies.std(axis=1, ddof=1)
        else:
            self.std_accuracy = np.zeros(len(self.bers))


def trial_seed(master_seed: int, ber_index: int, trial_index: int) -> np.random.SeedSequence:
    """The fixed seed-splitting scheme for sweep trials."""
    return np.random.SeedSequence((master_seed, ber_index, trial_index))


def _flip_tensor(tensor: BitTensor, ber: float, rng: np.random.Generator) -> BitTensor:
    draws = rng.random(tensor.total_bits)
    flips = (draws < ber).reshape(tensor.n_rows, tensor.n_bits)
    flip_words = _pack_bool_rows(flips)
    return BitTensor(tensor.shape, tensor.words ^ flip_words, validate=False)


def flip_bits(model: BnnModel, ber: float, seed) -> BnnModel:
    """Copy the model with each weight bit flipped independently at rate ber.

    Thresholds, layer structure and padding bits are untouched; the input
    model is never modified. `seed` may be an int, a SeedSequence or a
    Generator; layers consume one stream in order, so identical
    (model, ber, seed) always yields an identical faulty model.
    """
    if not 0.0 <= ber <= 1.0:
        raise ValueError(f"ber must lie in [0,1], got {ber}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(
        np.random.PCG64(seed)
    )
    faulty = model.copy()
    for layer in faulty.layers:
        layer.weights = _flip_tensor(layer.weights, ber, rng)
    return faulty


def accuracy(model: BnnModel, dataset: Dataset) -> float:
    """Fraction of dataset samples whose predicted class matches the label."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    inputs = binarize_input(dataset.images)
    predictions = model_predict_batch(model, inputs)
    return float(np.mean(predictions == dataset.labels))


def _run_trial(args) -> tuple[int, int, float]:
    model, inputs, labels, ber, master_seed, ber_index, trial_index = args
    faulty = flip_bits(model, ber, trial_seed(master_seed, ber_index, trial_index))
    predictions = model_predict_batch(faulty, inputs)
    return ber_index, trial_index, float(np.mean(predictions == labels))


def worker_count() -> int:
    """Worker cap from BITFLIP_BNN_THREADS (default 1: sequential)."""
    raw = os.environ.get(THREADS_ENV_VAR, "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from exc
    return max(1, n)


def ber_sweep(
    model: BnnModel,
    dataset: Dataset,
    bers: list[float],
    trials: int,
    master_seed: int,
) -> SweepResult:
    """Accuracy under injected faults over a BER grid, repeated `trials` times.

    BERs must be sorted ascending. Each (ber, trial) evaluation flips a fresh
    copy of the model with its derived seed and scores it on the dataset.
    Results are aggregated in (ber, trial) order, so the outcome does not
    depend on the number of workers.
    """
    if not bers:
        raise ValueError("need at least one BER")
    if sorted(bers) != list(bers):
        raise ValueError("BERs must be sorted ascending")
    for ber in bers:
        FaultTrialConfig(ber, trials, master_seed)  # validates ranges
    if len(dataset) == 0:
        raise ValueError("dataset is empty")

    # binarize once; trials ship the packed bits, not the float images
    inputs = binarize_input(dataset.images)
    labels = np.asarray(dataset.labels)
    jobs = [
        (model, inputs, labels, ber, master_seed, bi, ti)
        for bi, ber in enumerate(bers)
        for ti in range(trials)
    ]
    workers = worker_count()
    results: dict[tuple[int, int], float] = {}
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for bi, ti, acc in pool.map(_run_trial, jobs):
                results[(bi, ti)] = acc
    else:
        for job in jobs:
            bi, ti, acc = _run_trial(job)
            results[(bi, ti)] = acc

    matrix = np.array(
        [[results[(bi, ti)] for ti in range(trials)] for bi in range(len(bers))]
    )
    return SweepResult(list(bers), trials, matrix)
