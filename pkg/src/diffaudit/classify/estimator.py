from __future__ import annotations

from numbers import Real
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_scalar

from ..ontology import Ontology, load_ontology
from .clients import ChatClient
from .ensemble import DEFAULT_TEMPERATURES, EnsembleRunner, EnsembleStats, RunCache
from .keys import BaselineMatcher
from .prompt import DEFAULT_MAX_BATCH, SingleRunResult
from .validation import LabeledSample, validate_against_sample
from .vote import VotedLabel, apply_threshold, canonical_mode, majority_vote

__all__ = ["DataTypeClassifier", "CLASSIFIER_MODES"]

CLASSIFIER_MODES = ("baseline", "ensemble", "hybrid")


class DataTypeClassifier(ClassifierMixin, BaseEstimator):
    """Assign level-3 ontology labels to raw payload keys.

    Parameters
    ----------
    ontology : Ontology, path or None
        None uses the shipped ontology.
    mode : {"baseline", "ensemble", "hybrid"}
        ``baseline`` runs the offline example matcher only; ``ensemble`` asks
        ``client`` once per temperature and votes; ``hybrid`` sends only the
        baseline misses to the ensemble.
    vote : {"avg", "max"}
        How the winning label's confidence is aggregated.
    threshold : float
        Votes below this confidence are left unlabeled by :meth:`predict`.

    ``fit`` takes no training data; it validates parameters and prepares the
    matcher and ensemble runner. Keys are classified by :meth:`vote`.
    """

    def __init__(
        self,
        ontology=None,
        mode: str = "baseline",
        client: Optional[ChatClient] = None,
        model: str = "gpt-4",
        temperatures: Sequence[float] = DEFAULT_TEMPERATURES,
        vote: str = "avg",
        threshold: float = 0.8,
        batch_size: int = DEFAULT_MAX_BATCH,
        retries: int = 3,
        backoff: float = 1.0,
        parallelism: int = 1,
        cache=None,
    ):
        self.ontology = ontology
        self.mode = mode
        self.client = client
        self.model = model
        self.temperatures = temperatures
        self.vote = vote
        self.threshold = threshold
        self.batch_size = batch_size
        self.retries = retries
        self.backoff = backoff
        self.parallelism = parallelism
        self.cache = cache

    def fit(self, X=None, y=None):
        if self.mode not in CLASSIFIER_MODES:
            raise ValueError(f"mode must be one of {CLASSIFIER_MODES}, got {self.mode!r}")
        check_scalar(self.threshold, "threshold", Real, min_val=0.0, max_val=1.0)
        check_scalar(self.batch_size, "batch_size", int, min_val=1)
        check_scalar(self.retries, "retries", int, min_val=0)
        temps = tuple(float(t) for t in self.temperatures)
        if not temps or any(not 0.0 <= t <= 1.0 for t in temps):
            raise ValueError("temperatures must be a non-empty subset of [0, 1]")
        self.vote_mode_ = canonical_mode(self.vote)

        if isinstance(self.ontology, Ontology):
            self.ontology_ = self.ontology
        else:
            self.ontology_ = load_ontology(self.ontology)
        self.classes_ = np.array(self.ontology_.label_names, dtype=object)
        self.matcher_ = BaselineMatcher(self.ontology_)

        self.runner_ = None
        if self.mode != "baseline":
            if self.client is None:
                raise ValueError(f"mode {self.mode!r} needs a chat client")
            cache = self.cache
            if cache is None or isinstance(cache, (str, Path)):
                cache = RunCache(cache)
            self.runner_ = EnsembleRunner(
                self.client, self.ontology_, model=self.model, temperatures=temps,
                batch_size=self.batch_size, retries=self.retries, backoff=self.backoff,
                parallelism=self.parallelism, cache=cache,
            )
        self.runs_: dict[str, list[SingleRunResult]] = {}
        return self

    @property
    def stats_(self) -> EnsembleStats:
        check_is_fitted(self, "matcher_")
        return self.runner_.stats if self.runner_ is not None else EnsembleStats()

    def _baseline_vote(self, key: str) -> Optional[VotedLabel]:
        m = self.matcher_.match(key)
        if m is None:
            return None
        return VotedLabel(key, m.label, m.confidence, "baseline", 1, 1)

    def vote_keys(self, X: Iterable[str]) -> dict[str, Optional[VotedLabel]]:
        """Voted label (or None for abstain) per distinct key, sorted by key."""
        check_is_fitted(self, "matcher_")
        keys = sorted({str(k) for k in X})
        voted: dict[str, Optional[VotedLabel]] = {}
        if self.mode == "ensemble":
            pending = keys
        else:
            for k in keys:
                voted[k] = self._baseline_vote(k)
            pending = [k for k in keys if voted[k] is None] if self.mode == "hybrid" else []
        if pending:
            runs = self.runner_.run(pending)
            self.runs_.update(runs)
            for k in pending:
                voted[k] = majority_vote(runs[k], self.vote_mode_)
        return dict(sorted(voted.items()))

    def predict(self, X: Iterable[str]) -> np.ndarray:
        """Label per input key, or None where the vote abstains or falls below the threshold."""
        X = list(X)
        voted = self.vote_keys(X)
        return np.array(
            [voted[str(k)].label if apply_threshold(voted[str(k)], self.threshold) else None for k in X],
            dtype=object,
        )

    def score(self, X, y, sample_weight=None) -> float:
        """Overall sample accuracy; abstentions and unlabeled keys count as wrong."""
        sample = LabeledSample(tuple(zip(map(str, X), y)))
        voted = self.vote_keys(sample.keys)
        kept = {k: v if apply_threshold(v, self.threshold) else None for k, v in voted.items()}
        return validate_against_sample(sample, kept, ()).accuracy
