"""Data-type classification of raw payload keys against the ontology's level-3 labels."""

from .clients import (
    API_KEY_ENV,
    ChatCompletionClient,
    ClientError,
    FixtureMissingError,
    RecordingClient,
    ReplayClient,
    request_digest,
)
from .ensemble import DEFAULT_TEMPERATURES, EnsembleRunner, EnsembleStats, RunCache, run_ensemble
from .estimator import CLASSIFIER_MODES, DataTypeClassifier
from .keys import BaselineMatcher, baseline_classify, normalize_key
from .prompt import SYSTEM_PROMPT, SingleRunResult, build_messages, build_prompt, parse_llm_response, prompt_hash
from .validation import (
    AccuracyReport,
    AccuracyTable,
    LabeledSample,
    load_labeled_sample,
    sample_keys,
    validate_against_sample,
    validation_table,
)
from .vote import VotedLabel, apply_threshold, majority_vote

__all__ = [
    "API_KEY_ENV", "ChatCompletionClient", "ClientError", "FixtureMissingError",
    "RecordingClient", "ReplayClient", "request_digest",
    "DEFAULT_TEMPERATURES", "EnsembleRunner", "EnsembleStats", "RunCache", "run_ensemble",
    "CLASSIFIER_MODES", "DataTypeClassifier",
    "BaselineMatcher", "baseline_classify", "normalize_key",
    "SYSTEM_PROMPT", "SingleRunResult", "build_messages", "build_prompt", "parse_llm_response",
    "prompt_hash",
    "AccuracyReport", "AccuracyTable", "LabeledSample", "load_labeled_sample", "sample_keys",
    "validate_against_sample", "validation_table",
    "VotedLabel", "apply_threshold", "majority_vote",
]
