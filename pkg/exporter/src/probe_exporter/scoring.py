"""Candidate scoring and first-token accuracy for multiple-choice probes.

Each candidate answer string is teacher-forced after the prompt; its
log-likelihood is length-normalized to exp(loglik / token_count) so
candidates of different lengths compete fairly. Accuracy is a strict
string match on the first generated token, normalized by lowercasing
and stripping punctuation.
"""
from __future__ import annotations

import string

import numpy as np

from .model import TinyLvlm, _softmax, encode_text

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_token(token: str) -> str:
    return token.translate(_PUNCT_TABLE).strip().lower()


def option_letter(index: int) -> str:
    return chr(ord("A") + index)


def candidate_loglik(model: TinyLvlm, context: np.ndarray, candidate: str,
                     tap: int | None = None) -> tuple[float, int]:
    """Teacher-forced log-likelihood of the candidate string (nats) and
    its token count."""
    ids = encode_text(candidate)
    emb = np.vstack([context, model.w["tok_embed"][ids]])
    logits = model.logits(emb, tap=tap)
    total = 0.0
    offset = context.shape[0]
    for step, token in enumerate(ids):
        probs = _softmax(logits[offset + step - 1])
        total += float(np.log(probs[token]))
    return total, len(ids)


def length_normalized(loglik: float, token_count: int) -> float:
    return float(np.exp(loglik / token_count))


def score_candidates(model: TinyLvlm, context: np.ndarray, candidates: list[str],
                     tap: int | None = None) -> np.ndarray:
    """Length-normalized scores in (0, 1], one per candidate."""
    scores = []
    for candidate in candidates:
        loglik, count = candidate_loglik(model, context, candidate, tap=tap)
        scores.append(length_normalized(loglik, count))
    return np.array(scores)


def first_token_prediction(model: TinyLvlm, context: np.ndarray,
                           n_options: int) -> int | None:
    """Index of the option letter strictly matching the first generated
    token, or None when the model fails the expected format."""
    generated = model.greedy_decode(context, max_new_tokens=1)
    token = normalize_token(generated)
    for index in range(n_options):
        if token == option_letter(index).lower():
            return index
    return None
