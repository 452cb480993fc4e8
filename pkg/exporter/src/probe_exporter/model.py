"""A small self-contained vision-language model for probe export.

A character-level tokenizer, an image patch encoder, and a causal
transformer stack with a tied final-norm/LM-head read-out, all in
float64 numpy with seeded weights. Checkpoints are .npz files of
little-endian float32 arrays, so a saved model is a reproducible
artifact any run can reload bit-for-bit.

The read-out path is factored so that projecting an intermediate hidden
state through the final norm and LM head (the logit-lens view) is the
same computation the standard forward pass applies at the last block.
"""
from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

ALPHABET = string.ascii_letters + string.digits + string.punctuation + " \n"
PAD, BOS = "<pad>", "<bos>"
VOCAB = [PAD, BOS] + list(ALPHABET)
CHAR_TO_ID = {ch: i for i, ch in enumerate(VOCAB)}

IMAGE_SIDE = 8
PATCH_SIDE = 4
N_PATCHES = (IMAGE_SIDE // PATCH_SIDE) ** 2


class ModelError(ValueError):
    pass


def encode_text(text: str) -> np.ndarray:
    try:
        return np.array([CHAR_TO_ID[ch] for ch in text], dtype=np.int64)
    except KeyError as exc:
        raise ModelError(f"character {exc} is outside the model alphabet") from exc


def decode_token(token_id: int) -> str:
    return VOCAB[token_id]


@dataclass
class ModelConfig:
    d_model: int = 24
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 48
    max_len: int = 512


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gain * (x - mu) / np.sqrt(var + 1e-5) + bias


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class TinyLvlm:
    """Deterministic toy LVLM: image patches and text share one stream."""

    def __init__(self, weights: dict[str, np.ndarray], config: ModelConfig):
        self.w = weights
        self.config = config

    # -- construction and persistence ------------------------------------

    @classmethod
    def init(cls, seed: int, config: ModelConfig | None = None) -> "TinyLvlm":
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        d, ff = config.d_model, config.d_ff
        scale = 0.4

        def mat(*shape):
            return rng.standard_normal(shape) * scale / np.sqrt(shape[0])

        w = {
            "tok_embed": mat(len(VOCAB), d) * np.sqrt(len(VOCAB)) * 0.2,
            "pos_embed": mat(config.max_len, d) * np.sqrt(config.max_len) * 0.05,
            "patch_proj_w": mat(PATCH_SIDE * PATCH_SIDE, d),
            "patch_proj_b": np.zeros(d),
            "final_norm_g": np.ones(d),
            "final_norm_b": np.zeros(d),
            "head_w": mat(d, len(VOCAB)),
            "head_b": np.zeros(len(VOCAB)),
        }
        for layer in range(config.n_layers):
            p = f"block{layer}."
            w[p + "ln1_g"] = np.ones(d)
            w[p + "ln1_b"] = np.zeros(d)
            w[p + "wq"] = mat(d, d)
            w[p + "wk"] = mat(d, d)
            w[p + "wv"] = mat(d, d)
            w[p + "wo"] = mat(d, d)
            w[p + "ln2_g"] = np.ones(d)
            w[p + "ln2_b"] = np.zeros(d)
            w[p + "ff1_w"] = mat(d, ff)
            w[p + "ff1_b"] = np.zeros(ff)
            w[p + "ff2_w"] = mat(ff, d)
            w[p + "ff2_b"] = np.zeros(d)
        return cls(w, config)

    def save(self, path) -> None:
        arrays = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in self.w.items()}
        arrays["__config__"] = np.array([self.config.d_model, self.config.n_heads,
                                         self.config.n_layers, self.config.d_ff,
                                         self.config.max_len], dtype="<f4")
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "TinyLvlm":
        data = np.load(path)
        if "__config__" not in data:
            raise ModelError(f"{path} is not a model checkpoint")
        c = data["__config__"].astype(int)
        config = ModelConfig(d_model=int(c[0]), n_heads=int(c[1]),
                             n_layers=int(c[2]), d_ff=int(c[3]), max_len=int(c[4]))
        weights = {k: data[k].astype(float) for k in data.files if k != "__config__"}
        return cls(weights, config)

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    # -- embedding builders ----------------------------------------------

    def image_embeddings(self, image: np.ndarray) -> np.ndarray:
        """Project 4x4 patches of an 8x8 gray image to d_model vectors."""
        image = np.asarray(image, dtype=float)
        if image.shape != (IMAGE_SIDE, IMAGE_SIDE):
            raise ModelError(f"expected a {IMAGE_SIDE}x{IMAGE_SIDE} image, got {image.shape}")
        patches = []
        for r in range(0, IMAGE_SIDE, PATCH_SIDE):
            for c in range(0, IMAGE_SIDE, PATCH_SIDE):
                patches.append(image[r:r + PATCH_SIDE, c:c + PATCH_SIDE].ravel())
        return np.stack(patches) @ self.w["patch_proj_w"] + self.w["patch_proj_b"]

    def text_embeddings(self, text: str) -> np.ndarray:
        return self.w["tok_embed"][encode_text(text)]

    # -- transformer ------------------------------------------------------

    def _block(self, x: np.ndarray, layer: int) -> np.ndarray:
        p = f"block{layer}."
        w = self.w
        h = _layer_norm(x, w[p + "ln1_g"], w[p + "ln1_b"])
        n, d = h.shape
        heads = self.config.n_heads
        hd = d // heads
        q = (h @ w[p + "wq"]).reshape(n, heads, hd).transpose(1, 0, 2)
        k = (h @ w[p + "wk"]).reshape(n, heads, hd).transpose(1, 0, 2)
        v = (h @ w[p + "wv"]).reshape(n, heads, hd).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(hd)
        mask = np.triu(np.full((n, n), -np.inf), k=1)
        attn = _softmax(scores + mask[None, :, :])
        mixed = (attn @ v).transpose(1, 0, 2).reshape(n, d)
        x = x + mixed @ w[p + "wo"]
        h = _layer_norm(x, w[p + "ln2_g"], w[p + "ln2_b"])
        ff = np.maximum(h @ w[p + "ff1_w"] + w[p + "ff1_b"], 0.0)
        return x + ff @ w[p + "ff2_w"] + w[p + "ff2_b"]

    def hidden_states(self, embeddings: np.ndarray) -> list[np.ndarray]:
        """Per-block hidden states; entry L is the output of block L."""
        n = embeddings.shape[0]
        if n > self.config.max_len:
            raise ModelError(f"sequence of {n} tokens exceeds max length")
        x = embeddings + self.w["pos_embed"][:n]
        states = []
        for layer in range(self.config.n_layers):
            x = self._block(x, layer)
            states.append(x)
        return states

    def read_out(self, hidden: np.ndarray) -> np.ndarray:
        """Final norm plus LM head; the logit-lens projection."""
        h = _layer_norm(hidden, self.w["final_norm_g"], self.w["final_norm_b"])
        return h @ self.w["head_w"] + self.w["head_b"]

    def logits(self, embeddings: np.ndarray, tap: int | None = None) -> np.ndarray:
        """Next-token logits at every position, optionally from a tapped block."""
        states = self.hidden_states(embeddings)
        if tap is None:
            tap = self.config.n_layers - 1
        if not 0 <= tap < self.config.n_layers:
            raise ModelError(f"tap {tap} outside depth {self.config.n_layers}")
        return self.read_out(states[tap])

    # -- generation --------------------------------------------------------

    def greedy_decode(self, embeddings: np.ndarray, max_new_tokens: int = 4) -> str:
        """Deterministic greedy continuation (no sampling)."""
        emb = embeddings
        out = []
        for _ in range(max_new_tokens):
            logits = self.logits(emb)[-1]
            token = int(np.argmax(logits))
            out.append(decode_token(token))
            emb = np.vstack([emb, self.w["tok_embed"][token][None, :]])
        return "".join(out)
