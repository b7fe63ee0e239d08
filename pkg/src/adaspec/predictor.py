"""Acceptance prediction head: dataset generation, training and evaluation.

The head is a small residual MLP over the per-candidate feature vector
(see ``policies.candidate_features``) ending in a sigmoid. Depth ``D``
counts hidden layers: ``D = 0`` is logistic regression, ``D >= 1`` has an
input projection to width ``H`` followed by ``D - 1`` residual SiLU blocks,
giving ``D + 1`` linear layers in total.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from adaspec.distributions import accept_prob, sample
from adaspec.errors import DomainError, EmptyDataset
from adaspec.lm import LanguageModel
from adaspec.policies import FEATURE_NAMES, N_FEATURES, candidate_features

SCHEMA_VERSION = 1
LOGIT_CLAMP = 30.0


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _silu_grad(a, s):
    return s * (1.0 + a * (1.0 - s))


# -- data -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainingExample:
    features: np.ndarray
    label: float
    include_in_loss: bool


@dataclass
class ExampleSet:
    """Column-oriented training examples: features ``(n, F)``, soft labels, loss mask."""

    features: np.ndarray
    labels: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, N_FEATURES)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)

    def __len__(self):
        return len(self.labels)

    def __iter__(self) -> Iterator[TrainingExample]:
        for f, y, m in zip(self.features, self.labels, self.mask):
            yield TrainingExample(f, float(y), bool(m))

    @classmethod
    def from_examples(cls, examples: Sequence[TrainingExample]) -> "ExampleSet":
        if isinstance(examples, ExampleSet):
            return examples
        examples = list(examples)
        if not examples:
            return cls(np.zeros((0, N_FEATURES)), np.zeros(0), np.zeros(0, bool))
        return cls(
            np.stack([e.features for e in examples]),
            np.array([e.label for e in examples]),
            np.array([e.include_in_loss for e in examples]),
        )

    def masked(self) -> "ExampleSet":
        m = self.mask
        return ExampleSet(self.features[m], self.labels[m], np.ones(int(m.sum()), bool))

    def concat(self, other: "ExampleSet") -> "ExampleSet":
        return ExampleSet(
            np.concatenate([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.mask, other.mask]),
        )

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for f, y, m in zip(self.features, self.labels, self.mask):
                fh.write(json.dumps({"features": f.tolist(), "label": float(y), "mask": bool(m)}))
                fh.write("\n")

    @classmethod
    def load_jsonl(cls, path) -> "ExampleSet":
        feats, labels, mask = [], [], []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                feats.append(row["features"])
                labels.append(row["label"])
                mask.append(row["mask"])
        return cls(np.array(feats).reshape(-1, N_FEATURES), np.array(labels), np.array(mask, bool))


def gen_dataset(
    target: LanguageModel,
    draft: LanguageModel,
    prompts: Sequence[Sequence[int]],
    r_percent: float,
    rng: np.random.Generator,
    max_len: int = 64,
    k_cap: int = 20,
    label_prefix: str = "x",
) -> ExampleSet:
    """Build token-mixed training examples.

    For each prompt a response ``X`` is sampled from the target. At each
    position a draft token ``Y_i`` is sampled and labelled with its
    acceptance probability along the ``X`` prefix. The mixed sequence ``Z``
    takes ``X_i`` with probability ``r_percent / 100`` and ``Y_i``
    otherwise; features of ``Y_i`` are computed on the ``Z`` prefix and only
    ``Y``-sourced positions carry loss.

    The position feature counts the run of consecutive ``Y``-sourced tokens
    ending at ``i``, mirroring a speculation round that restarts after every
    target-produced token. ``label_prefix="z"`` samples and labels ``Y_i``
    on the ``Z`` prefix instead (ablation).
    """
    if not 0.0 <= r_percent <= 100.0:
        raise DomainError("r_percent must lie in [0, 100]")
    if label_prefix not in ("x", "z"):
        raise DomainError("label_prefix must be 'x' or 'z'")
    eos = target.vocab.eos
    take_x = r_percent / 100.0
    feats: List[np.ndarray] = []
    labels: List[float] = []
    mask: List[bool] = []
    for prompt in prompts:
        prompt = tuple(prompt)
        xs: List[int] = []
        ctx = list(prompt)
        while len(ctx) < max_len:
            t = sample(target.next_dist(ctx), rng)
            xs.append(t)
            ctx.append(t)
            if t == eos:
                break
        z_ctx = list(prompt)
        run, cumprod = 0, 1.0
        for i, x in enumerate(xs):
            x_ctx = prompt + tuple(xs[:i])
            q_z = draft.next_dist(z_ctx)
            if label_prefix == "x":
                q_lab, p_lab = draft.next_dist(x_ctx), target.next_dist(x_ctx)
            else:
                q_lab, p_lab = q_z, target.next_dist(z_ctx)
            y = sample(q_lab, rng)
            label = accept_prob(p_lab, q_lab, y)
            from_x = rng.random() < take_x
            if q_z[y] <= 0:
                # y unreachable under the Z-prefix draft; cannot serve as a feature
                from_x = True
            position = min(run + 1, k_cap)
            f = candidate_features(q_z, y, position, k_cap, cumprod)
            feats.append(f)
            labels.append(label)
            mask.append(not from_x)
            if from_x:
                z_ctx.append(x)
                run, cumprod = 0, 1.0
            else:
                z_ctx.append(y)
                run, cumprod = run + 1, f[5]
    return ExampleSet(np.array(feats).reshape(-1, N_FEATURES), np.array(labels), np.array(mask, bool))


# -- model ----------------------------------------------------------------


@dataclass
class PredictorHead:
    depth: int
    width: int
    params: Dict[str, np.ndarray]
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    feature_scale: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))
    info: dict = field(default_factory=dict)

    @classmethod
    def init(cls, depth: int, width: int, rng: np.random.Generator) -> "PredictorHead":
        if depth < 0:
            raise DomainError("depth must be >= 0")
        if depth == 0:
            params = {"w_out": rng.normal(0, 0.1, N_FEATURES), "b_out": np.zeros(1)}
        else:
            params = {
                "W_in": rng.normal(0, 1 / math.sqrt(N_FEATURES), (width, N_FEATURES)),
                "b_in": np.zeros(width),
            }
            for l in range(1, depth):
                params[f"W_{l}"] = rng.normal(0, 0.5 / math.sqrt(width), (width, width))
                params[f"b_{l}"] = np.zeros(width)
            params["w_out"] = rng.normal(0, 0.1 / math.sqrt(width), width)
            params["b_out"] = np.zeros(1)
        return cls(depth, width, params)

    @classmethod
    def zeros(cls, depth: int, width: int = 32) -> "PredictorHead":
        head = cls.init(depth, width, np.random.default_rng(0))
        head.params = {k: np.zeros_like(v) for k, v in head.params.items()}
        return head

    # forward / backward ---------------------------------------------------

    def _forward(self, x):
        x = (np.atleast_2d(np.asarray(x, dtype=np.float64)) - self.feature_mean) / self.feature_scale
        P = self.params
        cache = {"x": x, "blocks": []}
        if self.depth == 0:
            h = x
        else:
            a = x @ P["W_in"].T + P["b_in"]
            s = sigmoid(a)
            h = a * s
            cache["in"] = (a, s)
            for l in range(1, self.depth):
                a = h @ P[f"W_{l}"].T + P[f"b_{l}"]
                s = sigmoid(a)
                cache["blocks"].append((h, a, s))
                h = h + a * s
        z = h @ P["w_out"] + P["b_out"][0]
        cache["h"] = h
        cache["z_raw"] = z
        return np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP), cache

    def logits(self, x) -> np.ndarray:
        return self._forward(x)[0]

    def predict(self, x):
        """Predicted acceptance probability in the open interval (0, 1)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != N_FEATURES:
            raise DomainError(f"expected {N_FEATURES} features, got {x.shape[-1]}")
        out = sigmoid(self.logits(x))
        return float(out[0]) if x.ndim == 1 else out

    def loss_and_grad(self, data: ExampleSet, w_acc: float = 1.0, w_rej: float = 1.0):
        """Mean weighted BCE over loss-masked examples and its parameter gradient."""
        data = data.masked()
        n = len(data)
        if n == 0:
            raise EmptyDataset("no examples carry loss")
        z, cache = self._forward(data.features)
        P_ = data.labels
        loss = float(np.mean(w_acc * P_ * _softplus(-z) + w_rej * (1 - P_) * _softplus(z)))
        s = sigmoid(z)
        dz = (w_acc * P_ * (s - 1.0) + w_rej * (1 - P_) * s) / n
        dz = dz * (np.abs(cache["z_raw"]) < LOGIT_CLAMP)
        grads = {}
        P = self.params
        h = cache["h"]
        grads["w_out"] = h.T @ dz
        grads["b_out"] = np.array([dz.sum()])
        if self.depth == 0:
            return loss, grads
        dh = np.outer(dz, P["w_out"])
        for l in range(self.depth - 1, 0, -1):
            h_in, a, s = cache["blocks"][l - 1]
            da = dh * _silu_grad(a, s)
            grads[f"W_{l}"] = da.T @ h_in
            grads[f"b_{l}"] = da.sum(axis=0)
            dh = dh + da @ P[f"W_{l}"]
        a, s = cache["in"]
        da = dh * _silu_grad(a, s)
        grads["W_in"] = da.T @ cache["x"]
        grads["b_in"] = da.sum(axis=0)
        return loss, grads

    # io -------------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "features": list(FEATURE_NAMES),
            "depth": self.depth,
            "width": self.width,
            "feature_mean": self.feature_mean.tolist(),
            "feature_scale": self.feature_scale.tolist(),
            "weights": {k: v.tolist() for k, v in self.params.items()},
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, d) -> "PredictorHead":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DomainError(f"unsupported head schema {d.get('schema_version')}")
        return cls(
            depth=int(d["depth"]),
            width=int(d["width"]),
            params={k: np.array(v, dtype=np.float64) for k, v in d["weights"].items()},
            feature_mean=np.array(d["feature_mean"]),
            feature_scale=np.array(d["feature_scale"]),
            info=d.get("info", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


def load_head(path) -> PredictorHead:
    return PredictorHead.from_dict(json.loads(Path(path).read_text()))


def predict(head: PredictorHead, features):
    return head.predict(features)


def weighted_bce(labels, probs, w_acc: float = 1.0, w_rej: float = 1.0) -> np.ndarray:
    """Per-example loss ``-w_acc P log(phat) - w_rej (1 - P) log(1 - phat)``."""
    labels = np.asarray(labels, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    return -(w_acc * labels * np.log(probs) + w_rej * (1 - labels) * np.log1p(-probs))


def binary_kl(p, q) -> np.ndarray:
    """Elementwise ``KL(Bern(p) || Bern(q))`` with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(p > 0, p * np.log(p / q), 0.0)
        b = np.where(p < 1, (1 - p) * np.log((1 - p) / (1 - q)), 0.0)
    return a + b


def eval_binary_kl(head: PredictorHead, examples) -> float:
    data = ExampleSet.from_examples(examples).masked()
    if len(data) == 0:
        raise EmptyDataset("no examples carry loss")
    return float(np.mean(binary_kl(data.labels, head.predict(data.features))))


def train_head(
    examples,
    w_acc: float = 1.0,
    w_rej: float = 1.0,
    depth: int = 3,
    width: int = 32,
    epochs: int = 3,
    step_size: float = 5e-3,
    rng: Optional[np.random.Generator] = None,
    batch_size: int = 256,
    holdout: float = 0.1,
) -> PredictorHead:
    """Mini-batch gradient descent on the weighted BCE with a cosine-decayed step.

    Features are standardized with statistics of the training split, stored
    in the head. Losses and binary KL on the train and held-out splits are
    recorded in ``head.info``.
    """
    if w_acc <= 0 or w_rej <= 0:
        raise DomainError("loss weights must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    data = ExampleSet.from_examples(examples).masked()
    n = len(data)
    if n == 0:
        raise EmptyDataset("no examples carry loss")
    perm = rng.permutation(n)
    n_hold = int(round(holdout * n)) if n >= 10 else 0
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    train = ExampleSet(data.features[train_idx], data.labels[train_idx], np.ones(len(train_idx), bool))
    held = ExampleSet(data.features[hold_idx], data.labels[hold_idx], np.ones(len(hold_idx), bool))

    head = PredictorHead.init(depth, width, rng)
    head.feature_mean = train.features.mean(axis=0)
    scale = train.features.std(axis=0)
    head.feature_scale = np.where(scale > 1e-12, scale, 1.0)

    n_train = len(train)
    steps_per_epoch = max(1, math.ceil(n_train / batch_size))
    total = epochs * steps_per_epoch
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n_train)
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            batch = ExampleSet(train.features[idx], train.labels[idx], np.ones(len(idx), bool))
            _, grads = head.loss_and_grad(batch, w_acc, w_rej)
            lr = step_size * 0.5 * (1.0 + math.cos(math.pi * step / total))
            for k, g in grads.items():
                head.params[k] -= lr * g
            step += 1

    info = {
        "w_acc": w_acc,
        "w_rej": w_rej,
        "epochs": epochs,
        "step_size": step_size,
        "batch_size": batch_size,
        "n_train": n_train,
        "n_heldout": len(held),
        "train_loss": head.loss_and_grad(train, w_acc, w_rej)[0],
        "train_kl": eval_binary_kl(head, train),
    }
    if len(held):
        info["heldout_loss"] = head.loss_and_grad(held, w_acc, w_rej)[0]
        info["eval_kl"] = eval_binary_kl(head, held)
    head.info = info
    return head
