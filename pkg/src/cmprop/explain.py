"""Shapley-value attributions with an interventional (background-averaged) value function."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EXACT_LIMIT = 15
BACKGROUND_CAP = 200
_EVAL_ROWS = 200_000

Model = Callable[[np.ndarray], np.ndarray]


class TooManyFeatures(ValueError):
    pass


@dataclass
class ShapleyAttribution:
    phi: np.ndarray
    base_value: float
    prediction: float
    method: str
    features: np.ndarray
    n_permutations: int | None = None
    stderr: np.ndarray | None = None

    @property
    def total(self) -> float:
        return float(self.phi.sum() + self.base_value)


def make_background(X, cap: int = BACKGROUND_CAP, seed: int = 0) -> np.ndarray:
    """Up to ``cap`` rows of ``X`` drawn without replacement (all rows if fewer)."""
    X = np.asarray(X.toarray() if hasattr(X, "toarray") else X, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("background set is empty")
    if X.shape[0] <= cap:
        return X.copy()
    idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], cap, replace=False))
    return X[idx]


def _prepare(x, background, feature_subset):
    x = np.asarray(x, dtype=float).ravel()
    bg = np.asarray(background, dtype=float)
    if bg.ndim != 2 or bg.shape[0] == 0:
        raise ValueError("background must be a non-empty 2-D array")
    if bg.shape[1] != x.shape[0]:
        raise ValueError(f"background has {bg.shape[1]} columns, x has {x.shape[0]}")
    feats = np.arange(x.shape[0]) if feature_subset is None else np.asarray(feature_subset, dtype=int)
    # features outside the subset are held at x's values in every coalition
    base = bg.copy()
    others = np.setdiff1d(np.arange(x.shape[0]), feats)
    base[:, others] = x[others]
    return x, base, feats


def _coalition_values(model: Model, x, base, feats, masks: np.ndarray) -> np.ndarray:
    """Mean model output over background rows for each boolean coalition mask."""
    n_bg = base.shape[0]
    out = np.empty(len(masks))
    per_batch = max(1, _EVAL_ROWS // n_bg)
    for lo in range(0, len(masks), per_batch):
        chunk = masks[lo:lo + per_batch]
        Z = np.repeat(base[None, :, :], len(chunk), axis=0)
        for c, mask in enumerate(chunk):
            cols = feats[mask]
            Z[c][:, cols] = x[cols]
        preds = np.asarray(model(Z.reshape(-1, base.shape[1])), dtype=float).ravel()
        out[lo:lo + len(chunk)] = preds.reshape(len(chunk), n_bg).mean(axis=1)
    return out


def shapley_exact(model: Model, x, background, feature_subset: Sequence[int] | None = None
                  ) -> ShapleyAttribution:
    """Exact Shapley values by enumerating every coalition of the attributed features."""
    x, base, feats = _prepare(x, background, feature_subset)
    n = len(feats)
    if n > EXACT_LIMIT:
        raise TooManyFeatures(
            f"{n} features exceed the exact limit of {EXACT_LIMIT}; use shapley_sampled"
        )
    codes = np.arange(2 ** n)
    masks = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
    values = _coalition_values(model, x, base, feats, masks)
    sizes = masks.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
                       if s < n else 0.0 for s in range(n + 1)])
    phi = np.zeros(n)
    for i in range(n):
        without = codes[~masks[:, i]]
        phi[i] = np.sum(weight[sizes[without]] * (values[without | (1 << i)] - values[without]))
    return ShapleyAttribution(phi, float(values[0]), float(values[-1]), "exact", feats)


def shapley_sampled(model: Model, x, background, n_permutations: int = 2048, seed: int = 0,
                    feature_subset: Sequence[int] | None = None) -> ShapleyAttribution:
    """Monte-Carlo Shapley values over uniformly random feature orderings.

    Each ordering telescopes from the empty coalition to the full one, so
    every single ordering already satisfies efficiency.
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    x, base, feats = _prepare(x, background, feature_subset)
    n = len(feats)
    rng = np.random.default_rng(seed)
    perms = np.array([rng.permutation(n) for _ in range(n_permutations)])
    masks = np.zeros((n_permutations, n + 1, n), dtype=bool)
    for step in range(1, n + 1):
        masks[:, step] = masks[:, step - 1]
        masks[np.arange(n_permutations), step, perms[:, step - 1]] = True
    values = _coalition_values(model, x, base, feats, masks.reshape(-1, n)).reshape(n_permutations, n + 1)
    contrib = np.zeros((n_permutations, n))
    gains = np.diff(values, axis=1)
    np.put_along_axis(contrib, perms, gains, axis=1)
    phi = contrib.mean(axis=0)
    stderr = contrib.std(axis=0, ddof=1) / math.sqrt(n_permutations) if n_permutations > 1 \
        else np.full(n, np.nan)
    return ShapleyAttribution(phi, float(values[0, 0]), float(values[0, -1]), "sampled", feats,
                              n_permutations, stderr)


def explain_rows(model: Model, X, background, n_permutations: int = 2048, seed: int = 0,
                 method: str = "auto") -> list[ShapleyAttribution]:
    """Attribute every row of ``X``; exact when the feature count allows it."""
    X = np.asarray(X.toarray() if hasattr(X, "toarray") else X, dtype=float)
    if method == "auto":
        method = "exact" if X.shape[1] <= EXACT_LIMIT else "sampled"
    out = []
    for i, row in enumerate(X):
        if method == "exact":
            out.append(shapley_exact(model, row, background))
        else:
            sub_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
            out.append(shapley_sampled(model, row, background, n_permutations, sub_seed))
    return out


@dataclass
class ShapSummary:
    ranking: list[dict]
    beeswarm: list[dict] = field(repr=False)

    def ranking_csv(self) -> str:
        lines = ["rank,feature_label,mean_abs_phi,sign_consistency,mean_phi,normalized_mean_abs_phi"]
        for r in self.ranking:
            lines.append(f"{r['rank']},{r['feature_label']},{r['mean_abs_phi']!r},"
                         f"{r['sign_consistency']!r},{r['mean_phi']!r},{r['normalized']!r}")
        return "\n".join(lines) + "\n"

    def beeswarm_csv(self) -> str:
        lines = ["sample_id,feature_label,feature_value,phi"]
        for b in self.beeswarm:
            lines.append(f"{b['sample_id']},{b['feature_label']},{b['feature_value']!r},{b['phi']!r}")
        return "\n".join(lines) + "\n"


def summarize(attributions: Sequence[ShapleyAttribution], X_raw, labels: Sequence[str] | None = None,
              top_k: int = 20, sample_ids: Sequence[str] | None = None) -> ShapSummary:
    """Rank features by mean |phi| and emit beeswarm rows for the top ``top_k``.

    ``X_raw`` holds the unscaled feature values of the explained samples.
    Sign consistency is the fraction of samples where phi and the
    sample-centered feature value have the same sign.
    """
    if not attributions:
        raise ValueError("no attributions to summarize")
    phi = np.vstack([a.phi for a in attributions])
    X = np.asarray(X_raw.toarray() if hasattr(X_raw, "toarray") else X_raw, dtype=float)
    feats = attributions[0].features
    X = X[:, feats] if X.shape[1] != phi.shape[1] else X
    labels = list(labels) if labels is not None else [str(j) for j in feats]
    ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(len(phi))]

    mean_abs = np.abs(phi).mean(axis=0)
    order = np.argsort(-mean_abs, kind="stable")[:max(0, top_k)]
    centered = X - X.mean(axis=0)
    agree = (np.sign(phi) == np.sign(centered)).mean(axis=0)
    span = mean_abs.max() - mean_abs.min()
    normalized = (mean_abs - mean_abs.min()) / span if span > 0 else np.zeros_like(mean_abs)

    ranking = [
        {"rank": r, "feature": int(j), "feature_label": labels[j],
         "mean_abs_phi": float(mean_abs[j]), "sign_consistency": float(agree[j]),
         "mean_phi": float(phi[:, j].mean()), "normalized": float(normalized[j])}
        for r, j in enumerate(order, start=1)
    ]
    beeswarm = [
        {"sample_id": ids[i], "feature_label": labels[j],
         "feature_value": float(X[i, j]), "phi": float(phi[i, j])}
        for j in order for i in range(len(phi))
    ]
    return ShapSummary(ranking, beeswarm)
