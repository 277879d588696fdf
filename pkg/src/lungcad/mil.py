"""Attention-based multiple-instance malignancy classification.

A patient is a *bag* of candidate feature vectors (rows of H, k x F). The
head computes per-instance gated projections x_i = tanh(W1 h_i + b1), a
softmax attention distribution y over instances from a_i = w2 . x_i + b2,
pools z = sum_i y_i h_i, and outputs p = sigmoid(w3 . z + b3). Training is
plain SGD with momentum on binary cross entropy; uncertainty comes from MC
dropout over bag features and from ensembling independently trained heads.

Also here: label derivation from per-nodule radiologist scores, candidate
ranking, dual-resolution top-k bag construction, alternative instance
combiners (noisy-OR / leaky noisy-OR / log-sum-exp), and a handcrafted
feature extractor for candidate blocks.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyBagError, ValidationError
from .nnet import dropout_mask, load_params, save_params

ATTENTION_DIM = 128
SCORED_MIN_RATERS = 3
CURRICULUM_WARMUP_EPOCHS = 50
CURRICULUM_SCORED_PROB = 0.9


# ---------------------------------------------------------------------------
# Labels

def nodule_malignancy_label(scores):
    """Average 1-5 malignancy score; nodules with fewer than three raters
    count as 1.0 (treated like false positives)."""
    for s in scores:
        if not 1 <= s <= 5:
            raise ValidationError(f"malignancy score {s} outside [1, 5]")
    if len(scores) < SCORED_MIN_RATERS:
        return 1.0
    return float(np.mean(scores))


def patient_label(score_lists):
    """Patient-level label from per-nodule rater score lists.

    Only nodules with >= 3 raters qualify. Returns "malignant" if any
    qualifying average >= 4, "benign" if there are no annotations or every
    qualifying average is <= 2, else "excluded".
    """
    averages = [
        float(np.mean(s)) for s in score_lists if len(s) >= SCORED_MIN_RATERS
    ]
    for s in score_lists:
        for v in s:
            if not 1 <= v <= 5:
                raise ValidationError(f"malignancy score {v} outside [1, 5]")
    if any(a >= 4.0 for a in averages):
        return "malignant"
    if not averages or all(a <= 2.0 for a in averages):
        return "benign"
    return "excluded"


def mae_loss(pred, target):
    """Absolute error and its subgradient in pred (0 at equality)."""
    diff = pred - target
    if diff > 0:
        return float(diff), 1.0
    if diff < 0:
        return float(-diff), -1.0
    return 0.0, 0.0


def curriculum_sampler(epoch, scored_pool, unscored_pool, rng):
    """Scored-only during warm-up epochs, then 90/10 scored/unscored."""
    if not scored_pool:
        raise ValidationError("curriculum sampler needs a non-empty scored pool")
    use_scored = (
        epoch < CURRICULUM_WARMUP_EPOCHS
        or not unscored_pool
        or rng.random() < CURRICULUM_SCORED_PROB
    )
    pool = scored_pool if use_scored else unscored_pool
    return pool[rng.integers(len(pool))]


# ---------------------------------------------------------------------------
# Bags

@dataclass(frozen=True)
class Bag:
    features: np.ndarray      # (k, F)
    candidates: tuple = ()    # optional candidate refs, len k when present
    patient_id: str = ""
    label: float = None       # 0/1 when labeled, None otherwise

    def __post_init__(self):
        h = np.asarray(self.features, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] < 1:
            raise ValidationError("bag features must be a non-empty (k, F) matrix")
        if not np.isfinite(h).all():
            raise ValidationError("bag features must be finite")
        if self.candidates and len(self.candidates) != h.shape[0]:
            raise ValidationError("candidate refs do not match feature rows")
        if self.label is not None and self.label not in (0, 1, 0.0, 1.0):
            raise ValidationError(f"bag label {self.label} not in {{0, 1}}")
        object.__setattr__(self, "features", h)


def rank_candidates(cands, scorer):
    """Descending by scorer(c); ties broken by higher max_score, then raster
    order of the voxel center (x, then y, then z)."""
    def key(item):
        idx, c = item
        return (
            -scorer(c),
            -c.max_score,
            c.center_voxel[0], c.center_voxel[1], c.center_voxel[2],
            idx,
        )
    return [c for _, c in sorted(enumerate(cands), key=key)]


def select_topk_dual(ranked_1mm, ranked_2mm, k_each=2):
    """Top k_each of each resolution's ranked list, native resolution first;
    shorter lists contribute what they have."""
    if k_each < 1:
        raise ValidationError(f"k_each must be >= 1, got {k_each}")
    picked = list(ranked_1mm[:k_each]) + list(ranked_2mm[:k_each])
    if not picked:
        raise EmptyBagError("no candidates available from either resolution")
    return picked


# ---------------------------------------------------------------------------
# Attention head

@dataclass(frozen=True)
class MilParams:
    W1: np.ndarray   # (L, F)
    b1: np.ndarray   # (L,)
    w2: np.ndarray   # (L,)
    b2: float
    w3: np.ndarray   # (F,)
    b3: float

    def __post_init__(self):
        W1 = np.asarray(self.W1, dtype=np.float64)
        L, F = W1.shape
        for name, arr, shape in (
            ("b1", self.b1, (L,)), ("w2", self.w2, (L,)), ("w3", self.w3, (F,))
        ):
            if np.asarray(arr).shape != shape:
                raise ValidationError(f"{name} has shape {np.asarray(arr).shape}, expected {shape}")
        for name in ("W1", "b1", "w2", "w3"):
            if not np.isfinite(np.asarray(getattr(self, name))).all():
                raise ValidationError(f"{name} contains non-finite values")
        if not (math.isfinite(self.b2) and math.isfinite(self.b3)):
            raise ValidationError("bias terms must be finite")

    @property
    def feature_dim(self):
        return self.W1.shape[1]


def random_mil_params(rng, feature_dim=1024, attention_dim=ATTENTION_DIM):
    scale1 = 1.0 / math.sqrt(feature_dim)
    scale2 = 1.0 / math.sqrt(attention_dim)
    return MilParams(
        W1=rng.normal(0.0, scale1, size=(attention_dim, feature_dim)),
        b1=np.zeros(attention_dim),
        w2=rng.normal(0.0, scale2, size=attention_dim),
        b2=0.0,
        w3=rng.normal(0.0, scale1, size=feature_dim),
        b3=0.0,
    )


def _sigmoid(logit):
    if logit >= 0:
        return 1.0 / (1.0 + math.exp(-logit))
    e = math.exp(logit)
    return e / (1.0 + e)


def attention_forward(H, params):
    """Returns (prob, attention weights y, cache for backward)."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1:
        raise ValidationError("attention_forward expects a (k, F) matrix, k >= 1")
    if not np.isfinite(H).all():
        raise ValidationError("attention_forward input must be finite")
    if H.shape[1] != params.feature_dim:
        raise ValidationError(
            f"feature dim {H.shape[1]} does not match params ({params.feature_dim})"
        )
    u = H @ params.W1.T + params.b1          # (k, L) pre-activation
    x = np.tanh(u)                           # Eq. (1)
    a = x @ params.w2 + params.b2            # (k,) attention logits
    a_shift = a - a.max()                    # max-stabilized softmax, Eq. (2)
    e = np.exp(a_shift)
    y = e / e.sum()
    z = y @ H                                # (F,) pooled bag representation
    logit = float(z @ params.w3 + params.b3)  # Eq. (3)
    prob = _sigmoid(logit)
    cache = {"H": H, "x": x, "y": y, "z": z, "prob": prob, "params": params}
    return prob, y, cache


def attention_backward(cache, label, with_features=False):
    """Exact gradients of BCE(prob, label) for every parameter.

    Uses dL/dlogit = prob - label (the sigmoid/BCE cancellation), so no
    probability clamping is involved. Returns a dict with keys W1, b1, w2,
    b2, w3, b3 (and H when with_features).
    """
    if label not in (0, 1, 0.0, 1.0):
        raise ValidationError(f"label {label} not in {{0, 1}}")
    H, x, y, z = cache["H"], cache["x"], cache["y"], cache["z"]
    params = cache["params"]
    g = cache["prob"] - float(label)          # dL/dlogit

    grad_b3 = g
    grad_w3 = g * z
    dz = g * params.w3                        # (F,)
    dy = H @ dz                               # (k,)
    da = y * (dy - float(y @ dy))             # softmax Jacobian
    grad_b2 = float(da.sum())
    grad_w2 = da @ x                          # (L,)
    dx = np.outer(da, params.w2)              # (k, L)
    du = dx * (1.0 - x * x)                   # tanh'
    grad_W1 = du.T @ H                        # (L, F)
    grad_b1 = du.sum(axis=0)
    grads = {
        "W1": grad_W1, "b1": grad_b1, "w2": grad_w2, "b2": grad_b2,
        "w3": grad_w3, "b3": grad_b3,
    }
    if with_features:
        grads["H"] = np.outer(y, dz) + du @ params.W1
    return grads


def bce_loss(prob, label, eps=1e-12):
    p = min(max(prob, eps), 1.0 - eps)
    return -(float(label) * math.log(p) + (1.0 - float(label)) * math.log(1.0 - p))


# ---------------------------------------------------------------------------
# Alternative instance combiners

def noisy_or(p_list):
    """1 - prod(1 - p_i); monotone, commutative, absorbing at 1."""
    p = np.asarray(p_list, dtype=np.float64)
    if p.size and ((p < 0) | (p > 1)).any():
        raise ValidationError("noisy_or inputs must lie in [0, 1]")
    return float(1.0 - np.prod(1.0 - p))


def leaky_noisy_or(p_list, leak=0.01):
    """Noisy-OR with every instance probability floored at the leak."""
    if not 0.0 <= leak <= 1.0:
        raise ValidationError(f"leak {leak} outside [0, 1]")
    p = np.asarray(p_list, dtype=np.float64)
    return noisy_or(np.maximum(p, leak))


def lse_combine(p_list, r):
    """(1/r) log mean exp(r p_i), clamped to [0, 1]; soft maximum."""
    if r <= 0:
        raise ValidationError(f"lse sharpness must be positive, got {r}")
    p = np.asarray(p_list, dtype=np.float64)
    if p.size == 0:
        raise ValidationError("lse_combine needs at least one probability")
    if ((p < 0) | (p > 1)).any():
        raise ValidationError("lse_combine inputs must lie in [0, 1]")
    m = p.max()
    val = m + math.log(np.mean(np.exp(r * (p - m)))) / r
    return float(min(max(val, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Training

@dataclass(frozen=True)
class MilTrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    lr_halving_epochs: int = 50
    batch_size: int = 32
    epochs: int = 750
    attention_dim: int = ATTENTION_DIM


def learning_rate(cfg, epoch):
    return cfg.lr * 2.0 ** (-(epoch // cfg.lr_halving_epochs))


def train_mil(bags, labels, cfg=None, rng=None, init=None):
    """SGD-with-momentum training of the attention head on labeled bags.

    Returns (params, loss_trace) where loss_trace[e] is the mean training
    BCE of epoch e. Deterministic given the generator.
    """
    cfg = cfg or MilTrainConfig()
    rng = rng or np.random.default_rng(0)
    if len(bags) == 0 or len(bags) != len(labels):
        raise ValidationError("train_mil needs equally many bags and labels")
    for lab in labels:
        if lab not in (0, 1, 0.0, 1.0):
            raise ValidationError(f"label {lab} not in {{0, 1}}")
    feats = [b.features if isinstance(b, Bag) else np.asarray(b, dtype=np.float64)
             for b in bags]
    feature_dim = feats[0].shape[1]
    params = init or random_mil_params(rng, feature_dim, cfg.attention_dim)
    velocity = {k: np.zeros_like(np.asarray(getattr(params, k), dtype=np.float64))
                for k in ("W1", "b1", "w2", "b2", "w3", "b3")}

    n = len(feats)
    trace = []
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            accum = {k: np.zeros_like(v) for k, v in velocity.items()}
            for idx in batch:
                prob, _, cache = attention_forward(feats[idx], params)
                epoch_loss += bce_loss(prob, labels[idx])
                grads = attention_backward(cache, labels[idx])
                for k in accum:
                    accum[k] += grads[k]
            scale = 1.0 / len(batch)
            updated = {}
            for k in velocity:
                velocity[k] = cfg.momentum * velocity[k] - lr * scale * accum[k]
                updated[k] = np.asarray(getattr(params, k)) + velocity[k]
            params = MilParams(
                W1=updated["W1"], b1=updated["b1"], w2=updated["w2"],
                b2=float(updated["b2"]), w3=updated["w3"], b3=float(updated["b3"]),
            )
        trace.append(epoch_loss / n)
        if not math.isfinite(trace[-1]):
            raise ValidationError(f"training diverged at epoch {epoch}")
    return params, trace


def predict(params, bag):
    h = bag.features if isinstance(bag, Bag) else bag
    prob, _, _ = attention_forward(h, params)
    return prob


def mc_dropout_predict(params, bag, T, rate, rng):
    """Mean/std of T stochastic passes with dropout on the bag features."""
    if T < 1:
        raise ValidationError(f"need T >= 1 samples, got {T}")
    h = bag.features if isinstance(bag, Bag) else np.asarray(bag, dtype=np.float64)
    probs = np.empty(T)
    for t in range(T):
        mask = dropout_mask(rng, rate, h.shape[1])
        probs[t] = predict(params, h * mask)
    return float(probs.mean()), float(probs.std())


def ensemble_predict(models, bag):
    """Arithmetic mean of deterministic per-model probabilities."""
    if not models:
        raise ValidationError("ensemble needs at least one model")
    return float(np.mean([predict(m, bag) for m in models]))


# ---------------------------------------------------------------------------
# Persistence (nnet parameter blob format)

def save_mil_params(params, path):
    save_params(
        {
            "W1": params.W1, "b1": params.b1, "w2": params.w2,
            "b2": np.array(params.b2), "w3": params.w3,
            "b3": np.array(params.b3),
        },
        path,
    )


def load_mil_params(path):
    blob = load_params(path)
    try:
        return MilParams(
            W1=blob["W1"], b1=blob["b1"], w2=blob["w2"],
            b2=float(blob["b2"]), w3=blob["w3"], b3=float(blob["b3"]),
        )
    except KeyError as exc:
        raise ValidationError(f"{path}: missing parameter {exc}") from None


# ---------------------------------------------------------------------------
# Handcrafted candidate features

def handcrafted_features(candidate, volume, shell_factor=2.0):
    """Fixed-length descriptor of a candidate from the underlying volume:
    geometry (diameter, voxel count, compactness), detector scores, and
    intensity statistics inside the candidate sphere plus contrast against
    a surrounding shell. Returns a float64 vector of length 12."""
    center = np.asarray(candidate.center_voxel, dtype=np.float64)
    spacing = np.asarray(volume.spacing, dtype=np.float64)
    shape = np.asarray(volume.shape)
    r_vox = (candidate.equivalent_diameter_mm / 2.0) / spacing
    r_out = shell_factor * r_vox

    lo = np.maximum(np.floor(center - r_out).astype(int), 0)
    hi = np.minimum(np.ceil(center + r_out).astype(int) + 1, shape)
    idx = np.meshgrid(*(np.arange(lo[d], hi[d]) for d in range(3)), indexing="ij")
    d2 = sum(((idx[d] - center[d]) / max(r_vox[d], 0.5)) ** 2 for d in range(3))
    region = volume.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    inner = region[d2 < 1.0]
    shell = region[(d2 >= 1.0) & (d2 < shell_factor**2)]
    if inner.size == 0:
        cx = tuple(np.clip(np.round(center).astype(int), 0, shape - 1))
        inner = np.array([volume.data[cx]])
    inner_mean = float(inner.mean())
    shell_mean = float(shell.mean()) if shell.size else inner_mean

    bounding_volume = float(np.prod(np.maximum(2.0 * r_vox * spacing, spacing)))
    compactness = candidate.volume_mm3 / max(bounding_volume, 1e-9)
    p25, p75 = np.percentile(inner, [25.0, 75.0])
    # intensity entries are rescaled so every feature is O(1); unnormalized
    # HU magnitudes (~1e3) destabilize gradient descent downstream
    hu = lambda v: (float(v) + 850.0) / 1000.0
    return np.array(
        [
            candidate.equivalent_diameter_mm / 30.0,
            math.log1p(candidate.voxel_count) / 10.0,
            compactness,
            candidate.mean_score,
            candidate.max_score,
            hu(inner_mean),
            float(inner.std()) / 100.0,
            hu(inner.min()),
            hu(inner.max()),
            hu(p25),
            hu(p75),
            (inner_mean - shell_mean) / 1000.0,
        ]
    )


HANDCRAFTED_DIM = 12
