"""Dataset windowing, quantile-loss training, and accuracy metrics.

Training minimizes the multi-step quantile (pinball) loss, averaged over
steps and levels, summed over target dimensions, and averaged over the
batch. The optimizer is Adam with decoupled weight decay and a step-decay
learning-rate schedule; the best-validation parameters are retained.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .forecaster import Forecaster, Normalization, TimeSeriesWindow

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MAPE_DENOMINATOR_EPS = 1e-3


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.002
    lr_step_size: int = 10
    lr_decay: float = 0.95
    epochs: int = 200
    batch_size: int = 64
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        # zero is allowed as a degenerate no-op step
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def window_series(targets, covariates, w: int, N: int) -> list:
    """Stride-1 moving windows over an aligned series.

    ``targets[t]`` is the sample produced by ``covariates[t]``, so window
    l pairs past covariates ``[l, l+w)`` with past targets over the same
    rows, and future covariates ``[l+w, l+w+N)`` with the future targets.
    Returns T - w - N + 1 windows.
    """
    targets = np.asarray(targets, dtype=float)
    covariates = np.asarray(covariates, dtype=float)
    if targets.ndim != 2 or covariates.ndim != 2:
        raise ValueError("targets and covariates must be 2-D (T, features)")
    t_len = targets.shape[0]
    if covariates.shape[0] != t_len:
        raise ValueError("targets and covariates must have equal length")
    if t_len < w + N:
        raise ValueError(f"series length {t_len} < window + horizon = {w + N}")
    windows = []
    for l in range(t_len - w - N + 1):
        windows.append(TimeSeriesWindow(
            past_targets=targets[l:l + w],
            past_covariates=covariates[l:l + w],
            future_covariates=covariates[l + w:l + w + N],
            future_targets=targets[l + w:l + w + N],
        ))
    return windows


@dataclass
class Dataset:
    """Windowed series packed into batch-friendly arrays.

    Split index sets are disjoint and cover all windows; the split is an
    8:1:1 shuffle over window indices by default.
    """

    past_targets: np.ndarray       # (n, w, D)
    past_covariates: np.ndarray    # (n, w, m)
    future_covariates: np.ndarray  # (n, N, m)
    future_targets: np.ndarray     # (n, N, D)
    train_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    val_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    test_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @classmethod
    def from_series(cls, targets, covariates, w, N, rng,
                    ratios=(8, 1, 1)) -> "Dataset":
        targets = np.asarray(targets, dtype=float)
        covariates = np.asarray(covariates, dtype=float)
        if targets.shape[0] < w + N:
            raise ValueError(
                f"series length {targets.shape[0]} < window + horizon = {w + N}")
        n = targets.shape[0] - w - N + 1
        pt = np.lib.stride_tricks.sliding_window_view(
            targets[:n + w - 1], w, axis=0).transpose(0, 2, 1)
        ft = np.lib.stride_tricks.sliding_window_view(
            targets[w:], N, axis=0).transpose(0, 2, 1)
        pc = np.lib.stride_tricks.sliding_window_view(
            covariates[:n + w - 1], w, axis=0).transpose(0, 2, 1)
        fcv = np.lib.stride_tricks.sliding_window_view(
            covariates[w:], N, axis=0).transpose(0, 2, 1)
        perm = rng.permutation(n)
        total = sum(ratios)
        n_train = n * ratios[0] // total
        n_val = n * ratios[1] // total
        return cls(
            past_targets=np.ascontiguousarray(pt[:n]),
            past_covariates=np.ascontiguousarray(pc[:n]),
            future_covariates=np.ascontiguousarray(fcv[:n]),
            future_targets=np.ascontiguousarray(ft[:n]),
            train_idx=np.sort(perm[:n_train]),
            val_idx=np.sort(perm[n_train:n_train + n_val]),
            test_idx=np.sort(perm[n_train + n_val:]),
        )

    @property
    def n_windows(self) -> int:
        return self.past_targets.shape[0]

    def window(self, i: int) -> TimeSeriesWindow:
        return TimeSeriesWindow(
            past_targets=self.past_targets[i],
            past_covariates=self.past_covariates[i],
            future_covariates=self.future_covariates[i],
            future_targets=self.future_targets[i],
        )

    def arrays(self, idx):
        return (self.past_targets[idx], self.past_covariates[idx],
                self.future_covariates[idx], self.future_targets[idx])


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------

def quantile_loss_single(q: float, y: float, y_hat: float) -> float:
    """Pinball loss for one level and one value."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must be in (0,1), got {q}")
    if y >= y_hat:
        return q * (y - y_hat)
    return (1.0 - q) * (y_hat - y)


def quantile_loss_total(levels, forecasts, labels) -> float:
    """Multi-step loss: mean over steps and levels, summed over targets.

    ``forecasts`` is (N, D, l) ordered by ``levels``; ``labels`` is (N, D).
    """
    forecasts = np.asarray(forecasts, dtype=float)
    labels = np.asarray(labels, dtype=float)
    n, d, l = forecasts.shape
    if labels.shape != (n, d) or l != len(levels):
        raise ValueError(
            f"inconsistent shapes: forecasts {forecasts.shape}, "
            f"labels {labels.shape}, {len(levels)} levels")
    q = np.asarray(levels)[None, None, :]
    diff = labels[:, :, None] - forecasts
    pin = np.where(diff >= 0, q * diff, (q - 1.0) * diff)
    return float(pin.sum() / (n * l))


def _batch_loss_graph(levels, raw_outputs, labels_norm_flat):
    """Taped batch loss matching quantile_loss_total semantics.

    raw_outputs: unsorted level tensors, each (B, N*D), normalized.
    labels_norm_flat: (B, N*D) numpy array, normalized.
    """
    y = Tensor(labels_norm_flat)
    total = None
    for q, out in zip(levels, raw_outputs):
        diff = ad.sub(y, out)
        term = ad.add(ad.mul(q, ad.relu(diff)),
                      ad.mul(1.0 - q, ad.relu(ad.neg(diff))))
        s = ad.tensor_sum(term)
        total = s if total is None else ad.add(total, s)
    return total


@dataclass
class TrainResult:
    train_loss: list
    val_loss: list
    best_epoch: int
    best_val: float


def _validation_loss(model: Forecaster, dataset: Dataset, idx,
                     chunk: int = 1024) -> float:
    c = model.config
    norm = model.normalization
    total = 0.0
    count = 0
    for start in range(0, idx.size, chunk):
        sel = idx[start:start + chunk]
        pt, pc, fcv, ft = dataset.arrays(sel)
        outs = model.forward_levels(pt, pc, fcv)
        labels = norm.normalize_targets(ft).reshape(sel.size, -1)
        q = np.asarray(c.quantile_levels)[None, None, :]
        pred = np.stack([o.data for o in outs], axis=-1)
        diff = labels[:, :, None] - pred
        pin = np.where(diff >= 0, q * diff, (q - 1.0) * diff)
        total += pin.sum()
        count += sel.size
    return float(total / (c.horizon_N * c.n_levels * count))


def train(model: Forecaster, dataset: Dataset, config: TrainConfig
          ) -> TrainResult:
    """Fit the forecaster in place; returns per-epoch loss curves.

    Normalization statistics are computed from the training split before
    the first step and stored on the model. Raises TrainingDiverged if
    any batch or validation loss becomes non-finite.
    """
    if dataset.train_idx.size == 0:
        raise ValueError("empty training split")
    c = model.config
    rng = np.random.default_rng(config.seed)

    train_pt = dataset.past_targets[dataset.train_idx]
    train_ft = dataset.future_targets[dataset.train_idx]
    model.normalization = Normalization.from_data(
        np.concatenate([train_pt.reshape(-1, c.n_targets),
                        train_ft.reshape(-1, c.n_targets)]),
        dataset.past_covariates[dataset.train_idx].reshape(-1, c.n_covariates))

    names = sorted(model.params)
    adam_m = {k: np.zeros_like(model.params[k]) for k in names}
    adam_v = {k: np.zeros_like(model.params[k]) for k in names}
    step = 0
    levels = c.quantile_levels

    history_train, history_val = [], []
    best_val = np.inf
    best_epoch = -1
    best_params = model.copy_params()

    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_decay ** (epoch // config.lr_step_size)
        order = dataset.train_idx
        if config.shuffle:
            order = order[rng.permutation(order.size)]
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, order.size, config.batch_size):
            sel = order[start:start + config.batch_size]
            pt, pc, fcv, ft = dataset.arrays(sel)
            labels = model.normalization.normalize_targets(ft).reshape(sel.size, -1)

            tape = Tape()
            leaves = {k: tape.leaf(model.params[k]) for k in names}
            outs = model.forward_levels(pt, pc, fcv, params=leaves,
                                        training=True, rng=rng)
            total = _batch_loss_graph(levels, outs, labels)
            scale = 1.0 / (c.horizon_N * c.n_levels * sel.size)
            loss = ad.mul(scale, total)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite training loss {loss_val} at epoch {epoch}, "
                    f"batch {n_batches}")
            grads = tape.backward(loss)

            step += 1
            bc1 = 1.0 - ADAM_BETA1 ** step
            bc2 = 1.0 - ADAM_BETA2 ** step
            for k in names:
                g = grads.wrt(leaves[k])
                m = adam_m[k]
                v = adam_v[k]
                m *= ADAM_BETA1
                m += (1.0 - ADAM_BETA1) * g
                v *= ADAM_BETA2
                v += (1.0 - ADAM_BETA2) * g * g
                update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
                model.params[k] = model.params[k] - lr * update \
                    - lr * config.weight_decay * model.params[k]
            epoch_loss += loss_val
            n_batches += 1

        history_train.append(epoch_loss / max(n_batches, 1))
        if dataset.val_idx.size:
            val = _validation_loss(model, dataset, dataset.val_idx)
        else:
            val = history_train[-1]
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        history_val.append(val)
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = model.copy_params()

    model.params = best_params
    return TrainResult(history_train, history_val, best_epoch, float(best_val))


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------

def metrics(model: Forecaster, dataset: Dataset, idx, chunk: int = 512) -> dict:
    """Median-forecast MAPE and RRMSE per target dimension (fractions).

    MAPE skips samples whose true magnitude is below 1e-3; RRMSE is the
    residual RMS over the target RMS.
    """
    idx = np.asarray(idx)
    if idx.size == 0:
        raise ValueError("empty evaluation split")
    c = model.config
    d = c.n_targets
    abs_err_sum = np.zeros(d)
    ape_sum = np.zeros(d)
    ape_count = np.zeros(d)
    sq_err_sum = np.zeros(d)
    sq_true_sum = np.zeros(d)
    for start in range(0, idx.size, chunk):
        sel = idx[start:start + chunk]
        pt, pc, fcv, ft = dataset.arrays(sel)
        pred = model.predict(pt, pc, fcv)[:, :, :, c.median_index]
        err = ft - pred
        mask = np.abs(ft) >= MAPE_DENOMINATOR_EPS
        for j in range(d):
            mj = mask[:, :, j]
            ape_sum[j] += (np.abs(err[:, :, j][mj]) / np.abs(ft[:, :, j][mj])).sum()
            ape_count[j] += mj.sum()
            sq_err_sum[j] += (err[:, :, j] ** 2).sum()
            sq_true_sum[j] += (ft[:, :, j] ** 2).sum()
            abs_err_sum[j] += np.abs(err[:, :, j]).sum()
    mape = ape_sum / np.maximum(ape_count, 1)
    rrmse = np.sqrt(sq_err_sum) / np.sqrt(sq_true_sum)
    return {"mape": mape, "rrmse": rrmse}


def coverage(model: Forecaster, dataset: Dataset, idx,
             lo: float = 0.05, hi: float = 0.95, chunk: int = 512) -> float:
    """Fraction of held-out targets inside the [lo, hi] quantile band."""
    idx = np.asarray(idx)
    if idx.size == 0:
        raise ValueError("empty evaluation split")
    c = model.config
    ilo = c.quantile_levels.index(lo)
    ihi = c.quantile_levels.index(hi)
    inside = 0
    total = 0
    for start in range(0, idx.size, chunk):
        sel = idx[start:start + chunk]
        pt, pc, fcv, ft = dataset.arrays(sel)
        pred = model.predict(pt, pc, fcv)
        band_lo = pred[:, :, :, ilo]
        band_hi = pred[:, :, :, ihi]
        inside += np.count_nonzero((ft >= band_lo) & (ft <= band_hi))
        total += ft.size
    return inside / total


# ----------------------------------------------------------------------
# csv io
# ----------------------------------------------------------------------

def write_dataset_csv(path, targets, covariates) -> None:
    """Dataset CSV: time, u, [d2..], x1, x2, ...

    Row t pairs the applied input with the state it produced.
    """
    targets = np.asarray(targets)
    covariates = np.asarray(covariates)
    d = targets.shape[1]
    m = covariates.shape[1]
    header = ["time", "u"] + [f"d{j+1}" for j in range(1, m)] \
        + [f"x{j+1}" for j in range(d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(targets.shape[0]):
            writer.writerow([t] + [repr(float(v)) for v in covariates[t]]
                            + [repr(float(v)) for v in targets[t]])


def read_dataset_csv(path):
    """Inverse of write_dataset_csv; returns (targets, covariates)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cov_cols = [i for i, name in enumerate(header)
                if name == "u" or name.startswith("d")]
    tgt_cols = [i for i, name in enumerate(header) if name.startswith("x")]
    if not cov_cols or not tgt_cols:
        raise ValueError(f"unrecognized dataset header: {header}")
    covariates = np.array([[float(r[i]) for i in cov_cols] for r in body])
    targets = np.array([[float(r[i]) for i in tgt_cols] for r in body])
    return targets, covariates


def write_loss_curves(path, result: TrainResult) -> None:
    """Loss-curve CSV: epoch, train_loss, val_loss."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for e, (tr, va) in enumerate(zip(result.train_loss, result.val_loss)):
            writer.writerow([e, repr(tr), repr(va)])
