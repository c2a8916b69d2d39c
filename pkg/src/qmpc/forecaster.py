"""Multi-step dense quantile forecaster.

Maps a lookback window of targets plus past and future covariates to all
horizon steps and all quantile levels in a single forward pass. The layout
is the dense-encoder family: per-step feature projection of covariates,
a residual dense encoder/decoder stack over the flattened window, and a
temporal decoder that recombines each step's decoded vector with that
step's projected future covariate. Each quantile level has its own output
head; a global linear residual from the flattened past targets feeds the
median pathway only, keeping the median an unbiased autoregressive
baseline while the heads shape the band.

Residual block: dense -> ReLU -> dense -> dropout, plus a linear skip,
optionally layer-normalized.

Inputs and targets are standardized per feature with training-set
statistics stored in the checkpoint; forecasts are returned in physical
units. Quantile crossings are repaired by sorting along the level axis at
inference (the training loss does not prevent them, and downstream
constraint handling needs ordered bounds).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

# Per-step width covariates are projected to before entering the encoder
# and temporal decoder. Small relative to the covariate count times the
# window length, which is the point of the projection.
COVARIATE_PROJECTION_DIM = 4

CHECKPOINT_MAGIC = b"QMPC"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    """Unreadable or corrupt checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written with an unsupported format version."""


@dataclass(frozen=True)
class ForecasterConfig:
    window_w: int
    horizon_N: int
    n_targets: int
    n_covariates: int
    quantile_levels: tuple = (0.05, 0.5, 0.95)
    encoder_layers: int = 1
    decoder_layers: int = 1
    hidden_size: int = 128
    decoder_hidden: int = 32
    decoder_output_dim: int = 16
    dropout: float = 0.2
    layer_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "quantile_levels", tuple(self.quantile_levels))
        q = self.quantile_levels
        if any(not 0.0 < v < 1.0 for v in q):
            raise ValueError(f"quantile levels must lie in (0,1): {q}")
        if any(a >= b for a, b in zip(q, q[1:])):
            raise ValueError(f"quantile levels must be strictly increasing: {q}")
        if 0.5 not in q:
            raise ValueError("quantile levels must include the median 0.5")
        if self.window_w < 1 or self.horizon_N < 1:
            raise ValueError("window_w and horizon_N must be >= 1")
        if self.n_targets < 1 or self.n_covariates < 1:
            raise ValueError("n_targets and n_covariates must be >= 1")
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ValueError("encoder_layers and decoder_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def n_levels(self) -> int:
        return len(self.quantile_levels)

    @property
    def median_index(self) -> int:
        return self.quantile_levels.index(0.5)


@dataclass
class TimeSeriesWindow:
    """One sample: (w, D) past targets, (w, m) past covariates, (N, m)
    future covariates and, for training, (N, D) future targets.

    past_covariates[t] is the input whose effect is past_targets[t]; the
    same pairing holds for the future arrays.
    """

    past_targets: np.ndarray
    past_covariates: np.ndarray
    future_covariates: np.ndarray
    future_targets: np.ndarray | None = None


@dataclass
class Normalization:
    target_mean: np.ndarray
    target_std: np.ndarray
    cov_mean: np.ndarray
    cov_std: np.ndarray

    @classmethod
    def identity(cls, n_targets: int, n_covariates: int) -> "Normalization":
        return cls(np.zeros(n_targets), np.ones(n_targets),
                   np.zeros(n_covariates), np.ones(n_covariates))

    @classmethod
    def from_data(cls, targets: np.ndarray, covariates: np.ndarray) -> "Normalization":
        """Per-feature statistics; constant features get unit scale."""
        def stats(x):
            mean = x.mean(axis=0)
            std = x.std(axis=0)
            std = np.where(std < 1e-12, 1.0, std)
            return mean, std

        tm, ts = stats(targets.reshape(-1, targets.shape[-1]))
        cm, cs = stats(covariates.reshape(-1, covariates.shape[-1]))
        return cls(tm, ts, cm, cs)

    def normalize_targets(self, x):
        return (x - self.target_mean) / self.target_std

    def denormalize_targets(self, x):
        return x * self.target_std + self.target_mean

    def normalize_covariates(self, x):
        return (x - self.cov_mean) / self.cov_std


@dataclass
class ForecastGraph:
    """Tape handles for differentiating a forecast w.r.t. future covariates."""

    tape: Tape
    future_covariates: Tensor     # leaf, (N, m), physical units
    level_tensors: list           # sorted levels, normalized, each (1, N*D)


@dataclass
class QuantileForecast:
    """(N, D, l) forecast in physical units, non-crossing along levels."""

    levels: tuple
    values: np.ndarray
    graph: ForecastGraph | None = None

    def level(self, q: float) -> np.ndarray:
        return self.values[:, :, self.levels.index(q)]

    @property
    def lower(self) -> np.ndarray:
        return self.values[:, :, 0]

    @property
    def upper(self) -> np.ndarray:
        return self.values[:, :, -1]

    @property
    def median(self) -> np.ndarray:
        return self.values[:, :, self.levels.index(0.5)]


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _block_param_shapes(prefix, n_in, n_hidden, n_out, layer_norm):
    shapes = {
        f"{prefix}.w1": (n_in, n_hidden),
        f"{prefix}.b1": (n_hidden,),
        f"{prefix}.w2": (n_hidden, n_out),
        f"{prefix}.b2": (n_out,),
        f"{prefix}.ws": (n_in, n_out),
        f"{prefix}.bs": (n_out,),
    }
    if layer_norm:
        shapes[f"{prefix}.gamma"] = (n_out,)
        shapes[f"{prefix}.beta"] = (n_out,)
    return shapes


class Forecaster:
    """Trained or freshly initialized forecaster with named parameters."""

    def __init__(self, config: ForecasterConfig, params: dict,
                 normalization: Normalization):
        self.config = config
        self.params = params
        self.normalization = normalization

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    @classmethod
    def build(cls, config: ForecasterConfig, seed: int) -> "Forecaster":
        rng = np.random.default_rng(seed)
        c = config
        proj = COVARIATE_PROJECTION_DIM
        enc_in = c.window_w * c.n_targets + (c.window_w + c.horizon_N) * proj
        shapes = {}
        shapes.update(_block_param_shapes(
            "proj", c.n_covariates, c.decoder_hidden, proj, c.layer_norm))
        n_in = enc_in
        for i in range(c.encoder_layers):
            shapes.update(_block_param_shapes(
                f"enc{i}", n_in, c.hidden_size, c.hidden_size, c.layer_norm))
            n_in = c.hidden_size
        for i in range(c.decoder_layers):
            last = i == c.decoder_layers - 1
            n_out = c.horizon_N * c.decoder_output_dim if last else c.hidden_size
            shapes.update(_block_param_shapes(
                f"dec{i}", n_in, c.hidden_size, n_out, c.layer_norm))
            n_in = n_out
        shapes.update(_block_param_shapes(
            "td", c.decoder_output_dim + proj, c.decoder_hidden,
            c.decoder_hidden, c.layer_norm))
        for j in range(c.n_levels):
            shapes[f"head{j}.w"] = (c.decoder_hidden, c.n_targets)
            shapes[f"head{j}.b"] = (c.n_targets,)
        shapes["skip.w"] = (c.window_w * c.n_targets, c.horizon_N * c.n_targets)

        params = {}
        for name, shape in shapes.items():
            base = name.rsplit(".", 1)[1]
            if base in ("b1", "b2", "bs", "b", "beta"):
                params[name] = np.zeros(shape)
            elif base == "gamma":
                params[name] = np.ones(shape)
            else:
                params[name] = _glorot(rng, *shape)
        return cls(config, params,
                   Normalization.identity(c.n_targets, c.n_covariates))

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    # ------------------------------------------------------------------
    # forward pass
    # ------------------------------------------------------------------

    def _block(self, x, prefix, params, training, rng):
        c = self.config
        h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]),
                           params[f"{prefix}.b1"]))
        y = ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
        if training and c.dropout > 0.0:
            y = ad.dropout(y, c.dropout, rng)
        s = ad.add(ad.matmul(x, params[f"{prefix}.ws"]), params[f"{prefix}.bs"])
        z = ad.add(y, s)
        if c.layer_norm:
            z = ad.layer_norm(z, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])
        return z

    def forward_levels(self, past_targets, past_covariates, future_covariates,
                       params=None, training=False, rng=None):
        """Raw (unsorted) level outputs, normalized units, each (B, N*D).

        past_targets (B, w, D) and past_covariates (B, w, m) are physical
        numpy arrays. future_covariates is either a physical (B, N, m)
        array or an on-tape (N, m) Tensor (then B must be 1). ``params``
        may supply on-tape parameter tensors during training.
        """
        c = self.config
        norm = self.normalization
        proj = COVARIATE_PROJECTION_DIM
        if params is None:
            params = {k: Tensor(v) for k, v in self.params.items()}
        if training and c.dropout > 0.0 and rng is None:
            raise ValueError("training forward pass needs an rng for dropout")

        pt = np.asarray(past_targets, dtype=float)
        pc = np.asarray(past_covariates, dtype=float)
        b = pt.shape[0]
        if pt.shape[1:] != (c.window_w, c.n_targets):
            raise ValueError(
                f"past targets shape {pt.shape[1:]} != "
                f"({c.window_w}, {c.n_targets})")
        if pc.shape != (b, c.window_w, c.n_covariates):
            raise ValueError(
                f"past covariates shape {pc.shape} != "
                f"({b}, {c.window_w}, {c.n_covariates})")

        pt_flat = Tensor(norm.normalize_targets(pt).reshape(b, -1))
        pc_rows = Tensor(norm.normalize_covariates(pc).reshape(-1, c.n_covariates))

        if isinstance(future_covariates, Tensor):
            if b != 1:
                raise ValueError("on-tape future covariates require batch 1")
            if future_covariates.shape != (c.horizon_N, c.n_covariates):
                raise ValueError(
                    f"future covariates shape {future_covariates.shape} != "
                    f"({c.horizon_N}, {c.n_covariates})")
            fc_rows = ad.div(ad.sub(future_covariates, norm.cov_mean),
                             norm.cov_std)
        else:
            fc = np.asarray(future_covariates, dtype=float)
            if fc.shape != (b, c.horizon_N, c.n_covariates):
                raise ValueError(
                    f"future covariates shape {fc.shape} != "
                    f"({b}, {c.horizon_N}, {c.n_covariates})")
            fc_rows = Tensor(
                norm.normalize_covariates(fc).reshape(-1, c.n_covariates))

        pc_proj = self._block(pc_rows, "proj", params, training, rng)
        fc_proj = self._block(fc_rows, "proj", params, training, rng)

        enc_in = ad.concat([
            pt_flat,
            ad.reshape(pc_proj, (b, c.window_w * proj)),
            ad.reshape(fc_proj, (b, c.horizon_N * proj)),
        ], axis=1)

        h = enc_in
        for i in range(c.encoder_layers):
            h = self._block(h, f"enc{i}", params, training, rng)
        for i in range(c.decoder_layers):
            h = self._block(h, f"dec{i}", params, training, rng)

        steps = ad.reshape(h, (b * c.horizon_N, c.decoder_output_dim))
        td_in = ad.concat([steps, fc_proj], axis=1)
        td = self._block(td_in, "td", params, training, rng)

        skip = ad.matmul(pt_flat, params["skip.w"])
        outputs = []
        for j in range(c.n_levels):
            out = ad.add(ad.matmul(td, params[f"head{j}.w"]),
                         params[f"head{j}.b"])
            out = ad.reshape(out, (b, c.horizon_N * c.n_targets))
            if j == c.median_index:
                out = ad.add(out, skip)
            outputs.append(out)
        return outputs

    @staticmethod
    def _sort_levels(levels):
        """Non-crossing repair: sort along the level axis.

        Uses an odd-even transposition network of minimum/maximum pairs so
        the repair stays differentiable when the levels live on a tape.
        """
        ts = list(levels)
        n = len(ts)
        if n == 1:
            return ts
        if all(t.tape is None for t in ts):
            data = np.sort(np.stack([t.data for t in ts], axis=-1), axis=-1)
            return [Tensor(data[..., j]) for j in range(n)]
        for p in range(n):
            for i in range(p % 2, n - 1, 2):
                lo = ad.minimum(ts[i], ts[i + 1])
                hi = ad.maximum(ts[i], ts[i + 1])
                ts[i], ts[i + 1] = lo, hi
        return ts

    def forecast_graph(self, past_targets, past_covariates,
                       future_covariates: Tensor) -> list:
        """Sorted normalized level tensors for an on-tape forward pass."""
        raw = self.forward_levels(past_targets[None], past_covariates[None],
                                  future_covariates)
        return self._sort_levels(raw)

    def forecast(self, window: TimeSeriesWindow,
                 differentiate_wrt_future_covariates: bool = False
                 ) -> QuantileForecast:
        """One-shot forecast of all steps and levels, physical units."""
        c = self.config
        if differentiate_wrt_future_covariates:
            tape = Tape()
            fc_leaf = tape.leaf(np.asarray(window.future_covariates, dtype=float))
            sorted_lvls = self.forecast_graph(
                window.past_targets, window.past_covariates, fc_leaf)
            graph = ForecastGraph(tape, fc_leaf, sorted_lvls)
        else:
            raw = self.forward_levels(window.past_targets[None],
                                      window.past_covariates[None],
                                      np.asarray(window.future_covariates)[None])
            sorted_lvls = self._sort_levels(raw)
            graph = None
        stacked = np.stack(
            [t.data.reshape(c.horizon_N, c.n_targets) for t in sorted_lvls],
            axis=-1)
        values = stacked * self.normalization.target_std[None, :, None] \
            + self.normalization.target_mean[None, :, None]
        return QuantileForecast(c.quantile_levels, values, graph)

    def predict(self, past_targets, past_covariates, future_covariates
                ) -> np.ndarray:
        """Batched forecast values (B, N, D, l), physical units, sorted."""
        c = self.config
        raw = self.forward_levels(past_targets, past_covariates,
                                  future_covariates)
        b = raw[0].shape[0]
        stacked = np.stack([t.data for t in raw], axis=-1)
        stacked.sort(axis=-1)
        stacked = stacked.reshape(b, c.horizon_N, c.n_targets, c.n_levels)
        return stacked * self.normalization.target_std[None, None, :, None] \
            + self.normalization.target_mean[None, None, :, None]


# ----------------------------------------------------------------------
# checkpoint io
# ----------------------------------------------------------------------

def save(model: Forecaster, path) -> None:
    """Binary container: magic, version, JSON metadata, named f64 arrays."""
    c = model.config
    norm = model.normalization
    names = sorted(model.params)
    meta = {
        "config": {
            "window_w": c.window_w, "horizon_N": c.horizon_N,
            "n_targets": c.n_targets, "n_covariates": c.n_covariates,
            "quantile_levels": list(c.quantile_levels),
            "encoder_layers": c.encoder_layers,
            "decoder_layers": c.decoder_layers,
            "hidden_size": c.hidden_size,
            "decoder_hidden": c.decoder_hidden,
            "decoder_output_dim": c.decoder_output_dim,
            "dropout": c.dropout, "layer_norm": c.layer_norm,
        },
        "normalization": {
            "target_mean": norm.target_mean.tolist(),
            "target_std": norm.target_std.tolist(),
            "cov_mean": norm.cov_mean.tolist(),
            "cov_std": norm.cov_std.tolist(),
        },
        "weights": [{"name": n, "shape": list(model.params[n].shape)}
                    for n in names],
    }
    blob = io.BytesIO()
    blob.write(CHECKPOINT_MAGIC)
    blob.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob.write(struct.pack("<I", len(meta_bytes)))
    blob.write(meta_bytes)
    blob.write(struct.pack("<I", len(names)))
    for n in names:
        arr = np.ascontiguousarray(model.params[n], dtype="<f8")
        nb = n.encode("utf-8")
        blob.write(struct.pack("<I", len(nb)))
        blob.write(nb)
        blob.write(struct.pack("<Q", arr.size))
        blob.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(blob.getvalue())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load(path) -> Forecaster:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint version {version} "
                f"(supported: {CHECKPOINT_VERSION})")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))
        try:
            meta = json.loads(_read_exact(fh, meta_len, "metadata"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt metadata block: {exc}") from exc
        config = ForecasterConfig(**meta["config"])
        nm = meta["normalization"]
        norm = Normalization(
            np.array(nm["target_mean"]), np.array(nm["target_std"]),
            np.array(nm["cov_mean"]), np.array(nm["cov_std"]))
        shapes = {w["name"]: tuple(w["shape"]) for w in meta["weights"]}
        (n_arrays,) = struct.unpack("<I", _read_exact(fh, 4, "array count"))
        if n_arrays != len(shapes):
            raise CheckpointError("weight manifest does not match array count")
        params = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "array name").decode("utf-8")
            (count,) = struct.unpack("<Q", _read_exact(fh, 8, "array length"))
            if name not in shapes:
                raise CheckpointError(f"unexpected weight array {name!r}")
            shape = shapes[name]
            if int(np.prod(shape, dtype=np.int64)) != count:
                raise CheckpointError(
                    f"array {name!r} length {count} does not match "
                    f"manifest shape {shape}")
            raw = _read_exact(fh, 8 * count, f"array {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after final array")
    return Forecaster(config, params, norm)
