"""Training loop: RMSprop, train/validation split, loss-curve recording.

Everything is seeded and single-owner: one trainer mutates the parameters
and optimizer state; validation only reads them. With a fixed seed (and a
fixed BLAS worker count) two runs produce bit-identical curves and
checkpoints.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import dataio, nnops, unet
from .errors import ContractViolation, TrainingDivergedError

Array = np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 100
    val_fraction: float = 0.10
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        # learning_rate 0 is tolerated: it freezes the parameters, which the
        # CLI uses as a sanity mode
        if self.learning_rate < 0:
            raise ContractViolation(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 < self.val_fraction < 1:
            raise ContractViolation(f"val_fraction must be in (0,1), got {self.val_fraction}")
        if self.batch_size < 1:
            raise ContractViolation(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ContractViolation(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.rmsprop_decay < 1:
            raise ContractViolation(f"rmsprop_decay must be in [0,1), got {self.rmsprop_decay}")


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float


@dataclass
class LossCurve:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ContractViolation(
                f"epoch indices must increase: {record.epoch} after {self.records[-1].epoch}")
        self.records.append(record)

    def val_values(self) -> list[float]:
        return [r.val_mse for r in self.records]

    def train_values(self) -> list[float]:
        return [r.train_mse for r in self.records]

    def save_csv(self, path) -> None:
        lines = ["epoch,train_mse,val_mse"]
        lines += [f"{r.epoch},{r.train_mse!r},{r.val_mse!r}" for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @staticmethod
    def load_csv(path) -> "LossCurve":
        curve = LossCurve()
        lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
        for line in lines[1:]:
            e, t, v = line.split(",")
            curve.append(EpochRecord(int(e), float(t), float(v)))
        return curve


# ---------------------------------------------------------------------------
# optimizer


def init_rms_state(params: unet.UNetParams) -> dict[str, Array]:
    """Zeroed squared-gradient accumulators matching the parameter layout."""
    return {name: np.zeros_like(t) for name, t in params.tensors.items()}


def rmsprop_step(params: unet.UNetParams, grads: dict[str, Array],
                 state: dict[str, Array], cfg: TrainConfig):
    """v <- rho*v + (1-rho)*g^2 ; theta <- theta - lr*g/(sqrt(v)+eps).

    Updates params and state in place and returns them.
    """
    if set(grads) != set(params.tensors) or set(state) != set(params.tensors):
        raise ContractViolation("params, grads and state must share the same keys")
    rho = cfg.rmsprop_decay
    lr = cfg.learning_rate
    eps = cfg.rmsprop_epsilon
    for name, theta in params.tensors.items():
        g = grads[name]
        v = state[name]
        if g.shape != theta.shape or v.shape != theta.shape:
            raise ContractViolation(
                f"shape mismatch at {name}: theta {theta.shape}, g {g.shape}, v {v.shape}")
        v *= rho
        v += (1.0 - rho) * np.square(g)
        theta -= lr * g / (np.sqrt(v) + eps)
    return params, state


# ---------------------------------------------------------------------------
# splitting


def split_train_val(pair_ids: list[str], val_fraction: float, seed: int):
    """Seeded disjoint, exhaustive partition; |val| = round(frac*n), at
    least 1 (and at most n-1) when n >= 2."""
    if not pair_ids:
        raise ContractViolation("cannot split an empty id list")
    if not 0 < val_fraction < 1:
        raise ContractViolation(f"val_fraction must be in (0,1), got {val_fraction}")
    n = len(pair_ids)
    k = int(np.floor(val_fraction * n + 0.5))  # round half up
    if n >= 2:
        k = min(max(k, 1), n - 1)
    perm = nnops.make_rng(seed).permutation(n)
    val_ids = [pair_ids[i] for i in perm[:k]]
    train_ids = [pair_ids[i] for i in perm[k:]]
    return train_ids, val_ids


# ---------------------------------------------------------------------------
# epoch loop


def _batched(ids: list[str], size: int):
    for i in range(0, len(ids), size):
        yield ids[i:i + size]


def _stack(images: list[Array]) -> Array:
    return np.stack(images)[:, None, :, :]


def fit(params: unet.UNetParams, manifest: dataio.PairManifest, cfg: TrainConfig,
        callback: Callable[[EpochRecord], None] | None = None,
        checkpoint_dir=None):
    """Train params on the manifest's quarter->full pairs. Returns (params, LossCurve).

    Per epoch: seeded shuffle of the train ids, mini-batches (ragged final
    batch kept), forward -> MSE against the full-dose target -> backward ->
    rmsprop_step; then mean validation MSE with no parameter update. When
    checkpoint_dir is given, writes ckpt_last.bin every epoch and keeps
    ckpt_best.bin (lowest validation MSE) and ckpt_final.bin.
    """
    cfg.validate()
    if not manifest.pairs:
        raise ContractViolation("manifest has no pairs")

    manifest = _ensure_split_and_norm(manifest, cfg)
    train_ids = manifest.split_ids("train")
    val_ids = manifest.split_ids("val")
    if not train_ids or not val_ids:
        raise ContractViolation(
            f"need non-empty train and val splits, got {len(train_ids)}/{len(val_ids)}")

    data: dict[str, tuple[Array, Array]] = {}
    for entry in manifest.pairs:
        try:
            data[entry.id] = dataio.load_pair_unit(manifest, entry)
        except Exception as exc:
            raise TrainingDivergedError(f"unreadable pair {entry.id!r}: {exc}") from exc

    state = init_rms_state(params)
    shuffle_rng = nnops.make_rng(cfg.seed)
    curve = LossCurve()
    best_val = np.inf
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        order = [train_ids[i] for i in shuffle_rng.permutation(len(train_ids))]
        sq_sum = 0.0
        n_images = 0
        for step, batch_ids in enumerate(_batched(order, cfg.batch_size)):
            x = _stack([data[i][0] for i in batch_ids])
            t = _stack([data[i][1] for i in batch_ids])
            y, cache = unet.forward(params, x)
            loss, grad_y = nnops.mse_loss(y, t)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"divergence at epoch {epoch}, step {step}: loss {loss}")
            grads = unet.backward(params, cache, grad_y)
            rmsprop_step(params, grads, state, cfg)
            sq_sum += loss * len(batch_ids)
            n_images += len(batch_ids)
        train_mse = sq_sum / n_images

        val_mse = evaluate_mse(params, manifest, val_ids, cfg.batch_size, data)
        record = EpochRecord(epoch=epoch, train_mse=train_mse, val_mse=val_mse)
        curve.append(record)
        if callback is not None:
            callback(record)

        if ckpt_dir is not None:
            unet.save_checkpoint(params, ckpt_dir / "ckpt_last.bin")
            if val_mse < best_val:
                unet.save_checkpoint(params, ckpt_dir / "ckpt_best.bin")
        if val_mse < best_val:
            best_val = val_mse

    if ckpt_dir is not None:
        unet.save_checkpoint(params, ckpt_dir / "ckpt_final.bin")
    return params, curve


def evaluate_mse(params: unet.UNetParams, manifest: dataio.PairManifest,
                 ids: list[str], batch_size: int = 4,
                 preloaded: dict[str, tuple[Array, Array]] | None = None) -> float:
    """Mean MSE over the given pair ids; never mutates params."""
    sq_sum = 0.0
    n_images = 0
    for batch_ids in _batched(list(ids), batch_size):
        pairs = [preloaded[i] if preloaded else dataio.load_pair_unit(manifest, manifest.entry(i))
                 for i in batch_ids]
        x = _stack([p[0] for p in pairs])
        t = _stack([p[1] for p in pairs])
        y, _ = unet.forward(params, x)
        loss, _ = nnops.mse_loss(y, t)
        sq_sum += loss * len(batch_ids)
        n_images += len(batch_ids)
    return sq_sum / n_images


def _ensure_split_and_norm(manifest: dataio.PairManifest, cfg: TrainConfig) -> dataio.PairManifest:
    """Honor existing split tags and normalization; derive what is missing.

    Normalization statistics always come from the train-tagged pairs only.
    """
    tags = {e.split for e in manifest.pairs}
    if tags == {None}:
        ids = [e.id for e in manifest.pairs]
        train_ids, val_ids = split_train_val(ids, cfg.val_fraction, cfg.seed)
        train_set = set(train_ids)
        for e in manifest.pairs:
            e.split = "train" if e.id in train_set else "val"
    elif None in tags or not tags <= {"train", "val"}:
        raise ContractViolation(f"manifest split tags must all be train/val, got {tags}")
    if manifest.normalization is None:
        manifest.normalization = dataio.compute_normalization(manifest)
    return manifest


# ---------------------------------------------------------------------------
# plateau detection


def plateau_epoch(curve: LossCurve, window: int, tol: float) -> int | None:
    """First epoch whose validation MSE exceeds the mean of the next `window`
    epochs by a relative margin below tol; None if the curve keeps falling.
    """
    if window < 2:
        raise ContractViolation(f"window must be >= 2, got {window}")
    vals = curve.val_values()
    for e in range(len(vals) - window):
        future = float(np.mean(vals[e + 1:e + 1 + window]))
        denom = vals[e] if vals[e] > 0 else 1.0
        if (vals[e] - future) / denom < tol:
            return e
    return None
