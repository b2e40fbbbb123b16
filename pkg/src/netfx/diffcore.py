"""Float64 differentiable primitives, gradient checking, Adam, checkpoints.

Everything here runs on CPU tensors in double precision.  Gradients come
from reverse-mode autodiff; :func:`grad_check` is an independent central
finite-difference oracle that never touches the autodiff path, so the two
can be compared coordinate by coordinate.

Determinism notes: all segment reductions use single-threaded index_add /
scatter_reduce on CPU, and every random draw (inits, dropout masks) comes
from a caller-supplied :class:`numpy.random.Generator`.  Torch's own RNG
is never used.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

DTYPE = torch.float64

PROB_CLIP = 1e-7


class ShapeMismatchError(ValueError):
    """Incompatible tensor shapes passed to a primitive."""


class NonFiniteError(RuntimeError):
    """A loss, gradient, or parameter became NaN or infinite.

    ``where`` names the offending quantity (e.g. ``"loss"`` or
    ``"encoder.W1 gradient"``) so training failures are attributable.
    """

    def __init__(self, where: str):
        super().__init__(f"non-finite values in {where}")
        self.where = where


def as_tensor(x) -> torch.Tensor:
    """Convert array-likes to a float64 CPU tensor (no copy if already one)."""
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class ParamBlock:
    """An ordered collection of named float64 parameter tensors.

    The block exposes a stable flattened view: parameters concatenate in
    insertion order, which gives every scalar coordinate a fixed flat
    index.  :meth:`coord_label` maps a flat index back to a human-readable
    ``name[i, j]`` string for gradient-check reports.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray | torch.Tensor]):
        self._tensors: dict[str, torch.Tensor] = {}
        self._layout: list[tuple[str, int, tuple[int, ...]]] = []
        offset = 0
        for name, value in tensors.items():
            t = as_tensor(value).clone().requires_grad_(True)
            self._tensors[name] = t
            self._layout.append((name, offset, tuple(t.shape)))
            offset += t.numel()
        self._size = offset

    @property
    def size(self) -> int:
        return self._size

    @property
    def names(self) -> list[str]:
        return [name for name, _, _ in self._layout]

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[torch.Tensor]:
        return list(self._tensors.values())

    def get_flat(self) -> np.ndarray:
        """Copy all parameters into one flat float64 vector."""
        return np.concatenate(
            [t.detach().numpy().reshape(-1) for t in self._tensors.values()]
        ) if self._size else np.empty(0)

    def set_flat(self, vec: np.ndarray) -> None:
        """Load parameters from a flat vector (inverse of :meth:`get_flat`)."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self._size,):
            raise ShapeMismatchError(f"flat vector has shape {vec.shape}, expected ({self._size},)")
        with torch.no_grad():
            for name, offset, shape in self._layout:
                chunk = vec[offset:offset + int(np.prod(shape, dtype=int))]
                self._tensors[name].copy_(torch.from_numpy(chunk.reshape(shape).copy()))

    def coord_label(self, flat_index: int) -> str:
        if not 0 <= flat_index < self._size:
            raise IndexError(f"flat index {flat_index} out of range [0, {self._size})")
        for name, offset, shape in self._layout:
            numel = int(np.prod(shape, dtype=int))
            if flat_index < offset + numel:
                idx = np.unravel_index(flat_index - offset, shape) if shape else ()
                return f"{name}[{', '.join(str(k) for k in idx)}]" if shape else name
        raise AssertionError("unreachable")

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.detach().numpy().copy() for name, t in self._tensors.items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        if set(arrays) != set(self._tensors):
            raise ShapeMismatchError(
                f"parameter names {sorted(arrays)} do not match block {self.names}"
            )
        with torch.no_grad():
            for name, t in self._tensors.items():
                arr = np.asarray(arrays[name], dtype=np.float64)
                if arr.shape != tuple(t.shape):
                    raise ShapeMismatchError(
                        f"{name}: array shape {arr.shape} != parameter shape {tuple(t.shape)}"
                    )
                t.copy_(torch.from_numpy(arr.copy()))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Glorot/Xavier uniform init drawn from a numpy generator."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


def affine_params(rng: np.random.Generator, in_dim: int, out_dim: int,
                  prefix: str) -> dict[str, np.ndarray]:
    """Weight/bias pair for one affine layer, Glorot weights and zero bias."""
    return {
        f"{prefix}W": glorot_uniform(rng, in_dim, out_dim),
        f"{prefix}b": np.zeros(out_dim),
    }


def mlp_params(rng: np.random.Generator, dims: Sequence[int]) -> dict[str, np.ndarray]:
    """Stacked affine layers ``l1_.. lK_`` for the given width sequence."""
    out: dict[str, np.ndarray] = {}
    for k in range(len(dims) - 1):
        out.update(affine_params(rng, dims[k], dims[k + 1], f"l{k + 1}_"))
    return out


def affine(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``x @ w + b`` with an explicit shape check on the contracted dim."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatchError(
            f"affine: input dim {x.shape[-1]} != weight rows {w.shape[0]}"
        )
    return x @ w + b


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, min=0.0)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def masked_row_softmax(scores: torch.Tensor, support: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax restricted to a boolean support mask.

    Entries outside the support are exactly zero in the output and each
    supported row sums to 1.  Rows with empty support are an error, not
    NaN.  The row max is subtracted before exponentiation; since softmax
    is shift invariant this changes neither values nor gradients.
    """
    scores = as_tensor(scores)
    support = torch.as_tensor(support, dtype=torch.bool)
    if scores.shape != support.shape or scores.ndim != 2:
        raise ShapeMismatchError(
            f"scores {tuple(scores.shape)} and support {tuple(support.shape)} "
            "must be equal 2-d shapes"
        )
    if not bool(support.any(dim=1).all()):
        empty = int((~support.any(dim=1)).nonzero()[0, 0])
        raise ValueError(f"row {empty} has empty support")
    masked = scores.masked_fill(~support, float("-inf"))
    shifted = masked - masked.max(dim=1, keepdim=True).values.detach()
    ex = torch.exp(shifted) * support
    return ex / ex.sum(dim=1, keepdim=True)


def segment_softmax(scores: torch.Tensor, segments: torch.Tensor, n: int) -> torch.Tensor:
    """Softmax over edge scores grouped by segment (row) id.

    The edge-list counterpart of :func:`masked_row_softmax`: ``scores`` is
    a flat vector, ``segments`` assigns each entry to a row in ``[0, n)``,
    and the result sums to 1 within every non-empty segment.
    """
    scores = as_tensor(scores)
    segments = torch.as_tensor(segments, dtype=torch.int64)
    if scores.shape != segments.shape or scores.ndim != 1:
        raise ShapeMismatchError("scores and segments must be equal-length vectors")
    with torch.no_grad():
        seg_max = torch.full((n,), float("-inf"), dtype=DTYPE)
        seg_max.scatter_reduce_(0, segments, scores.detach(), reduce="amax")
    ex = torch.exp(scores - seg_max[segments])
    denom = torch.zeros(n, dtype=DTYPE).index_add(0, segments, ex)
    return ex / denom[segments]


def segment_sum(values: torch.Tensor, segments: torch.Tensor, n: int) -> torch.Tensor:
    """Sum edge values into per-segment totals (empty segments give 0)."""
    values = as_tensor(values)
    segments = torch.as_tensor(segments, dtype=torch.int64)
    if values.shape[0] != segments.shape[0]:
        raise ShapeMismatchError("values and segments disagree on length")
    out_shape = (n,) + tuple(values.shape[1:])
    return torch.zeros(out_shape, dtype=DTYPE).index_add(0, segments, values)


def weighted_mse(pred: torch.Tensor, target: torch.Tensor,
                 weights: torch.Tensor) -> torch.Tensor:
    """``(1/n) * sum_i w_i (pred_i - target_i)^2``.

    Weights must be nonnegative; with all weights equal to 1 this is
    bitwise identical to the plain mean squared error.
    """
    pred, target, weights = as_tensor(pred), as_tensor(target), as_tensor(weights)
    if not pred.shape == target.shape == weights.shape:
        raise ShapeMismatchError(
            f"shapes differ: pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
            f"weights {tuple(weights.shape)}"
        )
    if bool((weights.detach() < 0).any()):
        raise ValueError("negative sample weight")
    return (weights * (pred - target) ** 2).mean()


def bce_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on probabilities (not logits).

    Probabilities are clipped to ``[1e-7, 1 - 1e-7]`` before the logs so a
    saturated discriminator yields a large finite loss instead of inf.
    """
    probs, labels = as_tensor(probs), as_tensor(labels)
    if probs.shape != labels.shape:
        raise ShapeMismatchError(
            f"probs {tuple(probs.shape)} vs labels {tuple(labels.shape)}"
        )
    detached = labels.detach()
    if not bool(((detached == 0) | (detached == 1)).all()):
        raise ValueError("labels must be 0 or 1")
    p = probs.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    return -(labels * torch.log(p) + (1.0 - labels) * torch.log1p(-p)).mean()


def dropout_mask(rng: np.random.Generator, shape: tuple[int, ...],
                 rate: float) -> torch.Tensor:
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    keep = rng.random(shape) >= rate
    return torch.from_numpy(keep.astype(np.float64) / (1.0 - rate))


def grad(loss_fn: Callable[[], torch.Tensor],
         blocks: Sequence[ParamBlock]) -> tuple[float, list[dict[str, torch.Tensor]]]:
    """Evaluate ``loss_fn`` and return exact gradients for every block.

    Returns ``(loss_value, grads)`` where ``grads[k][name]`` matches
    ``blocks[k][name]`` in shape.  Non-finite losses or gradients raise
    :class:`NonFiniteError` naming the offender.  Parameters that do not
    influence the loss get zero gradients.
    """
    blocks = list(blocks)
    loss = loss_fn()
    if loss.ndim != 0:
        raise ShapeMismatchError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError("loss")
    params = [t for b in blocks for t in b.tensors()]
    raw = torch.autograd.grad(loss, params, allow_unused=True)
    grads: list[dict[str, torch.Tensor]] = []
    it = iter(raw)
    for bi, block in enumerate(blocks):
        out = {}
        for name, tensor in block.items():
            g = next(it)
            if g is None:
                g = torch.zeros_like(tensor)
            elif not bool(torch.isfinite(g).all()):
                raise NonFiniteError(f"block {bi} {name} gradient")
            out[name] = g.detach()
        grads.append(out)
    return float(loss.detach()), grads


@dataclass
class GradCheckReport:
    """Worst-case comparison of autodiff against central differences."""

    max_rel_err: float
    worst_block: int
    worst_coord: str
    analytic: float
    numeric: float
    coords_checked: int

    def __str__(self):
        return (
            f"max rel err {self.max_rel_err:.3e} at block {self.worst_block} "
            f"{self.worst_coord} (analytic {self.analytic:.6e}, "
            f"numeric {self.numeric:.6e}, {self.coords_checked} coords)"
        )


def grad_check(loss_fn: Callable[[], torch.Tensor],
               blocks: Sequence[ParamBlock],
               h: float = 1e-5,
               sample: int | None = None,
               rng: np.random.Generator | None = None,
               retry_threshold: float = 1e-4) -> GradCheckReport:
    """Compare autodiff gradients with central finite differences.

    Every parameter coordinate is perturbed by ``+/- h`` in place (and
    restored), the loss re-evaluated, and the two-sided difference
    quotient compared against the analytic gradient with relative error
    ``|a - g| / max(|a|, |g|, floor)``.  The floor is ``1e-6 * max(1,
    |loss|)``: the difference quotient carries rounding noise of about
    ``ulp(loss) / 2h``, so gradients below that scale are compared
    against the floor instead of their own (noise-dominated) magnitude.

    Losses built from relu are only piecewise smooth.  A coordinate whose
    ``+/- h`` interval straddles a kink reports a spurious mismatch, so
    coordinates above ``retry_threshold`` are re-measured at ``h/16`` and
    ``h/64`` and the smallest error is kept: shrinking the interval walks
    it off a nearby kink, while a genuinely wrong analytic gradient
    disagrees with the difference quotient at every step size.

    With ``sample`` set, a random subset of that many coordinates per
    block is checked instead of all of them (``rng`` then required); the
    subset is reported in the count.
    """
    blocks = list(blocks)
    loss_value, analytic = grad(loss_fn, blocks)
    floor = 1e-6 * max(1.0, abs(loss_value))
    if sample is not None and rng is None:
        raise ValueError("coordinate sampling requires an rng")
    worst = GradCheckReport(0.0, -1, "", 0.0, 0.0, 0)
    checked = 0
    for bi, block in enumerate(blocks):
        flat_grad = np.concatenate(
            [analytic[bi][name].numpy().reshape(-1) for name in block.names]
        ) if block.size else np.empty(0)
        if sample is None or sample >= block.size:
            coords = np.arange(block.size)
        else:
            coords = np.sort(rng.choice(block.size, size=sample, replace=False))
        views = [block[name].data.view(-1) for name in block.names]
        offsets = np.cumsum([0] + [v.numel() for v in views])
        for k in coords.tolist():
            vi = int(np.searchsorted(offsets, k, side="right") - 1)
            local = k - int(offsets[vi])
            view = views[vi]
            a = float(flat_grad[k])
            rel, numeric = np.inf, 0.0
            for step in (h, h / 16.0, h / 64.0):
                with torch.no_grad():
                    orig = view[local].item()
                    view[local] = orig + step
                    up = float(loss_fn().detach())
                    view[local] = orig - step
                    down = float(loss_fn().detach())
                    view[local] = orig
                quotient = (up - down) / (2.0 * step)
                this_rel = abs(a - quotient) / max(abs(a), abs(quotient), floor)
                if this_rel < rel:
                    rel, numeric = this_rel, quotient
                if rel <= retry_threshold:
                    break
            checked += 1
            if rel > worst.max_rel_err:
                worst = GradCheckReport(rel, bi, block.coord_label(k), a, numeric, 0)
    worst.coords_checked = checked
    return worst


@dataclass
class AdamState:
    """First/second moment accumulators for one :class:`ParamBlock`."""

    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def for_block(cls, block: ParamBlock) -> "AdamState":
        return cls(
            step=0,
            m={name: torch.zeros_like(t) for name, t in block.items()},
            v={name: torch.zeros_like(t) for name, t in block.items()},
        )


def adam_step(block: ParamBlock, grads: Mapping[str, torch.Tensor],
              state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    """One Adam update with bias correction, in place.

    On the first step from a fresh state the update direction is
    ``-lr * g / (|g| + eps)``, i.e. close to a signed step of size ``lr``.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in block.items():
            g = grads[name]
            if not bool(torch.isfinite(g).all()):
                raise NonFiniteError(f"{name} gradient in adam_step")
            m = state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            v = state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
            if not bool(torch.isfinite(p).all()):
                raise NonFiniteError(f"{name} after adam_step")


# --- checkpoint IO ----------------------------------------------------------
#
# Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
# header, then the concatenated float64 little-endian payload of every
# parameter in header order.  The header records shapes and a SHA-256 of
# the payload so corruption is detected before any array is handed back.

CHECKPOINT_MAGIC = b"NFXCKPT\x01"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


def save_checkpoint(path, blocks: Mapping[str, ParamBlock], meta: dict) -> None:
    """Serialise named parameter blocks plus a JSON-safe metadata dict."""
    entries = []
    chunks = []
    for block_name in blocks:
        block = blocks[block_name]
        for name, tensor in block.items():
            arr = tensor.detach().numpy().astype("<f8")
            entries.append({
                "block": block_name,
                "name": name,
                "shape": list(arr.shape),
            })
            chunks.append(arr.tobytes(order="C"))
    payload = b"".join(chunks)
    header = {
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "params": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    """Read a checkpoint back as ``(meta, {block: {param: array}})``.

    Verifies the magic, the format version, and the payload checksum;
    failures raise :class:`CheckpointError` rather than returning
    silently wrong arrays.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    payload = raw[off + hlen:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays: dict[str, dict[str, np.ndarray]] = {}
    pos = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        numel = int(np.prod(shape, dtype=int)) if shape else 1
        nbytes = numel * 8
        if pos + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {entry['name']}")
        arr = np.frombuffer(payload, dtype="<f8", count=numel, offset=pos)
        arrays.setdefault(entry["block"], {})[entry["name"]] = (
            arr.astype(np.float64).reshape(shape)
        )
        pos += nbytes
    if pos != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - pos} trailing payload bytes")
    return header["meta"], arrays
