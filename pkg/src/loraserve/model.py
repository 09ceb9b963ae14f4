"""Base model, low-rank adapters, one-shot merge/unmerge and the three forward modes."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .atmm import TilingTable, atmm_multiply, lookup_config
from .batching import UnknownAdapterError, plan_batch, run_bypass
from .matrix import Matrix, ShapeError, add_inplace, load_binary, save_binary, sub_inplace

UNMERGED = "unmerged"
MERGED = "merged"
MIXTURE = "mixture"


class ModeError(RuntimeError):
    """Operation is not legal in the current inference mode."""


class AdapterMismatchError(ModeError):
    pass


class MixtureIntegrityError(ModeError):
    pass


class MissingTaskHeadError(ValueError):
    pass


def _relu(y):
    np.maximum(y, 0, out=y)


def _tanh(y):
    np.tanh(y, out=y)


def _identity(y):
    pass


ACTIVATIONS = {"relu": _relu, "tanh": _tanh, "identity": _identity}


class InferMode(NamedTuple):
    kind: str
    adapter_id: Optional[int] = None

    def __str__(self):
        return self.kind if self.adapter_id is None else f"{self.kind}({self.adapter_id})"


Unmerged = InferMode(UNMERGED)


def Merged(adapter_id):
    return InferMode(MERGED, adapter_id)


def Mixture(adapter_id):
    return InferMode(MIXTURE, adapter_id)


class BaseModel:
    """``num_layers`` square projections in one contiguous block, plus an LM head.

    A layer computes ``activation(x @ W)``. The weight block is allocated once;
    merge and unmerge write into it in place.
    """

    def __init__(self, layer_weights, lm_head, activation="relu", dtype=np.float32):
        layers = [np.asarray(w, dtype=dtype) for w in layer_weights]
        if not layers:
            raise ValueError("model needs at least one layer")
        d = layers[0].shape[0]
        if any(w.shape != (d, d) for w in layers):
            raise ShapeError("layer weights must all be d x d", *(w.shape for w in layers))
        head = np.asarray(lm_head, dtype=dtype)
        if head.ndim != 2 or head.shape[1] != d or head.shape[0] < 2:
            raise ShapeError("lm head must be V x d with V >= 2", head.shape, (2, d))
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self._storage = np.empty((len(layers), d, d), dtype=dtype)
        for i, w in enumerate(layers):
            self._storage[i] = w
        self.layer_weights = tuple(Matrix.wrap(self._storage[i]) for i in range(len(layers)))
        self.lm_head = Matrix(head, dtype=dtype)
        self.lm_head.array.flags.writeable = False
        self._lm_head_t = Matrix.wrap(np.ascontiguousarray(head.T))
        self.activation = activation
        self._act = ACTIVATIONS[activation]

    @classmethod
    def random(cls, num_layers=4, hidden_dim=256, vocab_size=1024, rng=None, activation="relu", dtype=np.float32):
        rng = np.random.default_rng(rng)
        scale = np.sqrt(2.0 / hidden_dim)
        layers = [rng.standard_normal((hidden_dim, hidden_dim)) * scale for _ in range(num_layers)]
        head = rng.standard_normal((vocab_size, hidden_dim)) / np.sqrt(hidden_dim)
        return cls(layers, head, activation=activation, dtype=dtype)

    @property
    def num_layers(self):
        return len(self.layer_weights)

    @property
    def hidden_dim(self):
        return self._storage.shape[1]

    @property
    def vocab_size(self):
        return self.lm_head.rows

    @property
    def dtype(self):
        return self._storage.dtype

    def weight_addresses(self):
        return tuple(w.array.__array_interface__["data"][0] for w in self.layer_weights)

    def checkpoint(self):
        return self._storage.copy()

    def restore(self, snapshot):
        self._storage[...] = snapshot


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    """Per-layer ``down`` (d x r) and ``up`` (r x d) factors; ``delta_w = down @ up``."""

    id: int
    down: tuple
    up: tuple
    task_head: Optional[Matrix] = None
    _task_head_t: Optional[Matrix] = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.down) != len(self.up) or not self.down:
            raise ValueError("adapter needs one (down, up) pair per layer")
        d, r = self.down[0].shape
        if r >= d:
            raise ValueError(f"rank {r} must be below hidden dim {d}")
        for dn, upm in zip(self.down, self.up):
            if dn.shape != (d, r) or upm.shape != (r, d):
                raise ShapeError("adapter factor shapes disagree", dn.shape, upm.shape)
        mats = list(self.down) + list(self.up)
        if self.task_head is not None:
            if self.task_head.cols != d:
                raise ShapeError("task head must be C x d", self.task_head.shape, (self.task_head.rows, d))
            object.__setattr__(self, "_task_head_t", Matrix.wrap(np.ascontiguousarray(self.task_head.array.T)))
            mats += [self.task_head, self._task_head_t]
        for mat in mats:
            mat.array.flags.writeable = False

    @classmethod
    def random(cls, adapter_id, num_layers, hidden_dim, rank, rng=None, num_classes=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        down = tuple(Matrix.random(hidden_dim, rank, rng, 1 / np.sqrt(hidden_dim), dtype) for _ in range(num_layers))
        up = tuple(Matrix.random(rank, hidden_dim, rng, 1 / np.sqrt(rank), dtype) for _ in range(num_layers))
        head = None
        if num_classes:
            head = Matrix.random(num_classes, hidden_dim, rng, 1 / np.sqrt(hidden_dim), dtype)
        return cls(adapter_id, down, up, head)

    @classmethod
    def zeros(cls, adapter_id, num_layers, hidden_dim, rank, dtype=np.float32):
        return cls(
            adapter_id,
            tuple(Matrix.zeros(hidden_dim, rank, dtype) for _ in range(num_layers)),
            tuple(Matrix.zeros(rank, hidden_dim, dtype) for _ in range(num_layers)),
        )

    @property
    def rank(self):
        return self.down[0].cols

    @property
    def num_layers(self):
        return len(self.down)

    @property
    def hidden_dim(self):
        return self.down[0].rows

    @property
    def nbytes(self):
        """Factor storage only (the task head is excluded)."""
        return sum(m.nbytes for m in self.down) + sum(m.nbytes for m in self.up)

    def delta_w_nbytes(self):
        return self.num_layers * self.hidden_dim ** 2 * self.down[0].scalar_width

    def same_weights(self, other):
        return all(
            np.array_equal(a.array, b.array)
            for a, b in zip(self.down + self.up, other.down + other.up)
        ) and len(self.down) == len(other.down)


@dataclass
class ModelState:
    mode: InferMode = Unmerged
    delora_branch: Optional[LoraAdapter] = None


def delta_w(adapter: LoraAdapter, layer, table: TilingTable) -> Matrix:
    if not 0 <= layer < adapter.num_layers:
        raise IndexError(f"layer {layer} out of range for {adapter.num_layers} layers")
    d, r = adapter.hidden_dim, adapter.rank
    return atmm_multiply(adapter.down[layer], adapter.up[layer], lookup_config(table, d, r, d), tag="switch")


def merge(model: BaseModel, state: ModelState, adapter: LoraAdapter, table: TilingTable) -> float:
    """Fold the adapter into every layer weight in place; returns wall seconds."""
    if state.mode.kind != UNMERGED:
        raise ModeError(f"cannot merge adapter {adapter.id}: model is {state.mode}; unmerge first")
    t0 = time.perf_counter()
    for layer, w in enumerate(model.layer_weights):
        add_inplace(w, delta_w(adapter, layer, table))
    state.mode = Merged(adapter.id)
    return time.perf_counter() - t0


def unmerge(model: BaseModel, state: ModelState, adapter: LoraAdapter, table: TilingTable) -> float:
    if state.mode.kind == UNMERGED:
        raise ModeError("model is not merged")
    if state.mode.adapter_id != adapter.id:
        raise AdapterMismatchError(f"model holds adapter {state.mode.adapter_id}, asked to unmerge {adapter.id}")
    t0 = time.perf_counter()
    for layer, w in enumerate(model.layer_weights):
        sub_inplace(w, delta_w(adapter, layer, table))
    state.mode = Unmerged
    state.delora_branch = None
    return time.perf_counter() - t0


def _base(model, y, table, layer):
    d = model.hidden_dim
    return atmm_multiply(y, model.layer_weights[layer], lookup_config(table, y.rows, d, d), tag="base")


def forward_merged(model: BaseModel, state: ModelState, x: Matrix, table: TilingTable) -> Matrix:
    if state.mode.kind != MERGED:
        raise ModeError(f"forward_merged needs merged mode, model is {state.mode}")
    y = x
    for layer in range(model.num_layers):
        y = _base(model, y, table, layer)
        model._act(y.array)
    return y


def _check_assignment(x, assignment, adapters):
    if len(assignment) != x.rows:
        raise ShapeError("assignment length differs from batch rows", (len(assignment), 1), x.shape)
    for a in set(assignment):
        if a not in adapters:
            raise UnknownAdapterError(a)


def forward_unmerged(model, state, x: Matrix, assignment, adapters, table) -> Matrix:
    if state.mode.kind != UNMERGED:
        raise ModeError(f"forward_unmerged needs unmerged mode, model is {state.mode}")
    _check_assignment(x, assignment, adapters)
    plan = plan_batch(assignment)
    y = x
    for layer in range(model.num_layers):
        base = _base(model, y, table, layer)
        base.array += run_bypass(y, plan, adapters, layer, table).array
        model._act(base.array)
        y = base
    return y


def check_mixture(state: ModelState, adapters):
    kind, merged_id = state.mode
    if kind != MIXTURE:
        raise ModeError(f"forward_mixture needs mixture mode, model is {state.mode}")
    branch = state.delora_branch
    if branch is None:
        raise MixtureIntegrityError("mixture mode without a deLoRA branch")
    merged = adapters.get(merged_id)
    if branch.id != merged_id or merged is None or not (branch is merged or branch.same_weights(merged)):
        raise MixtureIntegrityError(f"deLoRA branch does not match merged adapter {merged_id}")
    return merged_id, branch


def forward_mixture(model, state, x: Matrix, assignment, adapters, table) -> Matrix:
    """Merged weights for the merged adapter's rows; other rows add their own
    bypass and subtract the merged adapter's (the deLoRA branch)."""
    merged_id, branch = check_mixture(state, adapters)
    _check_assignment(x, assignment, adapters)
    ids = np.asarray(assignment)
    others = np.flatnonzero(ids != merged_id)
    if others.size:
        plan = plan_batch(ids[others])
        cancel = plan_batch(np.full(others.size, merged_id))
        cancel_src = {merged_id: branch}
    y = x
    for layer in range(model.num_layers):
        base = _base(model, y, table, layer)
        if others.size:
            sub = Matrix.wrap(y.array[others])
            own = run_bypass(sub, plan, adapters, layer, table)
            dl = run_bypass(sub, cancel, cancel_src, layer, table, tag="delora")
            base.array[others] += own.array - dl.array
        model._act(base.array)
        y = base
    return y


def forward(model, state, x, assignment, adapters, table) -> Matrix:
    """Dispatch on the current mode."""
    kind, merged_id = state.mode
    if kind == MERGED:
        if any(a != merged_id for a in assignment):
            raise ModeError(f"merged mode serves only adapter {merged_id}")
        return forward_merged(model, state, x, table)
    if kind == MIXTURE:
        return forward_mixture(model, state, x, assignment, adapters, table)
    return forward_unmerged(model, state, x, assignment, adapters, table)


def project_heads(model, hidden: Matrix, heads, adapters, table):
    """Apply the LM head or the adapter's task head to each row of ``hidden``.

    ``heads`` holds one ``(head_kind, adapter_id)`` pair per row. Returns a
    list of per-row output vectors.
    """
    out = [None] * hidden.rows
    groups = {}
    for i, (kind, aid) in enumerate(heads):
        groups.setdefault((kind, aid if kind == "task" else None), []).append(i)
    d = model.hidden_dim
    for (kind, aid), rows in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] or 0)):
        if kind == "task":
            ad = adapters[aid]
            if ad.task_head is None:
                raise MissingTaskHeadError(f"adapter {aid} has no task head")
            w = ad._task_head_t
        else:
            w = model._lm_head_t
        block = Matrix.wrap(hidden.array[rows])
        logits = atmm_multiply(block, w, lookup_config(table, len(rows), d, w.cols), tag="head")
        for i, row in zip(rows, logits.array):
            out[i] = row
    return out


def decode(model, state, adapters, adapter_id, table, *, rounds, head="lm", prefill_rows=1, rng=None):
    """Run one request alone and return the wall seconds of each decode round.

    The first round pushes ``prefill_rows`` rows through the stack; later
    rounds push one. A task-head request always finishes after one round.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if head == "task":
        if adapters[adapter_id].task_head is None:
            raise MissingTaskHeadError(f"adapter {adapter_id} has no task head")
        rounds = 1
    rng = np.random.default_rng(rng)
    d = model.hidden_dim
    durations = []
    for rnd in range(rounds):
        rows = prefill_rows if rnd == 0 else 1
        x = Matrix.wrap(rng.standard_normal((rows, d)).astype(model.dtype))
        t0 = time.perf_counter()
        h = forward(model, state, x, [adapter_id] * rows, adapters, table)
        project_heads(model, Matrix.wrap(h.array[-1:]), [(head, adapter_id)], adapters, table)
        durations.append(time.perf_counter() - t0)
    return durations


def save_fixture(directory, model: BaseModel, adapters):
    """Write every matrix in the binary format plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "num_layers": model.num_layers,
        "hidden_dim": model.hidden_dim,
        "vocab_size": model.vocab_size,
        "activation": model.activation,
        "layers": [],
        "lm_head": "lm_head.bin",
        "adapters": [],
    }
    for i, w in enumerate(model.layer_weights):
        name = f"layer{i}.bin"
        save_binary(w, directory / name)
        manifest["layers"].append(name)
    save_binary(model.lm_head, directory / "lm_head.bin")
    for ad in sorted(adapters.values(), key=lambda a: a.id):
        entry = {"id": ad.id, "rank": ad.rank, "down": [], "up": [], "task_head": None}
        for i, (dn, upm) in enumerate(zip(ad.down, ad.up)):
            for part, mat in (("down", dn), ("up", upm)):
                name = f"adapter{ad.id}_{part}{i}.bin"
                save_binary(mat, directory / name)
                entry[part].append(name)
        if ad.task_head is not None:
            name = f"adapter{ad.id}_task_head.bin"
            save_binary(ad.task_head, directory / name)
            entry["task_head"] = name
        manifest["adapters"].append(entry)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_fixture(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    layers = [load_binary(directory / name).array for name in manifest["layers"]]
    head = load_binary(directory / manifest["lm_head"])
    model = BaseModel(layers, head.array, activation=manifest.get("activation", "relu"), dtype=head.dtype)
    adapters = {}
    for entry in manifest["adapters"]:
        down = tuple(load_binary(directory / n) for n in entry["down"])
        up = tuple(load_binary(directory / n) for n in entry["up"])
        th = load_binary(directory / entry["task_head"]) if entry.get("task_head") else None
        ad = LoraAdapter(int(entry["id"]), down, up, th)
        if ad.rank != entry["rank"]:
            raise ValueError(f"adapter {ad.id}: manifest rank {entry['rank']} != stored rank {ad.rank}")
        adapters[ad.id] = ad
    return model, adapters
