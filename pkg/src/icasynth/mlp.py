"""Hand-rolled feed-forward networks for binary classification:
a unimodal MLP and a multimodal fusion MLP whose branch stacks are
concatenated before the merged layers. Sigmoid activations everywhere,
inverted dropout on hidden layers, per-layer L2 (input layers heavier),
binary cross-entropy loss, AdaGrad updates, single-pass online
training, unimodal-to-multimodal weight transfer, and fine-tuning with
periodic validation checkpoints.

A model is a tuple of branch layer stacks plus a shared head; the
unimodal case is one branch with a single output layer as head. All
update steps are functional (they return new arrays), so any model
reference is an immutable snapshot for free.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import StratificationError, ValidationError
from .numerics import RngStream

PROB_CLIP = 1e-7


@dataclass(frozen=True)
class MlpConfig:
    """Topology and training hyperparameters.

    One entry in branch_input_dims per modality; a single entry means a
    unimodal net (no merged hidden layers, the head is the output
    unit). For several branches the concatenated branch outputs feed
    merged hidden layers and then the output unit.
    """

    branch_input_dims: tuple
    branch_hidden: tuple = (20, 20, 20)
    merged_hidden: tuple = (20,)
    output_dim: int = 1
    dropout_rate: float = 0.5
    l2_input: float = 0.1
    l2_rest: float = 0.01
    learning_rate: float = 0.01
    adagrad_epsilon: float = 1e-8

    def __post_init__(self):
        dims = tuple(int(d) for d in self.branch_input_dims)
        hidden = tuple(int(h) for h in self.branch_hidden)
        merged = tuple(int(h) for h in self.merged_hidden)
        if not dims or any(d < 1 for d in dims):
            raise ValidationError("branch_input_dims must be positive")
        if not hidden or any(h < 1 for h in hidden):
            raise ValidationError("branch_hidden must be positive")
        if any(h < 1 for h in merged):
            raise ValidationError("merged_hidden must be positive")
        if self.output_dim != 1:
            raise ValidationError("output_dim must be 1 (binary classifier)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must lie in [0, 1)")
        if self.learning_rate <= 0.0:
            raise ValidationError("learning_rate must be positive")
        if self.l2_input < 0.0 or self.l2_rest < 0.0:
            raise ValidationError("l2 weights must be non-negative")
        if self.adagrad_epsilon < 0.0:
            raise ValidationError("adagrad_epsilon must be non-negative")
        object.__setattr__(self, "branch_input_dims", dims)
        object.__setattr__(self, "branch_hidden", hidden)
        object.__setattr__(self, "merged_hidden", merged)

    @classmethod
    def unimodal(cls, input_dim, **kwargs):
        return cls(branch_input_dims=(input_dim,), merged_hidden=(), **kwargs)

    @classmethod
    def multimodal(cls, input_dims, **kwargs):
        if len(tuple(input_dims)) < 2:
            raise ValidationError("a multimodal config needs at least 2 branches")
        return cls(branch_input_dims=tuple(input_dims), **kwargs)

    @property
    def n_branches(self):
        return len(self.branch_input_dims)

    @property
    def concat_width(self):
        return self.branch_hidden[-1] * self.n_branches

    def layer_shapes(self):
        """Shapes in canonical order: branch stacks, then the head."""
        shapes = []
        for dim in self.branch_input_dims:
            widths = (dim,) + self.branch_hidden
            shapes.append([(widths[i], widths[i + 1]) for i in range(len(self.branch_hidden))])
        head_widths = (self.concat_width,) + (self.merged_hidden if self.n_branches > 1 else ())
        head = [(head_widths[i], head_widths[i + 1]) for i in range(len(head_widths) - 1)]
        head.append((head_widths[-1], self.output_dim))
        shapes.append(head)
        return shapes


@dataclass(frozen=True)
class LayerWeights:
    weights: np.ndarray  # (fan_in, fan_out)
    biases: np.ndarray  # (fan_out,)
    l2_weight: float


@dataclass(frozen=True)
class MlpModel:
    config: MlpConfig
    branches: tuple  # tuple of per-branch LayerWeights tuples
    head: tuple  # LayerWeights tuple


def _glorot(rng, fan_in, fan_out):
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, (fan_in, fan_out))


def init_mlp(config, rng):
    """Glorot-uniform weights, zero biases. Draw order is branch stacks
    first (in branch order), then the head.
    """
    *branch_shapes, head_shapes = config.layer_shapes()
    branches = []
    for shapes in branch_shapes:
        layers = []
        for i, (fan_in, fan_out) in enumerate(shapes):
            l2 = config.l2_input if i == 0 else config.l2_rest
            layers.append(LayerWeights(_glorot(rng, fan_in, fan_out), np.zeros(fan_out), l2))
        branches.append(tuple(layers))
    head = tuple(
        LayerWeights(_glorot(rng, fan_in, fan_out), np.zeros(fan_out), config.l2_rest)
        for fan_in, fan_out in head_shapes
    )
    return MlpModel(config, tuple(branches), head)


@dataclass
class _LayerCache:
    inputs: np.ndarray  # what the layer consumed
    activated: np.ndarray  # sigmoid output, before dropout
    mask: np.ndarray  # dropout mask or None
    out: np.ndarray  # what the next layer consumes


@dataclass
class ForwardCache:
    branch_layers: list  # per branch: list of _LayerCache
    head_layers: list
    branch_outputs: list  # final activation per branch (input to concat)
    output: np.ndarray  # (n,) probabilities


def as_branch_inputs(model_or_config, xs):
    """Normalize inputs to one 2-D float64 matrix per branch."""
    config = model_or_config.config if isinstance(model_or_config, MlpModel) else model_or_config
    if isinstance(xs, np.ndarray):
        xs = [xs]
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    dims = config.branch_input_dims
    if len(xs) != len(dims):
        raise ValidationError(f"model has {len(dims)} branches but got {len(xs)} inputs")
    n = xs[0].shape[0] if xs[0].ndim == 2 else -1
    for b, (x, d) in enumerate(zip(xs, dims)):
        if x.ndim != 2 or x.shape[1] != d:
            raise ValidationError(
                f"branch {b} expects (n, {d}) input, got shape {x.shape}"
            )
        if x.shape[0] != n:
            raise ValidationError("branch inputs must have the same row count")
    return xs


def _apply_layer(layer, a_in, dropout_rate, is_output, train, rng):
    z = a_in @ layer.weights + layer.biases
    s = expit(z)
    if is_output or not train or dropout_rate == 0.0:
        return _LayerCache(a_in, s, None, s)
    keep = 1.0 - dropout_rate
    mask = rng.uniform(0.0, 1.0, s.shape) < keep
    out = s * mask / keep
    return _LayerCache(a_in, s, mask, out)


def forward(model, xs, mode="eval", rng=None):
    """Run the network. In train mode hidden activations get inverted
    dropout (masks drawn from rng in branch order, then head order);
    eval mode applies no masks and no scaling.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be train or eval, got {mode!r}")
    train = mode == "train"
    cfg = model.config
    if train and cfg.dropout_rate > 0.0 and rng is None:
        raise ValidationError("train mode with dropout needs an rng for masks")
    xs = as_branch_inputs(model, xs)

    branch_layers = []
    branch_outputs = []
    for b, stack in enumerate(model.branches):
        a = xs[b]
        caches = []
        for layer in stack:
            cache = _apply_layer(layer, a, cfg.dropout_rate, False, train, rng)
            caches.append(cache)
            a = cache.out
        branch_layers.append(caches)
        branch_outputs.append(a)

    h = np.concatenate(branch_outputs, axis=1) if len(branch_outputs) > 1 else branch_outputs[0]
    head_layers = []
    for i, layer in enumerate(model.head):
        is_output = i == len(model.head) - 1
        cache = _apply_layer(layer, h, cfg.dropout_rate, is_output, train, rng)
        head_layers.append(cache)
        h = cache.out
    return ForwardCache(branch_layers, head_layers, branch_outputs, h[:, 0])


def predict_proba(model, xs):
    """Deterministic P(SZ) per row (eval mode, no dropout)."""
    return forward(model, xs, mode="eval").output


def _check_labels(y, n):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValidationError(f"labels must be 1-D with length {n}")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValidationError("labels must be 0 or 1")
    return y


def data_loss(model, xs, y):
    """Binary cross-entropy of eval-mode predictions, no L2 term."""
    p = predict_proba(model, xs)
    y = _check_labels(y, p.shape[0])
    pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


def _layer_grads(cache, layer, dz):
    dw = cache.inputs.T @ dz + 2.0 * layer.l2_weight * layer.weights
    db = dz.sum(axis=0)
    da_in = dz @ layer.weights.T
    return dw, db, da_in


def _through_dropout_and_sigmoid(da_out, cache, dropout_rate):
    if cache.mask is not None:
        da_out = da_out * cache.mask / (1.0 - dropout_rate)
    return da_out * cache.activated * (1.0 - cache.activated)


def loss_and_grad(model, xs, y, mode="train", rng=None):
    """Total loss (BCE plus L2 penalties, biases excluded) and the
    gradients for every layer in canonical order (branch stacks then
    head). Backpropagation reuses the forward pass's dropout masks.
    """
    cfg = model.config
    cache = forward(model, xs, mode=mode, rng=rng)
    p = cache.output
    y = _check_labels(y, p.shape[0])
    n = p.shape[0]
    pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    loss = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    for _, _, layer in iter_layers(model):
        loss += layer.l2_weight * float(np.sum(layer.weights**2))

    # combined sigmoid + BCE gradient at the output unit
    dz = ((p - y) / n)[:, None]
    head_grads = []
    da = None
    for i in range(len(model.head) - 1, -1, -1):
        lc = cache.head_layers[i]
        layer = model.head[i]
        if i < len(model.head) - 1:
            dz = _through_dropout_and_sigmoid(da, lc, cfg.dropout_rate)
        dw, db, da = _layer_grads(lc, layer, dz)
        head_grads.append((dw, db))
    head_grads.reverse()

    widths = [stack[-1].weights.shape[1] for stack in model.branches]
    splits = np.cumsum(widths)[:-1]
    da_branches = np.split(da, splits, axis=1) if len(widths) > 1 else [da]

    branch_grads = []
    for b in range(len(model.branches)):
        grads = []
        da_b = da_branches[b]
        for i in range(len(model.branches[b]) - 1, -1, -1):
            lc = cache.branch_layers[b][i]
            layer = model.branches[b][i]
            dz = _through_dropout_and_sigmoid(da_b, lc, cfg.dropout_rate)
            dw, db, da_b = _layer_grads(lc, layer, dz)
            grads.append((dw, db))
        grads.reverse()
        branch_grads.extend(grads)
    return loss, branch_grads + head_grads


def iter_layers(model):
    """Yield (branch_tag, index, layer) in canonical order; the head is
    tagged 'merged'.
    """
    for b, stack in enumerate(model.branches):
        for i, layer in enumerate(stack):
            yield str(b), i, layer
    for i, layer in enumerate(model.head):
        yield "merged", i, layer


def _rebuild(model, flat_layers):
    flat = list(flat_layers)
    branches = []
    pos = 0
    for stack in model.branches:
        branches.append(tuple(flat[pos : pos + len(stack)]))
        pos += len(stack)
    head = tuple(flat[pos:])
    return MlpModel(model.config, tuple(branches), head)


@dataclass(frozen=True)
class AdagradState:
    """Per-parameter accumulated squared gradients, canonical order."""

    accumulators: tuple  # of (acc_weights, acc_biases)


def init_adagrad(model):
    return AdagradState(
        tuple(
            (np.zeros_like(layer.weights), np.zeros_like(layer.biases))
            for _, _, layer in iter_layers(model)
        )
    )


def adagrad_step(model, state, grads):
    """One AdaGrad update: acc += g^2, theta -= lr * g / (sqrt(acc) + eps).
    Returns a new model and state; the inputs are left untouched.
    """
    cfg = model.config
    layers = [layer for _, _, layer in iter_layers(model)]
    if len(grads) != len(layers) or len(state.accumulators) != len(layers):
        raise ValidationError("gradient/state structure does not match the model")
    new_layers = []
    new_acc = []
    for layer, (acc_w, acc_b), (gw, gb) in zip(layers, state.accumulators, grads):
        if gw.shape != layer.weights.shape or gb.shape != layer.biases.shape:
            raise ValidationError("gradient shapes do not match the model")
        acc_w = acc_w + gw**2
        acc_b = acc_b + gb**2
        # a zero denominator implies the gradient is zero there, so the
        # substituted divisor never changes an update
        den_w = np.sqrt(acc_w) + cfg.adagrad_epsilon
        den_b = np.sqrt(acc_b) + cfg.adagrad_epsilon
        w = layer.weights - cfg.learning_rate * gw / np.where(den_w > 0.0, den_w, 1.0)
        b = layer.biases - cfg.learning_rate * gb / np.where(den_b > 0.0, den_b, 1.0)
        new_layers.append(LayerWeights(w, b, layer.l2_weight))
        new_acc.append((acc_w, acc_b))
    return _rebuild(model, new_layers), AdagradState(tuple(new_acc))


@dataclass(frozen=True)
class TrainTrace:
    losses: tuple
    batch_indices: tuple

    @property
    def n_steps(self):
        return len(self.losses)


def train_online(model, stream, state=None, rng=None):
    """Consume a batch stream once, in order: one loss_and_grad plus one
    AdaGrad step per batch. Returns (model, state, trace).
    """
    if state is None:
        state = init_adagrad(model)
    losses = []
    indices = []
    for batch in stream:
        if batch is None:
            break
        try:
            loss, grads = loss_and_grad(model, batch.data, batch.labels, mode="train", rng=rng)
        except ValidationError as exc:
            raise ValidationError(f"batch {batch.batch_index}: {exc}") from exc
        model, state = adagrad_step(model, state, grads)
        losses.append(loss)
        indices.append(batch.batch_index)
    return model, state, TrainTrace(tuple(losses), tuple(indices))


def transfer_weights(unimodal_models, config, rng, mode="full"):
    """Initialize a multimodal net from per-modality unimodal nets.

    mode "full" copies every hidden layer of each unimodal stack into
    the matching branch; mode "input-only" copies just the first layer
    and keeps fresh draws for the deeper branch layers. Merged layers
    are always freshly initialized; unimodal output layers are dropped.
    """
    if mode not in ("full", "input-only"):
        raise ValidationError(f"transfer mode must be full or input-only, got {mode!r}")
    models = list(unimodal_models)
    if len(models) != config.n_branches:
        raise ValidationError(
            f"config has {config.n_branches} branches but got {len(models)} unimodal models"
        )
    fresh = init_mlp(config, rng)
    branches = []
    for b, source in enumerate(models):
        if len(source.branches) != 1:
            raise ValidationError(f"branch {b}: source model is not unimodal")
        stack = source.branches[0]
        fresh_stack = fresh.branches[b]
        if len(stack) != len(fresh_stack):
            raise ValidationError(
                f"branch {b}: source has {len(stack)} hidden layers, config needs {len(fresh_stack)}"
            )
        layers = []
        for i, (src, dst) in enumerate(zip(stack, fresh_stack)):
            if src.weights.shape != dst.weights.shape:
                raise ValidationError(
                    f"branch {b}, layer {i}: source shape {src.weights.shape} "
                    f"does not match {dst.weights.shape}"
                )
            if mode == "full" or i == 0:
                layers.append(LayerWeights(src.weights.copy(), src.biases.copy(), dst.l2_weight))
            else:
                layers.append(dst)
        branches.append(tuple(layers))
    return MlpModel(config, tuple(branches), fresh.head)


@dataclass(frozen=True)
class FineTuneResult:
    model: MlpModel
    checkpoints: tuple  # of (epoch, validation data loss)
    best_epoch: int
    best_val_loss: float
    train_rows: tuple
    val_rows: tuple


def fine_tune(model, xs, y, val_fraction=0.1, epochs=1000, eval_every=100,
              batch_size=20, rng=None):
    """Fine-tune on labeled data with a stratified train/validation
    split. Every eval_every epochs the validation data loss (eval mode)
    is checkpointed; the snapshot with the minimum checkpointed loss
    wins (earliest epoch on ties).
    """
    if rng is None:
        rng = RngStream(0)
    if not 0.0 < val_fraction < 1.0:
        raise ValidationError("val_fraction must lie in (0, 1)")
    if epochs < 1 or eval_every < 1 or batch_size < 1:
        raise ValidationError("epochs, eval_every, and batch_size must be >= 1")
    xs = as_branch_inputs(model, xs)
    y = _check_labels(y, xs[0].shape[0])

    train_rows = []
    val_rows = []
    for label in (0.0, 1.0):
        idx = np.where(y == label)[0]
        if idx.size == 0:
            raise StratificationError(f"class {int(label)} absent from fine-tune data")
        perm = rng.permutation(idx.size)
        n_val = int(round(val_fraction * idx.size))
        if n_val < 1:
            raise StratificationError(
                f"class {int(label)} would be absent from the validation split "
                f"({idx.size} samples at val_fraction={val_fraction})"
            )
        if idx.size - n_val < 2:
            raise StratificationError(
                f"class {int(label)} needs at least 2 training samples, has {idx.size - n_val}"
            )
        val_rows.extend(idx[perm[:n_val]].tolist())
        train_rows.extend(idx[perm[n_val:]].tolist())
    train_rows = np.array(sorted(train_rows))
    val_rows = np.array(sorted(val_rows))

    xs_tr = [x[train_rows] for x in xs]
    y_tr = y[train_rows]
    xs_val = [x[val_rows] for x in xs]
    y_val = y[val_rows]
    n_tr = y_tr.shape[0]

    state = init_adagrad(model)
    checkpoints = []
    best_model = model
    best_epoch = 0
    best_loss = np.inf
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_tr)
        for start in range(0, n_tr, batch_size):
            sel = order[start : start + batch_size]
            _, grads = loss_and_grad(model, [x[sel] for x in xs_tr], y_tr[sel], "train", rng)
            model, state = adagrad_step(model, state, grads)
        if epoch % eval_every == 0:
            val_loss = data_loss(model, xs_val, y_val)
            checkpoints.append((epoch, val_loss))
            if val_loss < best_loss:
                best_loss = val_loss
                best_model = model
                best_epoch = epoch
    if not checkpoints:
        # eval_every exceeded epochs; fall back to a single final checkpoint
        best_loss = data_loss(model, xs_val, y_val)
        checkpoints.append((epochs, best_loss))
        best_model = model
        best_epoch = epochs
    return FineTuneResult(
        best_model,
        tuple(checkpoints),
        best_epoch,
        float(best_loss),
        tuple(train_rows.tolist()),
        tuple(val_rows.tolist()),
    )


def save_checkpoint(model, directory, epoch=None, val_loss=None):
    """Persist a model as manifest.json plus one MAT1 blob per layer,
    named layer_<branch>_<index>; each blob is the (fan_in+1) x fan_out
    weight matrix with the bias row appended last.
    """
    from .datamodel import save_matrix

    os.makedirs(directory, exist_ok=True)
    cfg = model.config
    files = {}
    for tag, i, layer in iter_layers(model):
        name = f"layer_{tag}_{i}"
        blob = np.vstack([layer.weights, layer.biases[None, :]])
        save_matrix(blob, os.path.join(directory, name + ".mat"), "bin")
        files[name] = name + ".mat"
    manifest = {
        "kind": "mlp-checkpoint",
        "topology": {
            "branch_input_dims": list(cfg.branch_input_dims),
            "branch_hidden": list(cfg.branch_hidden),
            "merged_hidden": list(cfg.merged_hidden),
            "output_dim": cfg.output_dim,
        },
        "config": {
            "dropout_rate": cfg.dropout_rate,
            "l2_input": cfg.l2_input,
            "l2_rest": cfg.l2_rest,
            "learning_rate": cfg.learning_rate,
            "adagrad_epsilon": cfg.adagrad_epsilon,
        },
        "epoch": epoch,
        "validation_loss": val_loss,
        "files": files,
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory):
    """Load a checkpoint; returns (model, manifest dict)."""
    from .datamodel import load_matrix

    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "mlp-checkpoint":
        raise ValidationError(f"{directory}: manifest is not an mlp checkpoint")
    topo = manifest["topology"]
    cfg = MlpConfig(
        branch_input_dims=tuple(topo["branch_input_dims"]),
        branch_hidden=tuple(topo["branch_hidden"]),
        merged_hidden=tuple(topo["merged_hidden"]),
        output_dim=int(topo["output_dim"]),
        **manifest["config"],
    )
    template = init_mlp(cfg, RngStream(0))
    flat = []
    for tag, i, layer in iter_layers(template):
        name = f"layer_{tag}_{i}"
        blob = load_matrix(os.path.join(directory, manifest["files"][name]), "bin")
        if blob.shape != (layer.weights.shape[0] + 1, layer.weights.shape[1]):
            raise ValidationError(f"{directory}: blob {name} has shape {blob.shape}")
        flat.append(LayerWeights(blob[:-1], blob[-1], layer.l2_weight))
    return _rebuild(template, flat), manifest
