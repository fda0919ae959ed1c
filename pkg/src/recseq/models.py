"""Task models wiring feature extractors, recurrent stacks and output layers.

Three families of sequence problems share one recurrent core:

  classify        sequential input, one label. Every frame is mapped by the
                  extractor, pushed through the stack, and scored; the
                  per-step class distributions are averaged (late fusion).
  caption         static input, sequential output. The image feature is
                  duplicated at every step and combined with the embedded
                  previous token. With ``factored=True`` the embedding feeds
                  layer 1 alone and the image feature is concatenated onto
                  the input of a higher layer, so the first layer's state is
                  conditionally independent of the image.
  encode_decode   sequential input, sequential output, run as one shared
                  stacked recurrence. The first T steps consume the input
                  vectors; from step T onward the embedded previous output
                  token takes over (begin-of-sequence at step T, where the
                  final input vector is still present), and predictions are
                  emitted until end-of-sequence. Emitting T' tokens costs
                  T + T' - 1 steps.
  perstep_decode  caption wiring where the static visual vector is a
                  precomputed per-class score block (hard one-hot blocks or
                  probability blocks that must each sum to one).

Layer-1 inputs that combine a token embedding with a visual vector always
use the order [embedded token, visual vector].

Training-time losses are teacher forced: the gold previous token is fed at
every step regardless of what the model would have predicted.
"""

from __future__ import annotations

import numpy as np

from . import cells as cells_mod
from .cells import LstmCellParams, RecurrentState, RnnCellParams, _unroll, _unroll_backward
from .features import phi_backward, phi_forward
from .tensor_ops import as_f64, log_softmax, softmax

__all__ = [
    "BOS_TOKEN",
    "EOS_TOKEN",
    "UNK_TOKEN",
    "Vocabulary",
    "EmbeddingParams",
    "PredictionParams",
    "ModelSpec",
    "ModelGrads",
    "build_model",
    "embed",
    "initial_state",
    "classify_sequence",
    "caption_step",
    "caption_log_likelihood",
    "encode_decode",
    "perstep_decode_step",
    "make_stepper",
    "sequence_loss_and_grads",
]

BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"

TASKS = ("classify", "caption", "encode_decode", "perstep_decode")
SIMPLEX_TOL = 1e-6


class Vocabulary:
    """An ordered token inventory with begin/end markers.

    Token strings must be unique and contain no whitespace (corpora are
    stored one sequence per line, space separated).
    """

    def __init__(self, tokens, bos: int, eos: int, unk: int | None = None):
        tokens = tuple(str(t) for t in tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        for t in tokens:
            if not t or any(ch.isspace() for ch in t):
                raise ValueError(f"token {t!r} is empty or contains whitespace")
        for name, idx in (("bos", bos), ("eos", eos)):
            if not 0 <= idx < len(tokens):
                raise ValueError(f"{name} index {idx} out of range")
        if unk is not None and not 0 <= unk < len(tokens):
            raise ValueError(f"unk index {unk} out of range")
        self.tokens = tokens
        self.bos = int(bos)
        self.eos = int(eos)
        self.unk = None if unk is None else int(unk)

    @classmethod
    def from_words(cls, words, with_unk: bool = False) -> "Vocabulary":
        """Build from content words; markers are appended after them."""
        toks = list(words) + [BOS_TOKEN, EOS_TOKEN]
        unk = None
        if with_unk:
            toks.append(UNK_TOKEN)
            unk = len(toks) - 1
        return cls(toks, bos=len(words), eos=len(words) + 1, unk=unk)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def index(self, word: str) -> int:
        try:
            return self.tokens.index(word)
        except ValueError:
            if self.unk is not None:
                return self.unk
            raise ValueError(f"token {word!r} not in vocabulary and no UNK is defined") from None

    def encode(self, words) -> list[int]:
        return [self.index(w) for w in words]

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < self.size:
                raise ValueError(f"token id {i} out of range for vocabulary of {self.size}")
            out.append(self.tokens[i])
        return out

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "bos": self.bos, "eos": self.eos, "unk": self.unk}

    @classmethod
    def from_dict(cls, d) -> "Vocabulary":
        return cls(d["tokens"], d["bos"], d["eos"], d.get("unk"))


class EmbeddingParams:
    """Token embedding W_e with one column per vocabulary entry."""

    def __init__(self, W_e: np.ndarray):
        self.W_e = as_f64(W_e)
        if self.W_e.ndim != 2:
            raise ValueError(f"embedding must be 2-D, got {self.W_e.shape}")
        self.dim, self.vocab_size = self.W_e.shape

    @classmethod
    def init(cls, dim: int, vocab_size: int, rng: np.random.Generator) -> "EmbeddingParams":
        bound = 1.0 / np.sqrt(float(vocab_size))
        return cls(rng.uniform(-bound, bound, size=(dim, vocab_size)))

    def new_zeros(self) -> "EmbeddingParams":
        return EmbeddingParams(np.zeros_like(self.W_e))

    def raw(self):
        return [self.W_e]

    def blocks(self):
        return [("W_e", self.W_e)]


class PredictionParams:
    """Affine output layer producing one logit per class or token."""

    def __init__(self, W_z: np.ndarray, b_z: np.ndarray):
        self.W_z = as_f64(W_z)
        self.b_z = as_f64(b_z)
        if self.W_z.ndim != 2 or self.b_z.shape != (self.W_z.shape[0],):
            raise ValueError(f"prediction shapes {self.W_z.shape}, {self.b_z.shape} are inconsistent")
        self.n_out, self.in_dim = self.W_z.shape

    @classmethod
    def init(cls, n_out: int, in_dim: int, rng: np.random.Generator) -> "PredictionParams":
        bound = 1.0 / np.sqrt(float(in_dim))
        return cls(rng.uniform(-bound, bound, size=(n_out, in_dim)), np.zeros(n_out))

    def new_zeros(self) -> "PredictionParams":
        return PredictionParams(np.zeros_like(self.W_z), np.zeros_like(self.b_z))

    def raw(self):
        return [self.W_z, self.b_z]

    def blocks(self):
        return [("W_z", self.W_z), ("b_z", self.b_z)]


def embed(e: EmbeddingParams, token: int) -> np.ndarray:
    """Embedding column for one token id (equals W_e times its one-hot)."""
    if not 0 <= token < e.vocab_size:
        raise ValueError(f"token id {token} out of range for embedding of {e.vocab_size}")
    return e.W_e[:, token].copy()


class ModelSpec:
    """A complete model: topology description plus all parameters."""

    def __init__(
        self,
        task: str,
        cells: list,
        prediction: PredictionParams,
        extractor=None,
        vocab: Vocabulary | None = None,
        embedding: EmbeddingParams | None = None,
        factored: bool = False,
        inject_layer: int | None = None,
        input_dim: int | None = None,
        visual_mode: str | None = None,
        visual_blocks=None,
    ):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        if not cells:
            raise ValueError("a model needs at least one recurrent layer")
        kinds = {type(c) for c in cells}
        if len(kinds) != 1:
            raise ValueError("all layers must use the same cell type")
        self.task = task
        self.cells = list(cells)
        self.prediction = prediction
        self.extractor = extractor
        self.vocab = vocab
        self.embedding = embedding
        self.factored = bool(factored)
        self.inject_layer = inject_layer
        self.input_dim = input_dim
        self.visual_mode = visual_mode
        self.visual_blocks = None if visual_blocks is None else tuple(int(b) for b in visual_blocks)
        self.n_layers = len(cells)
        self.hidden = cells[-1].n_hidden
        self._validate()

    def _validate(self):
        if self.task == "classify":
            if self.extractor is None:
                raise ValueError("classify models need a feature extractor")
            if self.factored:
                raise ValueError("factored wiring applies to caption models only")
            if self.prediction.n_out < 2:
                raise ValueError("classification needs at least two classes")
        else:
            if self.vocab is None or self.embedding is None:
                raise ValueError(f"{self.task} models need a vocabulary and an embedding")
            if self.embedding.vocab_size != self.vocab.size:
                raise ValueError("embedding width does not match vocabulary size")
            if self.prediction.n_out != self.vocab.size:
                raise ValueError("prediction layer must cover the whole vocabulary")
        if self.task == "caption":
            if self.extractor is None:
                raise ValueError("caption models need a feature extractor")
            if self.n_layers not in (1, 2):
                raise ValueError("caption models support one or two layers")
            if self.factored:
                if self.n_layers < 2:
                    raise ValueError("factored caption models need at least two layers")
                if self.inject_layer is None or not 2 <= self.inject_layer <= self.n_layers:
                    raise ValueError("factored models must inject the image feature at a layer >= 2")
            elif self.inject_layer is not None:
                raise ValueError("inject_layer is only meaningful for factored models")
        elif self.factored:
            raise ValueError("factored wiring applies to caption models only")
        if self.task in ("encode_decode", "perstep_decode") and not self.input_dim:
            raise ValueError(f"{self.task} models need input_dim")
        if self.visual_blocks is not None and self.task == "perstep_decode":
            if sum(self.visual_blocks) != self.input_dim:
                raise ValueError("visual block sizes must sum to the visual vector length")
        if self.visual_mode not in (None, "max", "prob"):
            raise ValueError(f"unknown visual_mode {self.visual_mode!r}")

    @property
    def cell_kind(self) -> str:
        return "lstm" if isinstance(self.cells[0], LstmCellParams) else "rnn"

    @property
    def visual_dim(self) -> int | None:
        """Width of the static vector available to decode-style steps."""
        if self.task == "caption":
            return self.extractor.out_dim
        if self.task == "perstep_decode":
            return self.input_dim
        return None

    def blocks(self):
        """All named parameter arrays, in a stable order."""
        out = []
        if self.extractor is not None:
            out.extend((f"phi.{n}", a) for n, a in self.extractor.blocks())
        for idx, cell in enumerate(self.cells):
            out.extend((f"cell{idx}.{n}", a) for n, a in cell.blocks())
        if self.embedding is not None:
            out.extend((f"embed.{n}", a) for n, a in self.embedding.blocks())
        out.extend((f"pred.{n}", a) for n, a in self.prediction.blocks())
        return out

    def raw(self):
        """Backing arrays, aligned with :meth:`ModelGrads.raw`."""
        out = []
        if self.extractor is not None:
            out.extend(self.extractor.raw())
        for cell in self.cells:
            out.extend(cell.raw())
        if self.embedding is not None:
            out.extend(self.embedding.raw())
        out.extend(self.prediction.raw())
        return out

    def param_count(self) -> int:
        return sum(a.size for _, a in self.blocks())

    def _inject_args(self, visual):
        """(inject vector, 0-based layer) for the unroll engine."""
        if self.task == "caption" and self.factored:
            return visual, self.inject_layer - 1
        return None, None


class ModelGrads:
    """Gradient arrays mirroring a model's parameters."""

    def __init__(self, m: ModelSpec):
        self.extractor = [np.zeros_like(a) for a in m.extractor.raw()] if m.extractor is not None else []
        self._ext_names = [n for n, _ in m.extractor.blocks()] if m.extractor is not None else []
        self.cells = [c.new_zeros() for c in m.cells]
        self.embedding = m.embedding.new_zeros() if m.embedding is not None else None
        self.prediction = m.prediction.new_zeros()

    def blocks(self):
        out = []
        out.extend((f"phi.{n}", a) for n, a in zip(self._ext_names, self.extractor))
        for idx, cell in enumerate(self.cells):
            out.extend((f"cell{idx}.{n}", a) for n, a in cell.blocks())
        if self.embedding is not None:
            out.extend((f"embed.{n}", a) for n, a in self.embedding.blocks())
        out.extend((f"pred.{n}", a) for n, a in self.prediction.blocks())
        return out

    def raw(self):
        out = list(self.extractor)
        for cell in self.cells:
            out.extend(cell.raw())
        if self.embedding is not None:
            out.extend(self.embedding.raw())
        out.extend(self.prediction.raw())
        return out

    def add_extractor(self, grad_dict):
        for idx, name in enumerate(self._ext_names):
            self.extractor[idx] += grad_dict[name]

    def global_norm(self) -> float:
        total = 0.0
        for a in self.raw():
            total += float(np.sum(a * a))
        return float(np.sqrt(total))

    def scale(self, factor: float):
        for a in self.raw():
            a *= factor


def build_model(
    task: str,
    *,
    rng: np.random.Generator,
    hidden: int,
    layers: int = 1,
    cell: str = "lstm",
    rnn_nonlinearity: str = "tanh",
    extractor=None,
    n_classes: int | None = None,
    vocab: Vocabulary | None = None,
    embed_dim: int | None = None,
    input_dim: int | None = None,
    factored: bool = False,
    inject_layer: int | None = None,
    visual_mode: str | None = None,
    visual_blocks=None,
) -> ModelSpec:
    """Construct a freshly initialized model for one of the four tasks."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if cell not in ("lstm", "rnn"):
        raise ValueError(f"unknown cell kind {cell!r}")
    if factored and inject_layer is None:
        inject_layer = 2

    embedding = None
    if task == "classify":
        if extractor is None:
            raise ValueError("classify needs an extractor")
        if n_classes is None:
            raise ValueError("classify needs n_classes")
        first_in = extractor.out_dim
        n_out = n_classes
    elif task == "caption":
        if extractor is None or vocab is None or embed_dim is None:
            raise ValueError("caption needs an extractor, a vocabulary and embed_dim")
        embedding = EmbeddingParams.init(embed_dim, vocab.size, rng)
        first_in = embed_dim if factored else embed_dim + extractor.out_dim
        n_out = vocab.size
    else:
        if vocab is None or embed_dim is None or input_dim is None:
            raise ValueError(f"{task} needs a vocabulary, embed_dim and input_dim")
        embedding = EmbeddingParams.init(embed_dim, vocab.size, rng)
        first_in = embed_dim + input_dim
        n_out = vocab.size

    visual = extractor.out_dim if task == "caption" else input_dim
    layer_cells = []
    for idx in range(layers):
        in_dim = first_in if idx == 0 else hidden
        if factored and inject_layer is not None and idx == inject_layer - 1:
            in_dim += visual
        if cell == "lstm":
            layer_cells.append(LstmCellParams.init(hidden, in_dim, rng))
        else:
            layer_cells.append(RnnCellParams.init(hidden, in_dim, rng, rnn_nonlinearity))
    prediction = PredictionParams.init(n_out, hidden, rng)
    return ModelSpec(
        task,
        layer_cells,
        prediction,
        extractor=extractor,
        vocab=vocab,
        embedding=embedding,
        factored=factored,
        inject_layer=inject_layer if factored else None,
        input_dim=input_dim,
        visual_mode=visual_mode,
        visual_blocks=visual_blocks,
    )


def initial_state(m: ModelSpec) -> RecurrentState:
    """All-zero hidden and cell vectors for every layer."""
    return RecurrentState.zeros(m.cells)


def _logits(m: ModelSpec, top_h: np.ndarray) -> np.ndarray:
    return m.prediction.W_z @ top_h + m.prediction.b_z


def _check_token(m: ModelSpec, token: int):
    if not 0 <= token < m.vocab.size:
        raise ValueError(f"token id {token} out of range for vocabulary of {m.vocab.size}")


def _check_visual(m: ModelSpec, v: np.ndarray, expect_dim: int) -> np.ndarray:
    v = as_f64(v)
    if v.shape != (expect_dim,):
        raise ValueError(f"visual vector has shape {v.shape}, model expects ({expect_dim},)")
    return v


def _check_simplex_blocks(m: ModelSpec, v: np.ndarray):
    """CRF-style probability inputs must be block-wise normalized."""
    if m.task != "perstep_decode" or m.visual_mode != "prob" or not m.visual_blocks:
        return
    offset = 0
    for idx, width in enumerate(m.visual_blocks):
        total = float(np.sum(v[offset:offset + width]))
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"visual block {idx} sums to {total!r}, expected 1 within {SIMPLEX_TOL}")
        offset += width


def _decode_step(m: ModelSpec, visual: np.ndarray, prev_token: int, state: RecurrentState):
    """Shared single step for caption and per-step decode wiring."""
    _check_token(m, prev_token)
    e = m.embedding.W_e[:, prev_token]
    inject, inject_layer = m._inject_args(visual)
    u = e if inject is not None else np.concatenate([e, visual])
    hs, new_state, _ = _unroll(m.cells, [u], initial=state, inject=inject, inject_layer=inject_layer)
    return _logits(m, hs[-1][0]), new_state


def caption_step(m: ModelSpec, img_feat: np.ndarray, prev_token: int, state: RecurrentState):
    """One decoding step of a caption model.

    img_feat is the extracted image feature (the same vector at every
    step). Returns (distribution over the vocabulary, new state).
    """
    if m.task != "caption":
        raise ValueError(f"caption_step called on a {m.task} model")
    v = _check_visual(m, img_feat, m.visual_dim)
    logits, new_state = _decode_step(m, v, prev_token, state)
    return softmax(logits), new_state


def perstep_decode_step(m: ModelSpec, visual_vec: np.ndarray, prev_token: int, state: RecurrentState):
    """One decoding step driven by a precomputed per-class score vector."""
    if m.task != "perstep_decode":
        raise ValueError(f"perstep_decode_step called on a {m.task} model")
    v = _check_visual(m, visual_vec, m.visual_dim)
    _check_simplex_blocks(m, v)
    logits, new_state = _decode_step(m, v, prev_token, state)
    return softmax(logits), new_state


def _require_eos_terminated(m: ModelSpec, tokens):
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ValueError("token sequence is empty")
    for t in tokens:
        _check_token(m, t)
    if tokens[-1] != m.vocab.eos:
        raise ValueError("token sequence must end with the EOS token")
    return tokens


def _teacher_inputs(m: ModelSpec, tokens):
    """Previous-token ids under teacher forcing: BOS then the gold prefix."""
    return [m.vocab.bos] + tokens[:-1]


def _token_visual_unroll(m: ModelSpec, visual: np.ndarray, tokens, drop=None):
    """Teacher-forced unroll for caption / perstep wiring.

    Returns (prev_ids, hs, caches, inject_layer_index).
    """
    prev = _teacher_inputs(m, tokens)
    inject, inject_layer = m._inject_args(visual)
    if inject is not None:
        us = [m.embedding.W_e[:, p] for p in prev]
    else:
        us = [np.concatenate([m.embedding.W_e[:, p], visual]) for p in prev]
    hs, _, caches = _unroll(m.cells, us, inject=inject, inject_layer=inject_layer, drop=drop)
    return prev, hs, caches, inject_layer


def caption_log_likelihood(m: ModelSpec, img_feat: np.ndarray, tokens) -> float:
    """Teacher-forced log likelihood of a caption (ending in EOS)."""
    if m.task not in ("caption", "perstep_decode"):
        raise ValueError(f"caption_log_likelihood called on a {m.task} model")
    v = _check_visual(m, img_feat, m.visual_dim)
    if m.task == "perstep_decode":
        _check_simplex_blocks(m, v)
    tokens = _require_eos_terminated(m, tokens)
    _, hs, _, _ = _token_visual_unroll(m, v, tokens)
    total = 0.0
    for t, target in enumerate(tokens):
        total += float(log_softmax(_logits(m, hs[-1][t]))[target])
    return total


def classify_sequence(m: ModelSpec, frames) -> np.ndarray:
    """Late-fusion class distribution: the mean of per-step softmaxes."""
    if m.task != "classify":
        raise ValueError(f"classify_sequence called on a {m.task} model")
    frames = as_f64(frames)
    if len(frames) == 0:
        raise ValueError("classify_sequence needs at least one frame")
    feats = [phi_forward(m.extractor, fr)[0] for fr in frames]
    hs, _, _ = _unroll(m.cells, feats)
    dists = [softmax(_logits(m, h)) for h in hs[-1]]
    return np.mean(dists, axis=0)


def _encdec_inputs(m: ModelSpec, inputs, prev_ids):
    """Layer-1 inputs for the shared encoder/decoder recurrence.

    Every step sees [token slot, input slot]. Encoder steps carry an input
    vector and a zero token slot; decoder steps carry an embedded previous
    token and a zero input slot. The boundary step carries both the final
    input vector and the embedded begin marker.
    """
    d_e = m.embedding.dim
    d_in = m.input_dim
    zero_e = np.zeros(d_e)
    zero_x = np.zeros(d_in)
    us = []
    n_enc = len(inputs) - 1
    for t in range(n_enc):
        us.append(np.concatenate([zero_e, inputs[t]]))
    for j, p in enumerate(prev_ids):
        x_slot = inputs[-1] if j == 0 else zero_x
        us.append(np.concatenate([m.embedding.W_e[:, p], x_slot]))
    return us


def encode_decode(m: ModelSpec, inputs, max_out_len: int):
    """Run the encoder over ``inputs`` then decode greedily.

    Returns the list of emitted distributions over the vocabulary, one per
    produced token, stopping after EOS or ``max_out_len`` emissions.
    """
    if m.task != "encode_decode":
        raise ValueError(f"encode_decode called on a {m.task} model")
    state, step = make_stepper(m, inputs)
    dists = []
    prev = m.vocab.bos
    for t in range(max_out_len):
        logp, state = step(state, prev, t)
        dists.append(np.exp(logp))
        prev = int(np.argmax(logp))
        if prev == m.vocab.eos:
            break
    return dists


def make_stepper(m: ModelSpec, features):
    """Incremental decoding interface shared by all decoding strategies.

    ``features`` is the model-level conditioning input: the raw image for a
    caption model (the extractor is applied here), the visual score vector
    for per-step decoding, or the sequence of input vectors for an
    encoder-decoder.

    Returns (initial state, step) where step(state, prev_token, t) yields
    (log distribution over the vocabulary, new state). ``t`` counts emitted
    tokens starting at zero; states are never mutated, so hypotheses may
    branch freely.
    """
    if m.task == "caption":
        v, _ = phi_forward(m.extractor, as_f64(features))

        def step(state, prev_token, t):
            logits, new_state = _decode_step(m, v, prev_token, state)
            return log_softmax(logits), new_state

        return initial_state(m), step

    if m.task == "perstep_decode":
        v = _check_visual(m, features, m.visual_dim)
        _check_simplex_blocks(m, v)

        def step(state, prev_token, t):
            logits, new_state = _decode_step(m, v, prev_token, state)
            return log_softmax(logits), new_state

        return initial_state(m), step

    if m.task == "encode_decode":
        inputs = as_f64(features)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise ValueError(f"encoder input must be a non-empty (T, d) array, got {inputs.shape}")
        if inputs.shape[1] != m.input_dim:
            raise ValueError(f"encoder input width {inputs.shape[1]}, model expects {m.input_dim}")
        d_e = m.embedding.dim
        zero_e = np.zeros(d_e)
        zero_x = np.zeros(m.input_dim)
        enc_us = [np.concatenate([zero_e, inputs[t]]) for t in range(len(inputs) - 1)]
        if enc_us:
            _, enc_state, _ = _unroll(m.cells, enc_us)
        else:
            enc_state = initial_state(m)
        boundary_x = inputs[-1]

        def step(state, prev_token, t):
            _check_token(m, prev_token)
            x_slot = boundary_x if t == 0 else zero_x
            u = np.concatenate([m.embedding.W_e[:, prev_token], x_slot])
            hs, new_state, _ = _unroll(m.cells, [u], initial=state)
            return log_softmax(_logits(m, hs[-1][0])), new_state

        return enc_state, step

    raise ValueError(f"{m.task} models do not emit token sequences")


def _emit_losses(m: ModelSpec, tops, emit_steps, targets, want_grads, scale):
    """Cross entropy at the emitting steps.

    Returns (total nll, per-emission nll list, scaled dlogits by step).
    """
    total = 0.0
    per_step = []
    dlogits = {}
    for j, t in enumerate(emit_steps):
        lp = log_softmax(_logits(m, tops[t]))
        target = targets[j]
        nll = -float(lp[target])
        total += nll
        per_step.append(nll)
        if want_grads:
            dl = np.exp(lp)
            dl[target] -= 1.0
            dlogits[t] = dl * scale
    return total, per_step, dlogits


def _prediction_backward(m: ModelSpec, tops, dlogits, n_steps, grads):
    """Accumulate output-layer gradients; return per-step gradients on h."""
    d_top = [None] * n_steps
    for t, dl in dlogits.items():
        grads.prediction.W_z += np.outer(dl, tops[t])
        grads.prediction.b_z += dl
        d_top[t] = m.prediction.W_z.T @ dl
    return d_top


def sequence_loss_and_grads(m: ModelSpec, example, grads: ModelGrads | None = None, scale: float = 1.0, drop=None):
    """Negative log likelihood of one example, optionally with gradients.

    ``example`` is task dependent:
      classify:        (frames, label)
      caption:         (image, tokens)
      encode_decode:   (inputs, target tokens)
      perstep_decode:  (visual vector, tokens)

    When ``grads`` is given, parameter gradients scaled by ``scale`` are
    accumulated into it. ``drop`` is an optional (p, rng) pair applied to
    every recurrent layer input during the forward pass.

    Returns (nll, per-step nll list). The loss sums -log P over all
    predicted positions of the sequence.
    """
    if m.task == "classify":
        return _classify_loss(m, example, grads, scale, drop)
    if m.task == "caption":
        return _caption_loss(m, example, grads, scale, drop)
    if m.task == "encode_decode":
        return _encdec_loss(m, example, grads, scale, drop)
    return _perstep_loss(m, example, grads, scale, drop)


def _classify_loss(m, example, grads, scale, drop):
    frames, label = example
    frames = as_f64(frames)
    if len(frames) == 0:
        raise ValueError("classification example has no frames")
    if not 0 <= int(label) < m.prediction.n_out:
        raise ValueError(f"label {label} out of range for {m.prediction.n_out} classes")
    label = int(label)
    feats = []
    fcaches = []
    for fr in frames:
        v, c = phi_forward(m.extractor, fr)
        feats.append(v)
        fcaches.append(c)
    hs, _, caches = _unroll(m.cells, feats, drop=drop)
    tops = hs[-1]
    n_steps = len(tops)
    total, per_step, dlogits = _emit_losses(m, tops, range(n_steps), [label] * n_steps, grads is not None, scale)
    if grads is not None:
        d_top = _prediction_backward(m, tops, dlogits, n_steps, grads)
        d_xs, _, _, _ = _unroll_backward(m.cells, caches, d_top, grad_accs=grads.cells)
        for t in range(n_steps):
            _, ext_g = phi_backward(m.extractor, fcaches[t], d_xs[t])
            grads.add_extractor(ext_g)
    return total, per_step


def _caption_loss(m, example, grads, scale, drop):
    image, tokens = example
    tokens = _require_eos_terminated(m, tokens)
    v, vcache = phi_forward(m.extractor, as_f64(image))
    prev, hs, caches, inject_layer = _token_visual_unroll(m, v, tokens, drop=drop)
    tops = hs[-1]
    n_steps = len(tops)
    total, per_step, dlogits = _emit_losses(m, tops, range(n_steps), tokens, grads is not None, scale)
    if grads is not None:
        d_top = _prediction_backward(m, tops, dlogits, n_steps, grads)
        d_us, d_inject, _, _ = _unroll_backward(
            m.cells, caches, d_top,
            inject_dim=0 if inject_layer is None else m.visual_dim,
            inject_layer=inject_layer,
            grad_accs=grads.cells,
        )
        d_e = m.embedding.dim
        dv = np.zeros(m.visual_dim)
        for t in range(n_steps):
            if inject_layer is None:
                grads.embedding.W_e[:, prev[t]] += d_us[t][:d_e]
                dv += d_us[t][d_e:]
            else:
                grads.embedding.W_e[:, prev[t]] += d_us[t]
        if inject_layer is not None:
            dv = d_inject
        _, ext_g = phi_backward(m.extractor, vcache, dv)
        grads.add_extractor(ext_g)
    return total, per_step


def _encdec_loss(m, example, grads, scale, drop):
    inputs, targets = example
    inputs = as_f64(inputs)
    if inputs.ndim != 2 or inputs.shape[0] < 1:
        raise ValueError(f"encoder input must be a non-empty (T, d) array, got {inputs.shape}")
    if inputs.shape[1] != m.input_dim:
        raise ValueError(f"encoder input width {inputs.shape[1]}, model expects {m.input_dim}")
    targets = _require_eos_terminated(m, targets)
    prev = _teacher_inputs(m, targets)
    us = _encdec_inputs(m, inputs, prev)
    hs, _, caches = _unroll(m.cells, us, drop=drop)
    tops = hs[-1]
    n_steps = len(tops)
    n_enc = len(inputs) - 1
    emit_steps = range(n_enc, n_steps)
    total, per_step, dlogits = _emit_losses(m, tops, emit_steps, targets, grads is not None, scale)
    if grads is not None:
        d_top = _prediction_backward(m, tops, dlogits, n_steps, grads)
        d_us, _, _, _ = _unroll_backward(m.cells, caches, d_top, grad_accs=grads.cells)
        d_e = m.embedding.dim
        for j, p in enumerate(prev):
            grads.embedding.W_e[:, p] += d_us[n_enc + j][:d_e]
    return total, per_step


def _perstep_loss(m, example, grads, scale, drop):
    visual, tokens = example
    v = _check_visual(m, visual, m.visual_dim)
    _check_simplex_blocks(m, v)
    tokens = _require_eos_terminated(m, tokens)
    prev, hs, caches, _ = _token_visual_unroll(m, v, tokens, drop=drop)
    tops = hs[-1]
    n_steps = len(tops)
    total, per_step, dlogits = _emit_losses(m, tops, range(n_steps), tokens, grads is not None, scale)
    if grads is not None:
        d_top = _prediction_backward(m, tops, dlogits, n_steps, grads)
        d_us, _, _, _ = _unroll_backward(m.cells, caches, d_top, grad_accs=grads.cells)
        d_e = m.embedding.dim
        for t in range(n_steps):
            grads.embedding.W_e[:, prev[t]] += d_us[t][:d_e]
    return total, per_step
