"""Layered autoencoders and beta-VAEs with access to every intermediate
activation, plus training, persistence, and controlled ill-conditioning
injection.

"Layers" here means the post-activation output of each parameterized layer;
a model with layers f_1..f_n therefore exposes n-1 interior split points.
For variational models the latent is the mean half of the encoder output;
attacks and splits use the mean path only, so reconstruction of a fixed
input is deterministic. Sampling noise enters only the training objective.
"""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .spectral import jacobi_svd

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")

MODEL_FORMAT_HEADER = "illcond-model"
MODEL_FORMAT_VERSION = 1


class ModelError(Exception):
    pass


class ModelValidationError(ModelError):
    pass


class ParseError(ModelError):
    def __init__(self, message, byte_offset):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class TrainingError(ModelError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    weight: Tensor     # out x in
    bias: Tensor       # out
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ModelValidationError(f"unknown activation '{self.activation}'")
        if len(self.weight.shape) != 2:
            raise ModelValidationError(f"weight must be 2-D, got shape {self.weight.shape}")
        if len(self.bias.shape) != 1 or self.bias.shape[0] != self.weight.shape[0]:
            raise ModelValidationError(
                f"bias shape {self.bias.shape} does not match weight rows {self.weight.shape[0]}")

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]


class AutoencoderModel:
    """Ordered layer stack f_1..f_n with a designated latent split.

    ``latent_index`` counts encoder layers: layers[:latent_index] form the
    encoder, layers[latent_index:] the decoder. When ``variational`` the
    encoder's final layer emits [mu || log sigma^2] of width 2n and the
    latent is the n-dimensional mu half.
    """

    def __init__(self, layers, latent_index, variational=False, beta=0.0):
        layers = tuple(layers)
        if not layers:
            raise ModelValidationError("model needs at least one layer")
        if not 1 <= latent_index <= len(layers) - 1:
            raise ModelValidationError(
                f"latent_index {latent_index} out of range for {len(layers)} layers")
        if beta < 0:
            raise ModelValidationError("beta must be >= 0")
        enc_out = layers[latent_index - 1].out_dim
        if variational:
            if enc_out % 2 != 0:
                raise ModelValidationError(
                    "variational encoder output width must be even ([mu || logvar])")
            latent_dim = enc_out // 2
        else:
            latent_dim = enc_out
        for i in range(len(layers) - 1):
            expected = layers[i].out_dim
            if variational and i == latent_index - 1:
                expected = latent_dim
            if layers[i + 1].in_dim != expected:
                raise ModelValidationError(
                    f"layer {i + 1} input width {layers[i + 1].in_dim} does not follow "
                    f"layer {i} output width {expected}")
        if layers[-1].out_dim != layers[0].in_dim:
            raise ModelValidationError(
                f"reconstruction must map back to input width {layers[0].in_dim}, "
                f"got {layers[-1].out_dim}")
        if not latent_dim < layers[0].in_dim:
            raise ModelValidationError(
                f"latent dimension {latent_dim} must be smaller than input width "
                f"{layers[0].in_dim}")
        self.layers = layers
        self.latent_index = int(latent_index)
        self.variational = bool(variational)
        self.beta = float(beta)
        self.latent_dim = latent_dim

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def layer_count(self):
        return len(self.layers)

    def __repr__(self):
        widths = [self.input_dim] + [l.out_dim for l in self.layers]
        return (f"AutoencoderModel({'->'.join(str(w) for w in widths)}, "
                f"latent_index={self.latent_index}, variational={self.variational})")


@dataclass
class SplitActivations:
    activations: list   # phi_k(x) for k = 1..n-1 (mu at the latent layer)
    output: Tensor      # full reconstruction


def _activate(name, node):
    if name == "relu":
        return dc.relu(node)
    if name == "tanh":
        return dc.tanh(node)
    if name == "sigmoid":
        return dc.sigmoid(node)
    return node


def _mu_selector(latent_dim):
    # (2n, n) constant picking the mean half of [mu || logvar]
    sel = np.zeros((2 * latent_dim, latent_dim))
    sel[:latent_dim, :] = np.eye(latent_dim)
    return sel


def _logvar_selector(latent_dim):
    sel = np.zeros((2 * latent_dim, latent_dim))
    sel[latent_dim:, :] = np.eye(latent_dim)
    return sel


def _layer_apply(layer, x_node, params, index):
    if params is not None:
        w, b = params[index]
    else:
        w, b = dc.constant(layer.weight), dc.constant(layer.bias)
    return _activate(layer.activation, dc.add(dc.matmul(x_node, dc.transpose(w)), b))


def encoder_graph(model, x_node, params=None):
    """Encoder layers on a (B, d) node. Returns (per-layer activations,
    latent node, extras); extras carries mu/logvar nodes for VAEs.

    The recorded activation of the latent layer is the mu path.
    """
    acts = []
    h = x_node
    extras = {}
    for i in range(model.latent_index):
        h = _layer_apply(model.layers[i], h, params, i)
        if model.variational and i == model.latent_index - 1:
            mu = dc.matmul(h, dc.constant(_mu_selector(model.latent_dim)))
            logvar = dc.matmul(h, dc.constant(_logvar_selector(model.latent_dim)))
            extras["mu"] = mu
            extras["logvar"] = logvar
            h = mu
        acts.append(h)
    return acts, h, extras


def decoder_graph(model, z_node, params=None):
    """Decoder layers on a (B, n) latent node; returns per-layer activations,
    the last being the reconstruction."""
    acts = []
    h = z_node
    for i in range(model.latent_index, model.layer_count):
        h = _layer_apply(model.layers[i], h, params, i)
        acts.append(h)
    return acts


def model_graph(model, x_node, params=None):
    """Full forward on a (B, d) node: (split nodes phi_1..phi_{n-1}, output node)."""
    enc_acts, z, _ = encoder_graph(model, x_node, params)
    dec_acts = decoder_graph(model, z, params)
    return enc_acts + dec_acts[:-1], dec_acts[-1]


def _as_batch(x):
    arr = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr.reshape(1, -1), True
    if arr.ndim == 2:
        return arr, False
    raise ModelError(f"expected a vector or batch of vectors, got shape {arr.shape}")


def _check_width(model, batch):
    if batch.shape[1] != model.input_dim:
        raise ModelError(
            f"input width {batch.shape[1]} does not match model width {model.input_dim}")


def forward_full(model, x):
    """Every interior activation phi_k(x) plus the reconstruction Y(x)."""
    batch, squeeze = _as_batch(x)
    _check_width(model, batch)
    splits, out = model_graph(model, dc.constant(batch))
    if squeeze:
        return SplitActivations([Tensor(s.value[0]) for s in splits], Tensor(out.value[0]))
    return SplitActivations([s.output for s in splits], out.output)


def encode(model, x):
    """Latent code phi(x); the mu path for variational models."""
    batch, squeeze = _as_batch(x)
    _check_width(model, batch)
    _, z, _ = encoder_graph(model, dc.constant(batch))
    return Tensor(z.value[0]) if squeeze else z.output


def decode(model, z):
    """Reconstruction psi(z) from a latent code."""
    batch, squeeze = _as_batch(z)
    if batch.shape[1] != model.latent_dim:
        raise ModelError(
            f"latent width {batch.shape[1]} does not match model latent {model.latent_dim}")
    acts = decoder_graph(model, dc.constant(batch))
    out = acts[-1]
    return Tensor(out.value[0]) if squeeze else out.output


def reconstruct(model, x):
    """Y(x) without the intermediate activations."""
    return forward_full(model, x).output


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    loss_threshold: float = None  # stop early once the epoch loss drops below


class _Adam:
    # descent-direction Adam for training; the attack-side ascent step lives
    # in attacks.adam_step
    def __init__(self, shapes, lr):
        self.lr = lr
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads, b1=0.9, b2=0.999, eps=1e-8):
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + eps))
        return out


def train(model, dataset, config):
    """Gradient training on mean squared reconstruction error, plus a
    beta-weighted KL term against a standard normal prior for VAEs.

    Deterministic given the seed (initial weights come with the model; the
    seed fixes shuffling and reparameterization noise). Returns the trained
    model and the per-epoch loss curve.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise TrainingError("dataset must be a nonempty (N, d) array")
    _check_width(model, data)
    if config.epochs == 0:
        return model, []

    rng = np.random.default_rng(config.seed)
    weights = [np.array(l.weight.values) for l in model.layers]
    biases = [np.array(l.bias.values) for l in model.layers]
    opt = _Adam([w.shape for w in weights] + [b.shape for b in biases], config.lr)
    n = data.shape[0]
    d = data.shape[1]
    curve = []

    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb = data[idx]
            w_nodes = [dc.leaf(w) for w in weights]
            b_nodes = [dc.leaf(b) for b in biases]
            params = list(zip(w_nodes, b_nodes))
            x_node = dc.constant(xb)
            try:
                # the model argument only supplies structure here; the live
                # parameters come in through the leaf nodes
                enc_acts, z, extras = encoder_graph(model, x_node, params)
                if model.variational:
                    mu, logvar = extras["mu"], extras["logvar"]
                    noise = dc.constant(rng.standard_normal(mu.shape))
                    z = dc.add(mu, dc.mul(dc.exp(dc.scalar_mul(logvar, 0.5)), noise))
                dec_acts = decoder_graph(model, z, params)
                recon = dec_acts[-1]
                loss = dc.scalar_mul(dc.sqnorm(dc.subtract(recon, x_node)),
                                     1.0 / (len(idx) * d))
                if model.variational and model.beta > 0.0:
                    # KL(mu, logvar || N(0, I)) summed over latent, averaged over batch
                    kl = dc.scalar_mul(
                        dc.total(dc.subtract(dc.add(dc.mul(mu, mu), dc.exp(logvar)),
                                             dc.add(logvar, 1.0))),
                        0.5 / len(idx))
                    loss = dc.add(loss, dc.scalar_mul(kl, model.beta))
            except dc.EvaluationError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                raise TrainingError(f"training diverged at epoch {epoch}")
            grads = dc.backward(loss)
            g_list = [grads[node].values if node in grads else np.zeros(node.shape)
                      for node in w_nodes + b_nodes]
            updated = opt.step(weights + biases, g_list)
            weights = updated[:len(weights)]
            biases = updated[len(weights):]
            epoch_loss += loss_val
            batches += 1
        curve.append(epoch_loss / batches)
        if config.loss_threshold is not None and curve[-1] < config.loss_threshold:
            break

    return _rebind(model, weights, biases), curve


def _rebind(model, weights, biases):
    layers = [LayerSpec(Tensor(w), Tensor(b), l.activation)
              for w, b, l in zip(weights, biases, model.layers)]
    return AutoencoderModel(layers, model.latent_index, model.variational, model.beta)


def random_autoencoder(widths, latent_index, seed=0, activations=None,
                       variational=False, beta=0.0):
    """Fresh model with fan-in-scaled uniform weights and zero biases.

    ``widths`` is the plain chain d -> ... -> n -> ... -> d; for variational
    models the encoder's final layer is widened to 2n internally.
    """
    widths = [int(w) for w in widths]
    n_layers = len(widths) - 1
    if activations is None:
        activations = ["tanh"] * n_layers
        activations[latent_index - 1] = "identity"
        activations[-1] = "identity"
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(n_layers):
        fan_in, fan_out = widths[i], widths[i + 1]
        if variational and i == latent_index - 1:
            fan_out = 2 * widths[i + 1]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(LayerSpec(Tensor(w), Tensor(np.zeros(fan_out)), activations[i]))
    return AutoencoderModel(layers, latent_index, variational, beta)


# ---------------------------------------------------------------------------
# conditioning injection
# ---------------------------------------------------------------------------

def inject_ill_conditioning(model, layer_index, sigma_floor, count):
    """Rewrite one layer's weight with its ``count`` smallest singular values
    replaced by ``sigma_floor``; all other singular triples are preserved."""
    if not 0 <= layer_index < model.layer_count:
        raise ModelError(f"layer_index {layer_index} out of range")
    if sigma_floor <= 0:
        raise ModelError("sigma_floor must be positive")
    w = model.layers[layer_index].weight.values
    if count < 0 or count > min(w.shape):
        raise ModelError(f"count {count} exceeds layer rank bound {min(w.shape)}")
    if count == 0:
        return model
    u, s, vt = jacobi_svd(w)
    s = s.copy()
    s[len(s) - count:] = sigma_floor
    new_w = (u * s) @ vt
    layers = list(model.layers)
    old = layers[layer_index]
    layers[layer_index] = LayerSpec(Tensor(new_w), old.bias, old.activation)
    return AutoencoderModel(layers, model.latent_index, model.variational, model.beta)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(model, path):
    """Self-describing text format; floats printed with repr so the decimal
    round-trip is bit-exact."""
    lines = [f"{MODEL_FORMAT_HEADER} {MODEL_FORMAT_VERSION}",
             f"layers {model.layer_count}",
             f"latent_index {model.latent_index}",
             f"variational {int(model.variational)}",
             f"beta {model.beta!r}"]
    for i, layer in enumerate(model.layers):
        lines.append(f"layer {i} {layer.activation} {layer.out_dim} {layer.in_dim}")
        for row in layer.weight.values:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(" ".join(repr(float(v)) for v in layer.bias.values))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, text):
        self.text = text
        self.offset = 0

    def next(self, what):
        while True:
            if self.offset >= len(self.text):
                raise ParseError(f"unexpected end of file, expected {what}", self.offset)
            end = self.text.find("\n", self.offset)
            if end == -1:
                end = len(self.text)
            line = self.text[self.offset:end]
            start = self.offset
            self.offset = end + 1
            if line.strip():
                return line.strip(), start


def _parse_floats(line, count, offset, what):
    parts = line.split()
    if len(parts) != count:
        raise ParseError(f"expected {count} values for {what}, found {len(parts)}", offset)
    try:
        return np.array([float(p) for p in parts])
    except ValueError:
        raise ParseError(f"malformed float in {what}", offset) from None


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        reader = _LineReader(fh.read())

    line, off = reader.next("header")
    parts = line.split()
    if len(parts) != 2 or parts[0] != MODEL_FORMAT_HEADER:
        raise ParseError(f"bad header '{line}'", off)
    if parts[1] != str(MODEL_FORMAT_VERSION):
        raise ParseError(f"unsupported format version '{parts[1]}'", off)

    def keyed(key, cast):
        line, off = reader.next(key)
        parts = line.split()
        if len(parts) != 2 or parts[0] != key:
            raise ParseError(f"expected '{key} <value>', got '{line}'", off)
        try:
            return cast(parts[1])
        except ValueError:
            raise ParseError(f"malformed value for '{key}'", off) from None

    n_layers = keyed("layers", int)
    latent_index = keyed("latent_index", int)
    variational = bool(keyed("variational", int))
    beta = keyed("beta", float)

    layers = []
    for i in range(n_layers):
        line, off = reader.next(f"layer {i} header")
        parts = line.split()
        if len(parts) != 5 or parts[0] != "layer":
            raise ParseError(f"expected layer header, got '{line}'", off)
        if parts[1] != str(i):
            raise ParseError(f"layer index mismatch: expected {i}, got '{parts[1]}'", off)
        activation = parts[2]
        if activation not in ACTIVATIONS:
            raise ParseError(f"unknown activation '{activation}'", off)
        try:
            out_dim, in_dim = int(parts[3]), int(parts[4])
        except ValueError:
            raise ParseError("malformed layer dimensions", off) from None
        if out_dim <= 0 or in_dim <= 0:
            raise ParseError("layer dimensions must be positive", off)
        rows = []
        for r in range(out_dim):
            line, off = reader.next(f"layer {i} weight row {r}")
            rows.append(_parse_floats(line, in_dim, off, f"layer {i} weight row {r}"))
        line, off = reader.next(f"layer {i} bias")
        bias = _parse_floats(line, out_dim, off, f"layer {i} bias")
        layers.append(LayerSpec(Tensor(np.stack(rows)), Tensor(bias), activation))

    try:
        return AutoencoderModel(layers, latent_index, variational, beta)
    except ModelValidationError as exc:
        raise ModelValidationError(f"model file {path}: {exc}") from exc
