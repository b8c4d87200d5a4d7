"""Attack objectives and the constrained Adam ascent loop, in universal and
sample-specific modes, plus projections and attack evaluation.

The optimizer maximizes, so updates move along +gradient. Distortions are
summed over the batch, not averaged; fold any rescaling into the step size.
A non-finite objective aborts the run with its step index: gradient
pathologies are the object of study here, so nothing is clamped or skipped.
"""

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import models as md
from .diffcore import Tensor
from .distances import DISTANCE_KINDS, DistanceError, batch_distortion
from .spectral import svd_extremes

STRATEGIES = ("oa", "la", "lgr", "grill", "grill-sum")
WEIGHTINGS = ("equal", "random", "invkappa")
NORMS = ("inf", "l2")

GRAD_RESERVOIR_CAP = 100_000


class AttackError(Exception):
    pass


class ConfigError(AttackError):
    pass


@dataclass
class AttackConfig:
    strategy: str
    distance: str
    eps: float
    norm: str = "inf"
    steps: int = 500
    step_size: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    init_scale: float = None   # defaults to eps / 100
    layer_fraction: float = 1.0
    weighting: str = "equal"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy '{self.strategy}'")
        if self.distance not in DISTANCE_KINDS:
            raise ConfigError(f"unknown distance '{self.distance}'")
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm '{self.norm}'")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.init_scale is None:
            self.init_scale = self.eps / 100.0
        if not 0 < self.init_scale < self.eps:
            raise ConfigError("init_scale must satisfy 0 < xi < eps")
        if not 0 < self.layer_fraction <= 1:
            raise ConfigError("layer_fraction must lie in (0, 1]")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"unknown weighting '{self.weighting}'")


@dataclass
class Perturbation:
    rho: Tensor


@dataclass
class AttackTrace:
    objectives: list = field(default_factory=list)        # per step, summed over batches
    eval_distortions: list = field(default_factory=list)  # per step, mean output L2
    budget_norms: list = field(default_factory=list)      # per step, ||rho||_p post-projection
    grad_samples: np.ndarray = None                       # reservoir-sampled partials
    grad_sample_cap: int = GRAD_RESERVOIR_CAP


class AdamState:
    """First/second moment accumulators for one perturbation tensor."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS_HAT = 1e-8

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0


def adam_step(state, rho, grad, step_size):
    """Bias-corrected Adam update in the +gradient (ascent) direction."""
    g = np.asarray(grad, dtype=np.float64)
    state.t += 1
    state.m = AdamState.BETA1 * state.m + (1 - AdamState.BETA1) * g
    state.v = AdamState.BETA2 * state.v + (1 - AdamState.BETA2) * g * g
    mhat = state.m / (1 - AdamState.BETA1 ** state.t)
    vhat = state.v / (1 - AdamState.BETA2 ** state.t)
    new_rho = np.asarray(rho, dtype=np.float64) + step_size * mhat / (np.sqrt(vhat) + AdamState.EPS_HAT)
    return state, new_rho


def project(rho, eps, norm="inf"):
    """Projection onto the L_inf or L2 ball of radius eps; idempotent and a
    no-op inside the ball."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    if norm in ("inf", np.inf, float("inf")):
        is_tensor = isinstance(rho, Tensor)
        arr = rho.values if is_tensor else np.asarray(rho, dtype=np.float64)
        out = np.clip(arr, -eps, eps)
        return Tensor(out) if is_tensor else out
    if norm in ("l2", 2):
        is_tensor = isinstance(rho, Tensor)
        arr = np.array(rho.values if is_tensor else rho, dtype=np.float64)
        n = np.sqrt(np.sum(arr * arr))
        # rescale can land one ulp outside; iterate so a fixed point inside
        # the ball is reached and re-projection is an exact no-op
        for _ in range(10):
            if n <= eps:
                break
            arr = arr * (eps / n)
            n = np.sqrt(np.sum(arr * arr))
        return Tensor(arr) if is_tensor else arr
    raise ConfigError(f"unknown norm '{norm}'")


def _rho_norm(rho, norm):
    if norm == "inf":
        return float(np.max(np.abs(rho))) if rho.size else 0.0
    return float(np.sqrt(np.sum(rho * rho)))


# ---------------------------------------------------------------------------
# split selection and weighting for the layer-aggregated objective
# ---------------------------------------------------------------------------

def select_splits(layer_count, latent_index, layer_fraction):
    """The ceil(fraction * (n-1)) split indices nearest the latent, spreading
    latent-outward; encoder-side splits win distance ties."""
    n_splits = layer_count - 1
    if n_splits < 1:
        raise ConfigError("aggregated objective needs at least two layers")
    take = int(np.ceil(layer_fraction * n_splits))
    if take < 1:
        raise ConfigError("layer_fraction selects zero splits")
    order = sorted(range(1, layer_count), key=lambda k: (abs(k - latent_index), k))
    return sorted(order[:take])


def split_weight_values(model, split_ids, weighting, rng=None):
    """Per-split weights: equal (all ones), random (seeded, normalized), or
    inverse condition number (normalized; structurally infinite kappa gets
    weight zero)."""
    if weighting == "equal":
        return np.ones(len(split_ids))
    if weighting == "random":
        if rng is None:
            rng = np.random.default_rng(0)
        w = rng.uniform(0.0, 1.0, len(split_ids))
        return w / w.sum()
    if weighting == "invkappa":
        w = np.zeros(len(split_ids))
        for i, k in enumerate(split_ids):
            ext = svd_extremes(model.layers[k - 1].weight)
            if not ext.kappa_infinite:
                w[i] = 1.0 / ext.kappa
        if w.sum() == 0.0:
            raise ConfigError("all selected splits have infinite condition number")
        return w / w.sum()
    raise ConfigError(f"unknown weighting '{weighting}'")


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def _clean_forward(model, xb):
    splits, out = md.model_graph(model, dc.constant(xb))
    return [s.value for s in splits], out.value


def _adv_forward(model, xb, rho_node):
    x_adv = dc.add(dc.constant(xb), rho_node)
    return md.model_graph(model, x_adv)


def _lift_rho(rho):
    return rho if isinstance(rho, dc.Node) else dc.constant(rho)


def _objective(strategy, distance, splits_adv, out_adv, clean, latent_index,
               split_ids=None, weights=None):
    """Assemble any strategy's objective from adversarial forward nodes and
    the cached clean activations."""
    clean_splits, clean_out = clean
    if strategy == "oa":
        return batch_distortion(distance, out_adv, dc.constant(clean_out))
    if strategy == "la":
        return batch_distortion(distance, splits_adv[latent_index - 1],
                                dc.constant(clean_splits[latent_index - 1]))
    if strategy == "lgr":
        d_lat = batch_distortion(distance, splits_adv[latent_index - 1],
                                 dc.constant(clean_splits[latent_index - 1]))
        d_out = batch_distortion(distance, out_adv, dc.constant(clean_out))
        return dc.mul(d_lat, d_out)
    if strategy == "grill":
        d_out = batch_distortion(distance, out_adv, dc.constant(clean_out))
        acc = None
        for k, w in zip(split_ids, weights):
            d_k = batch_distortion(distance, splits_adv[k - 1],
                                   dc.constant(clean_splits[k - 1]))
            term = dc.scalar_mul(d_k, float(w))
            acc = term if acc is None else dc.add(acc, term)
        return dc.mul(d_out, acc)
    if strategy == "grill-sum":
        acc = batch_distortion(distance, out_adv, dc.constant(clean_out))
        for k in range(1, len(splits_adv) + 1):
            d_k = batch_distortion(distance, splits_adv[k - 1],
                                   dc.constant(clean_splits[k - 1]))
            acc = dc.add(acc, d_k)
        return acc
    raise ConfigError(f"unknown strategy '{strategy}'")


def loss_oa(model, x_batch, rho, distance, clean=None):
    """Output-space objective: summed distortion between reconstructions."""
    rho_node = _lift_rho(rho)
    xb = np.asarray(x_batch, dtype=np.float64)
    clean = clean or _clean_forward(model, xb)
    splits_adv, out_adv = _adv_forward(model, xb, rho_node)
    return _objective("oa", distance, splits_adv, out_adv, clean, model.latent_index)


def loss_la(model, x_batch, rho, distance, clean=None):
    """Latent-space objective: summed distortion between latent codes (the
    mu path for variational models)."""
    rho_node = _lift_rho(rho)
    xb = np.asarray(x_batch, dtype=np.float64)
    if clean is None:
        z_clean = md.encode(model, xb).values
    else:
        z_clean = clean[0][model.latent_index - 1]
    x_adv = dc.add(dc.constant(xb), rho_node)
    _, z_adv, _ = md.encoder_graph(model, x_adv)
    return batch_distortion(distance, z_adv, dc.constant(z_clean))


def loss_lgr(model, x_batch, rho, distance, clean=None):
    """Product of the summed latent and output distortions; either factor's
    gradient is rescued by the other's magnitude when one path goes flat."""
    rho_node = _lift_rho(rho)
    xb = np.asarray(x_batch, dtype=np.float64)
    clean = clean or _clean_forward(model, xb)
    splits_adv, out_adv = _adv_forward(model, xb, rho_node)
    return _objective("lgr", distance, splits_adv, out_adv, clean, model.latent_index)


def loss_grill(model, x_batch, rho, distance, layer_fraction=1.0,
               weighting="equal", clean=None, split_ids=None, weights=None, rng=None):
    """Aggregated objective over encoder/decoder splits:
    delta_out * sum_k w_k delta_k."""
    rho_node = _lift_rho(rho)
    xb = np.asarray(x_batch, dtype=np.float64)
    clean = clean or _clean_forward(model, xb)
    if split_ids is None:
        split_ids = select_splits(model.layer_count, model.latent_index, layer_fraction)
    if weights is None:
        weights = split_weight_values(model, split_ids, weighting, rng)
    splits_adv, out_adv = _adv_forward(model, xb, rho_node)
    return _objective("grill", distance, splits_adv, out_adv, clean,
                      model.latent_index, split_ids, weights)


def loss_grill_sum(model, x_batch, rho, distance, clean=None):
    """Ablation baseline: plain sum delta_out + sum_k delta_k over all splits."""
    rho_node = _lift_rho(rho)
    xb = np.asarray(x_batch, dtype=np.float64)
    clean = clean or _clean_forward(model, xb)
    splits_adv, out_adv = _adv_forward(model, xb, rho_node)
    return _objective("grill-sum", distance, splits_adv, out_adv, clean,
                      model.latent_index)


# ---------------------------------------------------------------------------
# optimization loop
# ---------------------------------------------------------------------------

class _Reservoir:
    """Uniform reservoir over a stream of gradient entries (algorithm R,
    vectorized over incoming chunks)."""

    def __init__(self, cap, rng):
        self.cap = cap
        self.rng = rng
        self.buf = np.empty(cap)
        self.seen = 0
        self.filled = 0

    def add(self, values):
        vals = np.asarray(values, dtype=np.float64).reshape(-1)
        i = 0
        if self.filled < self.cap:
            take = min(self.cap - self.filled, vals.size)
            self.buf[self.filled:self.filled + take] = vals[:take]
            self.filled += take
            self.seen += take
            i = take
        rest = vals[i:]
        if rest.size:
            slots = self.rng.integers(1, self.seen + 1 + np.arange(1, rest.size + 1))
            keep = slots <= self.cap
            self.buf[slots[keep] - 1] = rest[keep]
            self.seen += rest.size

    def values(self):
        return np.array(self.buf[:self.filled])


def run_attack_loop(model, dataset, config, adv_forward, clean_forward, eval_fn):
    """Shared projected-ascent skeleton, parameterized over the forward pass.

    ``adv_forward(xb, rho_node, indices) -> (split nodes, output node)`` and
    ``clean_forward(xb, indices) -> (split values, output value)`` describe
    the attacked pipeline (plain model or defended model); ``eval_fn(rho)``
    supplies the per-step convergence metric. The random stream consumption
    order is fixed so pipelines that collapse to the plain model reproduce
    the plain attack bit for bit.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise AttackError("dataset must be a nonempty (N, d) array")
    if data.shape[1] != model.input_dim:
        raise AttackError(f"dataset width {data.shape[1]} does not match model "
                          f"width {model.input_dim}")

    rng = np.random.default_rng(config.seed)
    d = model.input_dim
    rho = rng.uniform(-config.init_scale, config.init_scale, d)
    rho = project(rho, config.eps, config.norm)

    split_ids = weights = None
    if config.strategy == "grill":
        split_ids = select_splits(model.layer_count, model.latent_index,
                                  config.layer_fraction)
        weights = split_weight_values(model, split_ids, config.weighting, rng)

    spans = [(i, min(i + config.batch_size, data.shape[0]))
             for i in range(0, data.shape[0], config.batch_size)]
    batches = [data[lo:hi] for lo, hi in spans]
    indices = [np.arange(lo, hi) for lo, hi in spans]
    clean_cache = [clean_forward(xb, idx) for xb, idx in zip(batches, indices)]

    state = AdamState(rho.shape)
    trace = AttackTrace(grad_sample_cap=GRAD_RESERVOIR_CAP)
    reservoir = _Reservoir(GRAD_RESERVOIR_CAP, np.random.default_rng([config.seed, 1]))

    for t in range(config.steps):
        step_objective = 0.0
        last_io = None
        for b, xb in enumerate(batches):
            rho_node = dc.leaf(rho)
            try:
                splits_adv, out_adv = adv_forward(xb, rho_node, indices[b])
                loss = _objective(config.strategy, config.distance, splits_adv,
                                  out_adv, clean_cache[b], model.latent_index,
                                  split_ids, weights)
                value = float(loss.value)
                grads = dc.backward(loss)
            except dc.EvaluationError as exc:
                raise AttackError(
                    f"non-finite objective at step {t}, batch {b}: {exc}") from exc
            g = grads[rho_node].values if rho_node in grads else np.zeros(d)
            reservoir.add(g)
            state, rho = adam_step(state, rho, g, config.step_size)
            rho = project(rho, config.eps, config.norm)
            if _rho_norm(rho, config.norm) > config.eps:
                raise AttackError(f"budget invariant violated at step {t}, batch {b}")
            step_objective += value
            last_io = (out_adv.value, clean_cache[b][1])
        trace.objectives.append(step_objective)
        trace.eval_distortions.append(eval_fn(rho, last_io))
        trace.budget_norms.append(_rho_norm(rho, config.norm))

    trace.grad_samples = reservoir.values()
    return Perturbation(Tensor(rho)), trace


def run_universal_attack(model, dataset, config):
    """Batched projected Adam ascent of the configured objective over the
    whole dataset; one shared perturbation, norm-bounded after every step."""
    data = np.asarray(dataset, dtype=np.float64)
    clean_out = []

    def adv_forward(xb, rho_node, _indices):
        return _adv_forward(model, xb, rho_node)

    def clean_forward(xb, _indices):
        return _clean_forward(model, xb)

    def eval_fn(rho, _last_io):
        if not clean_out:
            clean_out.append(md.reconstruct(model, data).values)
        adv = md.reconstruct(model, data + rho).values
        return float(np.mean(np.sqrt(np.sum((adv - clean_out[0]) ** 2, axis=1))))

    return run_attack_loop(model, data, config, adv_forward, clean_forward, eval_fn)


def run_sample_attack(model, x, config):
    """Same loop on a single fixed sample (batch of one)."""
    arr = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise AttackError(f"sample attack expects a single vector, got shape {arr.shape}")
    return run_universal_attack(model, arr.reshape(1, -1), config)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvaluationResult:
    per_sample: list
    mean: float
    std: float   # population convention (divide by N)

    @staticmethod
    def from_samples(values):
        vals = np.asarray(values, dtype=np.float64)
        return EvaluationResult(list(vals), float(vals.mean()),
                                float(np.sqrt(np.mean((vals - vals.mean()) ** 2))))


def evaluate_attack(model, dataset, rho, defense=None):
    """Per-sample L2 output distortion of a fixed perturbation; with an HMC
    config the distortion is measured after the latent-refinement defense."""
    data = np.asarray(dataset, dtype=np.float64)
    rho_arr = rho.rho.values if isinstance(rho, Perturbation) else (
        rho.values if isinstance(rho, Tensor) else np.asarray(rho, dtype=np.float64))
    if defense is None:
        clean = md.reconstruct(model, data).values
        adv = md.reconstruct(model, data + rho_arr).values
        dists = np.sqrt(np.sum((adv - clean) ** 2, axis=1))
        return EvaluationResult.from_samples(dists)
    from . import defense as dfs
    dists = []
    for i in range(data.shape[0]):
        clean = dfs.hmc_refine(model, Tensor(data[i]), defense, sample_index=i).values
        adv = dfs.hmc_refine(model, Tensor(data[i] + rho_arr), defense, sample_index=i).values
        dists.append(float(np.sqrt(np.sum((adv - clean) ** 2))))
    return EvaluationResult.from_samples(dists)
