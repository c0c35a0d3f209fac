"""
Metric-adversarial training loop.

Every iteration t is a full pass over B batch pairs (labeled + unlabeled).
Under the alternating schedule odd iterations minimize the VAT-regularized
objective (SS-CE + VAT, theta_m only) and even iterations the metric-regularized
one (SS-CE + SS metric loss, theta_m and theta_a). The simultaneous schedule
minimizes all three terms every iteration. Terms are combined by learnable
uncertainty weights, one weight set per branch.

Runs are deterministic in the seed: batch order depends on (seed, t), VAT start
directions on (seed, t, b). Checkpoints carry parameters, batch-norm buffers,
both Adam states, the weights and the report, so a resumed run continues
bit-exactly.
"""

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from tqdm import tqdm

import config
from modules import evalkit
from modules.cvnet import ModelConfig, ModelParams, forward, init_params, logits_fn, to_network_input
from modules.gradcore import (AdamState, NonFiniteGradientError, adam_step, load_checkpoint,
                              no_grad, save_checkpoint, zero_grad)
from modules.ssl_losses import (LossWeights, auto_weighted_sum, compute_pseudo_labels, init_metric_params,
                                lds, metric_term, ss_ce_loss, vat_perturbation)

logger = logging.getLogger(__name__)

METRICS = ('center', 'proxy_anchor', 'none')
SCHEDULES = ('alternating', 'simultaneous')
BRANCHES = ('VAT', 'SSML', 'SIM', 'CE')

LAST_CHECKPOINT = 'last.ckpt'
BEST_CHECKPOINT = 'best.ckpt'
REPORT_FILE = 'report.jsonl'


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/inf loss; ``dump_path`` points at the diagnostic dump."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class ConfigHashMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = config.DEFAULT_ITERATIONS
    batch_size: int = config.DEFAULT_BATCH_SIZE
    lr_m: float = config.DEFAULT_LR_M
    lr_a: Optional[float] = None
    metric: str = 'center'
    vat_enabled: bool = True
    unlabeled_enabled: bool = True
    schedule: str = 'alternating'
    tau: float = config.DEFAULT_TAU
    alpha: float = config.DEFAULT_ALPHA
    delta: float = config.DEFAULT_DELTA
    epsilon: float = config.DEFAULT_EPSILON
    xi: float = config.DEFAULT_XI
    power_iters: int = config.DEFAULT_POWER_ITERS
    seed: int = 0
    metric_unlabeled: bool = True
    cycle_streams: bool = True
    eval_batch_size: int = 256

    def validate(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got '{self.metric}'")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got '{self.schedule}'")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.epsilon <= 0 or self.xi <= 0 or self.power_iters < 1:
            raise ValueError("epsilon and xi must be > 0 and power_iters >= 1")
        if self.lr_m <= 0 or (self.lr_a is not None and self.lr_a <= 0):
            raise ValueError("learning rates must be > 0")
        return self

    @property
    def metric_lr(self):
        return self.lr_a if self.lr_a is not None else config.DEFAULT_LR_A[self.metric]

    def branch_for(self, t):
        """Objective used at (1-based) iteration t."""
        ssml = self.metric != 'none'
        if ssml and self.vat_enabled:
            if self.schedule == 'simultaneous':
                return 'SIM'
            return 'SSML' if t % 2 == 0 else 'VAT'
        if ssml:
            return 'SSML'
        if self.vat_enabled:
            return 'VAT'
        return 'CE'

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data).validate()


def run_hash(dataset_config, model_config, train_config):
    """SHA-256 (16 hex digits) of the run's canonical config, iterations excluded."""
    train = train_config.to_dict()
    train.pop('iterations')
    payload = {
        'dataset': dataset_config.to_dict() if dataset_config is not None else None,
        'model': model_config.to_dict(),
        'train': train,
    }
    canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def digest_arrays(tensors):
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode('utf-8'))
        h.update(np.ascontiguousarray(tensors[name].data).tobytes())
    return h.hexdigest()[:16]


@dataclass
class BatchPair:
    labeled_x: np.ndarray   # [B_l, 2, n]
    labeled_y: np.ndarray   # [B_l]
    unlabeled_x: np.ndarray  # [B_ul, 2, n], B_ul may be 0

    @property
    def has_unlabeled(self):
        return self.unlabeled_x.shape[0] > 0


def _stream_batches(rng, length, count, size, cycle):
    if length == 0:
        return [np.zeros(0, dtype=np.int64)] * count
    size = min(size, length)
    if cycle:
        needed = count * size
        chunks, total = [], 0
        while total < needed:
            chunks.append(rng.permutation(length))
            total += length
        order = np.concatenate(chunks)[:needed]
        return [order[i * size:(i + 1) * size] for i in range(count)]
    order = rng.permutation(length)
    batches = [order[i:i + size] for i in range(0, length, size)]
    return batches + [np.zeros(0, dtype=np.int64)] * (count - len(batches))


def make_epoch_batches(dataset, cfg, t):
    """Batch pairs of iteration t; the shorter stream cycles unless ``cycle_streams`` is off."""
    n_lab = len(dataset.labeled)
    n_unl = len(dataset.unlabeled) if cfg.unlabeled_enabled else 0
    if n_lab == 0:
        raise ValueError("cannot train without labeled samples")
    count = math.ceil(max(n_lab, n_unl) / cfg.batch_size)
    rng = np.random.default_rng([cfg.seed, t, 0xBA])
    lab = _stream_batches(rng, n_lab, count, cfg.batch_size, cycle=True)
    unl = _stream_batches(rng, n_unl, count, cfg.batch_size, cycle=cfg.cycle_streams or n_unl >= n_lab)

    pairs = []
    n = dataset.sample_length
    for lab_idx, unl_idx in zip(lab, unl):
        if len(unl_idx) == 1:
            # batch norm needs two samples
            unl_idx = unl_idx[:0]
        unl_x = (to_network_input(dataset.unlabeled.samples[unl_idx]) if len(unl_idx)
                 else np.zeros((0, 2, n)))
        pairs.append(BatchPair(to_network_input(dataset.labeled.samples[lab_idx]),
                               dataset.labeled.labels[lab_idx], unl_x))
    return pairs


class TrainReport:
    """Per-iteration records {t, branch, loss, loss_terms, sigma, val_acc, ...}."""

    def __init__(self, records=None):
        self.records = list(records or [])

    def append(self, record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def branches(self):
        return [r['branch'] for r in self.records]

    def term_names(self):
        names = set()
        for r in self.records:
            names.update(r['loss_terms'])
        return names

    def losses(self):
        return [r['loss'] for r in self.records]

    def fingerprint(self):
        """Hash of the records without timing fields."""
        stripped = [{k: v for k, v in r.items() if k != 'wall_ms'} for r in self.records]
        canonical = json.dumps(stripped, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def write_jsonl(self, path):
        with open(path, 'w') as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + '\n')

    @classmethod
    def read_jsonl(cls, path):
        records = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise ValueError(f"{path}:{lineno}: corrupt report record ({e})") from e
        return cls(records)


@dataclass
class TrainState:
    params: ModelParams
    weights: Dict[str, LossWeights]
    adam_m: AdamState
    adam_a: AdamState
    t: int = 0
    best_val_acc: Optional[float] = None
    best_iteration: int = 0
    best_params: Optional[ModelParams] = None
    report: TrainReport = field(default_factory=TrainReport)

    def model_group(self, branch):
        group = dict(self.params.theta_m)
        weights = self.weights.get(branch)
        if weights is not None:
            group.update(weights.params)
        return group

    def all_tensors(self):
        tensors = dict(self.params.theta_m)
        tensors.update(self.params.theta_a)
        for w in self.weights.values():
            tensors.update(w.params)
        return tensors


@dataclass
class StepOutcome:
    loss: float
    terms: Dict[str, float]
    accepted: int
    unlabeled: int
    vat_vanished: int = 0


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    report: TrainReport
    best_val_acc: Optional[float]
    best_iteration: int
    config_hash: str
    out_dir: Optional[Path] = None


def _branch_weights(cfg):
    ce = 'ss_ce' if cfg.unlabeled_enabled else 'ce'
    metric = cfg.metric if cfg.metric != 'none' else None
    if metric and cfg.unlabeled_enabled and cfg.metric_unlabeled:
        metric = f"ss_{metric}"
    weights = {}
    if cfg.vat_enabled:
        weights['VAT'] = LossWeights([ce, 'vat'], 'vat')
    if metric:
        weights['SSML'] = LossWeights([ce, metric], 'ssml')
    if metric and cfg.vat_enabled:
        weights['SIM'] = LossWeights([ce, 'vat', metric], 'sim')
    return weights


def init_state(dataset, cfg, model_config):
    params = init_params(model_config, cfg.seed)
    with no_grad():
        # binds the lazy dense stack; eval mode leaves the running statistics alone
        forward(params, to_network_input(dataset.labeled.samples[:2]), training=False)
    params.theta_a = init_metric_params(cfg.metric, model_config.num_classes, model_config.feature_dim, cfg.seed)
    return TrainState(params, _branch_weights(cfg), AdamState(lr=cfg.lr_m), AdamState(lr=cfg.metric_lr))


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def _forward_pair(params, pair):
    z_l, logits_l = forward(params, pair.labeled_x, training=True)
    if pair.has_unlabeled:
        z_u, logits_u = forward(params, pair.unlabeled_x, training=True)
    else:
        z_u, logits_u = None, None
    return z_l, logits_l, z_u, logits_u


def _pseudo(logits_u, cfg):
    if logits_u is None:
        return None
    return compute_pseudo_labels(logits_u, cfg.tau)


def _semi_metric(cfg):
    return cfg.metric_unlabeled and cfg.unlabeled_enabled


def _check_finite(value, terms):
    if not np.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value} (terms: {terms})")


def _apply(groups, terms):
    try:
        for params, state in groups:
            adam_step(params, state)
    except NonFiniteGradientError as e:
        raise NonFiniteGradientError(e.name, f"{e} while minimizing {sorted(terms)}") from e


def _vat_term(state, pair, cfg, rng):
    x_all = np.concatenate([pair.labeled_x, pair.unlabeled_x], axis=0)
    fn = logits_fn(state.params, training=True, update_running=False)
    stats = {}
    perturbation = vat_perturbation(fn, x_all, cfg.epsilon, cfg.xi, cfg.power_iters, rng, stats)
    zero_grad(state.all_tensors())
    return (lambda: lds(fn, x_all, perturbation)), stats.get('vanished', 0)


def _outcome(total, named, pseudo):
    terms = {name: value.item() for name, value in named}
    loss = total.item()
    _check_finite(loss, terms)
    return loss, terms, StepOutcome(loss, terms, pseudo.accepted_count if pseudo else 0,
                                    pseudo.size if pseudo else 0)


def step_ssml(state, pair, cfg):
    """SS-CE + metric term; Adam on theta_m (lr_m) and theta_a (lr_a)."""
    zero_grad(state.all_tensors())
    weights = state.weights['SSML']
    z_l, logits_l, z_u, logits_u = _forward_pair(state.params, pair)
    pseudo = _pseudo(logits_u, cfg)
    ce = ss_ce_loss(logits_l, pair.labeled_y, logits_u, pseudo)
    (metric_param,) = state.params.theta_a.values()
    name, metric = metric_term(cfg.metric, z_l, pair.labeled_y, z_u, pseudo, metric_param,
                               cfg.alpha, cfg.delta, semi_supervised=_semi_metric(cfg))
    total = auto_weighted_sum([ce, metric], weights)
    _, terms, outcome = _outcome(total, [(weights.names[0], ce), (name, metric)], pseudo)
    total.backward()
    _apply([(state.model_group('SSML'), state.adam_m), (state.params.theta_a, state.adam_a)], terms)
    return outcome


def step_vat(state, pair, cfg, rng):
    """SS-CE + VAT; Adam on theta_m only."""
    weights = state.weights['VAT']
    lds_fn, vanished = _vat_term(state, pair, cfg, rng)
    z_l, logits_l, z_u, logits_u = _forward_pair(state.params, pair)
    pseudo = _pseudo(logits_u, cfg)
    ce = ss_ce_loss(logits_l, pair.labeled_y, logits_u, pseudo)
    vat = lds_fn()
    total = auto_weighted_sum([ce, vat], weights)
    _, terms, outcome = _outcome(total, [(weights.names[0], ce), ('vat', vat)], pseudo)
    total.backward()
    _apply([(state.model_group('VAT'), state.adam_m)], terms)
    outcome.vat_vanished = vanished
    return outcome


def step_simultaneous(state, pair, cfg, rng):
    """SS-CE + VAT + metric term in one objective."""
    weights = state.weights['SIM']
    lds_fn, vanished = _vat_term(state, pair, cfg, rng)
    z_l, logits_l, z_u, logits_u = _forward_pair(state.params, pair)
    pseudo = _pseudo(logits_u, cfg)
    ce = ss_ce_loss(logits_l, pair.labeled_y, logits_u, pseudo)
    vat = lds_fn()
    (metric_param,) = state.params.theta_a.values()
    name, metric = metric_term(cfg.metric, z_l, pair.labeled_y, z_u, pseudo, metric_param,
                               cfg.alpha, cfg.delta, semi_supervised=_semi_metric(cfg))
    total = auto_weighted_sum([ce, vat, metric], weights)
    _, terms, outcome = _outcome(total, [(weights.names[0], ce), ('vat', vat), (name, metric)], pseudo)
    total.backward()
    _apply([(state.model_group('SIM'), state.adam_m), (state.params.theta_a, state.adam_a)], terms)
    outcome.vat_vanished = vanished
    return outcome


def step_ce(state, pair, cfg):
    """Unweighted (SS-)CE; the supervised baseline when unlabeled data is off."""
    zero_grad(state.all_tensors())
    _, logits_l, _, logits_u = _forward_pair(state.params, pair)
    pseudo = _pseudo(logits_u, cfg)
    ce = ss_ce_loss(logits_l, pair.labeled_y, logits_u, pseudo)
    name = 'ss_ce' if cfg.unlabeled_enabled else 'ce'
    _, terms, outcome = _outcome(ce, [(name, ce)], pseudo)
    ce.backward()
    _apply([(state.params.theta_m, state.adam_m)], terms)
    return outcome


def run_branch(state, branch, pair, cfg, t, b):
    if branch == 'SSML':
        return step_ssml(state, pair, cfg)
    if branch == 'CE':
        return step_ce(state, pair, cfg)
    rng = np.random.default_rng([cfg.seed, t, b, 0x7A])
    if branch == 'VAT':
        return step_vat(state, pair, cfg, rng)
    return step_simultaneous(state, pair, cfg, rng)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _save_state(path, state, cfg, model_config, dataset_config, run_id):
    arrays = {f"params/{k}": v for k, v in state.params.state_arrays().items()}
    m_arrays, m_meta = state.adam_m.to_arrays('adam_m')
    a_arrays, a_meta = state.adam_a.to_arrays('adam_a')
    arrays.update(m_arrays)
    arrays.update(a_arrays)
    for w in state.weights.values():
        for name, t in w.params.items():
            arrays[f"weights/{name}"] = t.data
    meta = {
        'config_hash': run_id,
        'train': cfg.to_dict(),
        'model': model_config.to_dict(),
        'dataset': dataset_config.to_dict() if dataset_config is not None else None,
        'params': state.params.state_meta(),
        'adam_m': m_meta,
        'adam_a': a_meta,
        't': state.t,
        'best_val_acc': state.best_val_acc,
        'best_iteration': state.best_iteration,
        'records': state.report.records,
    }
    save_checkpoint(path, arrays, meta)


def save_params(path, params, extra=None):
    meta = {'params': params.state_meta()}
    meta.update(extra or {})
    save_checkpoint(path, {f"params/{k}": v for k, v in params.state_arrays().items()}, meta)


def load_params(path):
    arrays, meta = load_checkpoint(path)
    params_arrays = {k[len('params/'):]: v for k, v in arrays.items() if k.startswith('params/')}
    return ModelParams.from_state(params_arrays, meta['params']), meta


def _load_state(path, cfg):
    arrays, meta = load_checkpoint(path)
    params_arrays = {k[len('params/'):]: v for k, v in arrays.items() if k.startswith('params/')}
    params = ModelParams.from_state(params_arrays, meta['params'])
    weights = _branch_weights(cfg)
    for w in weights.values():
        for name, t in w.params.items():
            t.data = np.array(arrays[f"weights/{name}"])
    state = TrainState(params, weights,
                       AdamState.from_arrays('adam_m', arrays, meta['adam_m']),
                       AdamState.from_arrays('adam_a', arrays, meta['adam_a']),
                       t=int(meta['t']), best_val_acc=meta['best_val_acc'],
                       best_iteration=int(meta['best_iteration']),
                       report=TrainReport(meta['records']))
    best_file = Path(path).parent / BEST_CHECKPOINT
    state.best_params = load_params(best_file)[0] if best_file.exists() else params.copy()
    return state, meta


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _default_model_config(dataset):
    return ModelConfig(num_classes=dataset.num_classes, input_length=dataset.sample_length)


def _check_compatible(dataset, model_config):
    if model_config.num_classes != dataset.num_classes or model_config.input_length != dataset.sample_length:
        raise ValueError(f"model expects K={model_config.num_classes}, n={model_config.input_length}; "
                         f"dataset has K={dataset.num_classes}, n={dataset.sample_length}")
    if len(dataset.labeled) < 2:
        raise ValueError("training needs at least two labeled samples (batch norm)")


def _write_dump(out_dir, state, branch, t, b, error):
    target = Path(out_dir) if out_dir is not None else Path(config.RUNS_DIR)
    target.mkdir(parents=True, exist_ok=True)
    dump_path = target / f"nonfinite_t{t}_b{b}.json"
    norms = {name: float(np.linalg.norm(p.data)) for name, p in state.all_tensors().items()}
    dump = {
        'iteration': t,
        'batch': b,
        'branch': branch,
        'error': str(error),
        'sigma': {k: w.sigmas() for k, w in state.weights.items()},
        'param_norms': norms,
        'non_finite_params': sorted(n for n, p in state.all_tensors().items() if not np.all(np.isfinite(p.data))),
        'last_record': state.report.records[-1] if state.report.records else None,
    }
    dump_path.write_text(json.dumps(dump, indent=2, default=str))
    return dump_path


def _run_iterations(dataset, cfg, model_config, state, out_dir, run_id, progress):
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        state.report.write_jsonl(out_dir / REPORT_FILE)
    if not dataset.is_normalized:
        logger.warning("⚠️ training on an un-normalized dataset")

    iterations = range(state.t + 1, cfg.iterations + 1)
    for t in tqdm(iterations, desc='train', disable=not progress):
        branch = cfg.branch_for(t)
        started = time.perf_counter()
        pairs = make_epoch_batches(dataset, cfg, t)
        outcomes = []
        for b, pair in enumerate(pairs):
            try:
                outcomes.append(run_branch(state, branch, pair, cfg, t, b))
            except NonFiniteLossError as e:
                e.dump_path = _write_dump(out_dir, state, branch, t, b, e)
                logger.error(f"❌ non-finite loss at t={t}, batch {b}; dump: {e.dump_path}")
                raise
            logger.debug(f"t={t} b={b} {branch} loss={outcomes[-1].loss:.6f} terms={outcomes[-1].terms}")

        val_acc = None
        if len(dataset.validation):
            val_acc = evalkit.accuracy(state.params, dataset.validation, cfg.eval_batch_size)
        state.t = t
        term_names = outcomes[0].terms.keys()
        accepted = sum(o.accepted for o in outcomes)
        seen = sum(o.unlabeled for o in outcomes)
        record = {
            't': t,
            'branch': branch,
            'loss': float(np.mean([o.loss for o in outcomes])),
            'loss_terms': {n: float(np.mean([o.terms[n] for o in outcomes])) for n in term_names},
            'sigma': state.weights[branch].sigmas() if branch in state.weights else {},
            'val_acc': val_acc,
            'pseudo_coverage': accepted / seen if seen else None,
            'theta_a_digest': digest_arrays(state.params.theta_a),
            'wall_ms': (time.perf_counter() - started) * 1000.0,
        }
        if seen and accepted == 0:
            logger.warning(f"⚠️ t={t}: no unlabeled sample passed tau={cfg.tau}")
        vanished = sum(o.vat_vanished for o in outcomes)
        if vanished:
            logger.warning(f"⚠️ t={t}: VAT gradient vanished for {vanished} sample(s); "
                           f"kept their previous direction")
        state.report.append(record)

        # without a validation split the latest iteration counts as best
        improved = (state.best_params is None or val_acc is None
                     or state.best_val_acc is None or val_acc > state.best_val_acc)
        if improved:
            state.best_val_acc, state.best_iteration = val_acc, t
            state.best_params = state.params.copy()
            if out_dir is not None:
                save_params(out_dir / BEST_CHECKPOINT, state.best_params,
                            {'config_hash': run_id, 'iteration': t, 'val_acc': val_acc})
        if out_dir is not None:
            with open(out_dir / REPORT_FILE, 'a') as fh:
                fh.write(json.dumps(record, sort_keys=True) + '\n')
            _save_state(out_dir / LAST_CHECKPOINT, state, cfg, model_config, dataset.config, run_id)
        val_text = f"{val_acc:.4f}" if val_acc is not None else 'n/a'
        logger.info(f"🔁 t={t}/{cfg.iterations} {branch} loss={record['loss']:.4f} val_acc={val_text}")

    return TrainResult(state.params, state.best_params or state.params.copy(), state.report,
                       state.best_val_acc, state.best_iteration, run_id, out_dir)


def train(dataset, cfg, model_config=None, out_dir=None, progress=False):
    """Run iterations 1..T from a fresh initialization."""
    cfg.validate()
    model_config = (model_config or _default_model_config(dataset)).validate()
    _check_compatible(dataset, model_config)
    run_id = run_hash(dataset.config, model_config, cfg)
    logger.info(f"🚀 training run {run_id}: metric={cfg.metric} schedule={cfg.schedule} "
                f"vat={cfg.vat_enabled} unlabeled={cfg.unlabeled_enabled} T={cfg.iterations}")
    state = init_state(dataset, cfg, model_config)
    return _run_iterations(dataset, cfg, model_config, state, out_dir, run_id, progress)


def resume(checkpoint_path, dataset, cfg=None, model_config=None, out_dir=None, progress=False):
    """Continue a run from ``last.ckpt``; only ``iterations`` may differ from the original config."""
    checkpoint_path = Path(checkpoint_path)
    _, meta = load_checkpoint(checkpoint_path)
    saved_cfg = TrainConfig.from_dict(meta['train'])
    saved_model = ModelConfig.from_dict(meta['model'])
    cfg = (cfg or saved_cfg).validate()
    model_config = (model_config or saved_model).validate()
    run_id = run_hash(dataset.config, model_config, cfg)
    if run_id != meta['config_hash']:
        raise ConfigHashMismatchError(f"config hash {run_id} does not match checkpoint {meta['config_hash']}")
    state, _ = _load_state(checkpoint_path, cfg)
    out_dir = Path(out_dir) if out_dir is not None else checkpoint_path.parent
    if state.t >= cfg.iterations:
        logger.info(f"⏭️ checkpoint already at t={state.t} >= T={cfg.iterations}; nothing to do")
        return TrainResult(state.params, state.best_params, state.report, state.best_val_acc,
                           state.best_iteration, run_id, out_dir)
    logger.info(f"▶️ resuming run {run_id} at t={state.t + 1}")
    return _run_iterations(dataset, cfg, model_config, state, out_dir, run_id, progress)
