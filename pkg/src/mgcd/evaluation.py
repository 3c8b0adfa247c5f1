"""Features from trained grids, a small classifier on top of them, and score diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .langevin import LangevinConfig, run_chain, sample_multigrid
from .network import features, score
from .pyramid import build_pyramid, num_grids, upscale
from .tensor import Tape
from .trainer import TrainState, learning_rate


def _check_trained(state: TrainState):
    if state.t == 0:
        raise ValueError("model is untrained (iteration counter is 0)")


@dataclass
class FeatureBundle:
    maps: list  # per-grid (n, C, h, w) activations entering the scoring layer
    grids: list
    dims: list = field(default_factory=list)

    def __post_init__(self):
        self.dims = [int(np.prod(m.shape[1:])) for m in self.maps]

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([m.reshape(len(m), -1) for m in self.maps], axis=1)

    @property
    def n(self) -> int:
        return len(self.maps[0])

    def subset(self, idx) -> "FeatureBundle":
        return FeatureBundle([m[idx] for m in self.maps], list(self.grids))


def grid_images(state: TrainState, images: np.ndarray) -> list:
    """The images at each trained grid's resolution."""
    pyr = build_pyramid(np.asarray(images, dtype=np.float32), state.config.d)
    return [pyr.levels[num_grids(p.spec.input_shape[1], state.config.d)] for p in state.params]


def extract_features(state: TrainState, images: np.ndarray, batch_size: int = 256) -> FeatureBundle:
    """Eval-mode feature maps of every trained grid; batch composition does not matter."""
    _check_trained(state)
    maps = []
    for params, level in zip(state.params, grid_images(state, images)):
        chunks = [features(params, level[i:i + batch_size]) for i in range(0, len(level), batch_size)]
        fm = np.concatenate(chunks)
        if fm.shape[1:] != tuple(params.spec.feature_shape()):
            raise AssertionError(f"grid {params.grid}: features {fm.shape[1:]} != spec {params.spec.feature_shape()}")
        maps.append(fm)
    return FeatureBundle(maps, [p.grid for p in state.params])


# -- classifier head --------------------------------------------------------


@dataclass(frozen=True)
class HeadConfig:
    channels: int = 64
    iterations: int = 300
    lr: float = 0.05
    decay_every: int = 10
    batch_size: int | None = None  # None -> full batch
    seed: int = 0


@dataclass
class ClassifierHead:
    """Per-grid 3x3 conv + ReLU, concatenated, then one fully-connected layer to class logits.

    Feature maps from different grids have different channel counts, so each
    grid gets its own conv weights.
    """

    convs: list  # (weight, bias) per grid
    fc_weight: np.ndarray
    fc_bias: np.ndarray
    n_classes: int
    losses: list = field(default_factory=list)

    def tensors(self) -> list:
        out = []
        for w, b in self.convs:
            out += [w, b]
        return out + [self.fc_weight, self.fc_bias]

    def _logits(self, tape: Tape, maps: list, nodes: list | None = None):
        if nodes is None:
            nodes = [tape.constant(t) for t in self.tensors()]
        hidden = []
        for k, m in enumerate(maps):
            x = tape.constant(np.asarray(m, dtype=self.fc_weight.dtype))
            h = tape.relu(tape.conv2d(x, nodes[2 * k], nodes[2 * k + 1], 1, 1))
            hidden.append(h)
        flat = tape.concat_flat(hidden) if len(hidden) > 1 else hidden[0]
        return tape.fully_connected(flat, nodes[-2], nodes[-1])

    def logits(self, bundle: FeatureBundle) -> np.ndarray:
        return self._logits(Tape(), bundle.maps).value

    def predict(self, bundle: FeatureBundle) -> np.ndarray:
        return np.argmax(self.logits(bundle), axis=1)

    def accuracy(self, bundle: FeatureBundle, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(bundle) == np.asarray(labels)))


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def init_head(bundle: FeatureBundle, n_classes: int, config: HeadConfig) -> ClassifierHead:
    rng = np.random.default_rng(config.seed)
    convs, total = [], 0
    for m in bundle.maps:
        c, h, w = m.shape[1:]
        convs.append((_he(rng, (config.channels, c, 3, 3), 9 * c), np.zeros(config.channels, np.float32)))
        total += config.channels * h * w
    return ClassifierHead(convs, _he(rng, (total, n_classes), total), np.zeros(n_classes, np.float32), n_classes)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.mean(np.log(p[np.arange(n), labels] + 1e-12)))
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def train_classifier(bundle: FeatureBundle, labels: np.ndarray, config: HeadConfig = HeadConfig(),
                     n_classes: int | None = None) -> ClassifierHead:
    """Cross-entropy gradient descent on the head only; the feature maps are fixed inputs."""
    labels = np.asarray(labels).astype(int)
    if len(labels) != bundle.n:
        raise ValueError(f"{len(labels)} labels for {bundle.n} feature vectors")
    n_classes = n_classes or int(labels.max()) + 1
    head = init_head(bundle, n_classes, config)
    rng = np.random.default_rng([config.seed, 1])
    for t in range(config.iterations):
        if config.batch_size is None or config.batch_size >= bundle.n:
            idx = slice(None)
        else:
            idx = rng.choice(bundle.n, config.batch_size, replace=False)
        maps = [m[idx] for m in bundle.maps]
        tape = Tape()
        nodes = [tape.variable(v) for v in head.tensors()]
        out = head._logits(tape, maps, nodes)
        loss, g_logits = softmax_xent(out.value.astype(np.float64), labels[idx])
        head.losses.append(loss)
        grads = tape.backward(tape.dot(out, g_logits.astype(out.value.dtype)), nodes)
        gamma = learning_rate(config.lr, t, config.decay_every)
        for tensor, node in zip(head.tensors(), nodes):
            tensor -= (gamma * grads[node]).astype(tensor.dtype)
    return head


def raw_pixel_baseline(train_images, train_labels, test_images, test_labels, C: float = 1.0) -> float:
    """Test accuracy of multinomial logistic regression on raw pixels."""
    from sklearn.linear_model import LogisticRegression

    clf = LogisticRegression(C=C, max_iter=2000)
    clf.fit(np.asarray(train_images).reshape(len(train_images), -1), train_labels)
    return float(clf.score(np.asarray(test_images).reshape(len(test_images), -1), test_labels))


# -- score diagnostics ------------------------------------------------------


def synthesize_from_bases(state: TrainState, bases: np.ndarray, rng: np.random.Generator,
                          config: LangevinConfig | None = None) -> list:
    """Full sweep from 1x1 bases with the model's own method; returns one batch per trained grid."""
    cfg = config or state.config.langevin
    tc = state.config
    if tc.method == "multigrid":
        return sample_multigrid(state.params, bases, tc.d, cfg, tc.reference, rng)
    side = state.params[0].spec.input_shape[1]
    lc = replace(cfg, steps=tc.chain_steps(state.S))
    return [run_chain(state.params[0], tc.reference, upscale(bases, side), lc, rng, grid=state.S)]


def score_diagnostics(state: TrainState, train_set: np.ndarray, heldout_set: np.ndarray,
                      negative_set: np.ndarray, synthesized: list | None = None,
                      rng: np.random.Generator | None = None, n_synth: int = 64) -> dict:
    """Per-grid eval-mode (mean, std, n) of f on each image set.

    When ``synthesized`` is not given, ``n_synth`` images are generated from the
    1x1 versions of training images.
    """
    _check_trained(state)
    sets = {"train": train_set, "heldout": heldout_set, "negative": negative_set}
    for name, images in sets.items():
        if images is None or len(images) == 0:
            raise ValueError(f"{name} set is empty")
    if synthesized is None:
        rng = rng if rng is not None else np.random.default_rng(state.config.seed + 1)
        pick = rng.choice(len(train_set), min(n_synth, len(train_set)), replace=False)
        bases = build_pyramid(np.asarray(train_set[pick], dtype=np.float32), state.config.d).levels[0]
        synthesized = synthesize_from_bases(state, bases, rng)
    report = {}
    for k, params in enumerate(state.params):
        per = {}
        levels = {name: grid_images(state, images)[k] for name, images in sets.items()}
        levels["synthesized"] = synthesized[k]
        for name, level in levels.items():
            s = score(params, level, mode="eval").astype(np.float64)
            per[name] = (float(s.mean()), float(s.std()), len(s))
        report[params.grid] = per
    return report


def pooled_std(a: tuple, b: tuple) -> float:
    """Pooled standard deviation of two (mean, std, n) summaries."""
    (_, sa, na), (_, sb, nb) = a, b
    return math.sqrt(((na - 1) * sa ** 2 + (nb - 1) * sb ** 2) / max(na + nb - 2, 1))


def table1_pattern(per_grid: dict, rel_tol: float = 0.10, margin: float = 3.0) -> tuple[bool, str]:
    """Held-out within ``rel_tol`` of training and both above negatives by ``margin`` pooled SDs."""
    tr, ho, neg = per_grid["train"], per_grid["heldout"], per_grid["negative"]
    close = abs(ho[0] - tr[0]) <= rel_tol * abs(tr[0])
    sep_tr = (tr[0] - neg[0]) / pooled_std(tr, neg)
    sep_ho = (ho[0] - neg[0]) / pooled_std(ho, neg)
    ok = close and sep_tr > margin and sep_ho > margin
    msg = (f"train {tr[0]:.3g}±{tr[1]:.2g} heldout {ho[0]:.3g}±{ho[1]:.2g} negative {neg[0]:.3g}±{neg[1]:.2g} "
           f"sep {sep_tr:.1f}/{sep_ho:.1f} SD")
    return ok, msg
