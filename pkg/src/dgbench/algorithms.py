"""Domain generalization algorithms.

Every algorithm is built from ``(input_shape, num_classes, num_domains,
hparams, seed)`` and offers ``update(minibatches)``, which takes one
``(x, y)`` pair per training domain, performs one optimisation step and
returns a dict of scalars, and ``predict(x)``, which returns logits.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import models
from .autodiff import Adam, Graph, Tensor, constant
from .hparams import default_hparams

Minibatches = Sequence[tuple[np.ndarray, np.ndarray]]


def _pool(minibatches: Minibatches):
    x = np.concatenate([np.asarray(x, dtype=np.float64) for x, _ in minibatches])
    y = np.concatenate([np.asarray(y, dtype=np.int64) for _, y in minibatches])
    return x, y


def _mean_of(g: Graph, scalars: Sequence[Tensor]) -> Tensor:
    total = scalars[0]
    for s in scalars[1:]:
        total = g.add(total, s)
    return g.scale(total, 1.0 / len(scalars))


def _domain_slices(minibatches: Minibatches):
    start = 0
    for _, y in minibatches:
        yield start, start + len(y)
        start += len(y)


# penalties -----------------------------------------------------------------


def irm_penalty(g: Graph, logits: Tensor, labels: np.ndarray) -> Tensor:
    """Squared derivative of the mean CE of ``s * logits`` in ``s`` at ``s = 1``.

    d/ds CE(s z, y) at s = 1 is sum_k (softmax(z)_k - onehot_k) z_k, so the
    penalty is built from first-order ops and stays differentiable in z.
    """
    labels = np.asarray(labels)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    residual = g.sub(g.softmax(logits), constant(onehot))
    dr_ds = g.scale(g.sum(g.mul(residual, logits)), 1.0 / len(labels))
    return g.mul(dr_ds, dr_ds)


def _sq_dists(g: Graph, a: Tensor, b: Tensor) -> Tensor:
    a2 = g.sum(g.mul(a, a), axis=1, keepdims=True)
    b2 = g.reshape(g.sum(g.mul(b, b), axis=1), (1, b.shape[0]))
    return g.sub(g.add(a2, b2), g.scale(g.matmul(a, g.transpose(b)), 2.0))


def median_sq_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Median off-diagonal squared distance over the pooled sample (1.0 if degenerate)."""
    z = np.concatenate([x, y])
    sq = (z * z).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2 * z @ z.T
    iu = np.triu_indices(len(z), k=1)
    med = float(np.median(d[iu])) if len(iu[0]) else 0.0
    return med if med > 0 else 1.0


MMD_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


def gaussian_mmd(
    g: Graph,
    x: Tensor,
    y: Tensor,
    multipliers: Sequence[float] = MMD_MULTIPLIERS,
    base: float | None = None,
) -> Tensor:
    """Biased squared MMD averaged over Gaussian kernels.

    Kernel k uses ``sigma^2 = multipliers[k] * base``, with ``base`` the
    median pooled squared distance unless given.
    """
    if x.shape[1:] != y.shape[1:]:
        raise ValueError(f"feature widths differ: {x.shape} vs {y.shape}")
    if base is None:
        base = median_sq_distance(x.data, y.data)
    dxx, dyy, dxy = _sq_dists(g, x, x), _sq_dists(g, y, y), _sq_dists(g, x, y)
    terms = []
    for m in multipliers:
        c = -1.0 / (2.0 * m * base)
        kxx = g.mean(g.exp(g.scale(dxx, c)))
        kyy = g.mean(g.exp(g.scale(dyy, c)))
        kxy = g.mean(g.exp(g.scale(dxy, c)))
        terms.append(g.sub(g.add(kxx, kyy), g.scale(kxy, 2.0)))
    return _mean_of(g, terms)


def coral_penalty(g: Graph, x: Tensor, y: Tensor) -> Tensor:
    """Squared distance between means plus squared Frobenius distance between covariances."""
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("coral_penalty needs at least 2 rows per batch")

    def moments(t):
        mu = g.mean(t, axis=0, keepdims=True)
        c = g.sub(t, mu)
        return mu, g.scale(g.matmul(g.transpose(c), c), 1.0 / (t.shape[0] - 1))

    mx, cx = moments(x)
    my, cy = moments(y)
    return g.add(g.sq_frobenius(g.sub(mx, my)), g.sq_frobenius(g.sub(cx, cy)))


def group_dro_step(q: np.ndarray, losses: Sequence[float], eta: float) -> tuple[np.ndarray, np.ndarray]:
    """Exponentiated-gradient domain weights and the per-domain objective coefficients.

    Returns ``(q_new, coef)`` where the objective is ``sum(coef * losses)``
    with ``coef = q_new / len(losses)``.
    """
    losses = np.asarray(losses, dtype=np.float64)
    logq = np.log(q) + eta * losses
    logq -= logq.max()
    q_new = np.exp(logq)
    q_new /= q_new.sum()
    tiny = np.finfo(np.float64).tiny
    if (q_new <= tiny).any():
        q_new = np.maximum(q_new, tiny)
        q_new /= q_new.sum()
    return q_new, q_new / len(losses)


def random_pairs(n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Cyclic pairing of a random permutation: (p0, p1), (p1, p2), ..., (p_{n-1}, p0)."""
    perm = rng.permutation(n)
    return [(int(perm[i]), int(perm[(i + 1) % n])) for i in range(n)]


def first_order_meta_gradient(
    loss_and_grad_s: Callable,
    loss_and_grad_t: Callable,
    theta: Sequence[np.ndarray],
    inner_lr: float,
    beta: float,
):
    """MLDG objective ``L_S(theta) + beta * L_T(theta - inner_lr * grad L_S)``.

    The adapted parameters are treated as having identity Jacobian, so the
    returned gradient is ``grad L_S(theta) + beta * grad L_T(theta')``.
    """
    loss_s, grad_s = loss_and_grad_s(theta)
    adapted = [t - inner_lr * gs for t, gs in zip(theta, grad_s)]
    loss_t, grad_t = loss_and_grad_t(adapted)
    return loss_s + beta * loss_t, [a + beta * b for a, b in zip(grad_s, grad_t)], loss_s, loss_t


def class_balance_weights(minibatches: Minibatches, num_classes: int) -> np.ndarray:
    """Per-example weights ``1 / (K * p_d(y))`` so classes weigh equally inside each domain."""
    out = []
    for _, y in minibatches:
        y = np.asarray(y)
        freq = np.bincount(y, minlength=num_classes) / len(y)
        out.append(1.0 / (num_classes * freq[y]))
    return np.concatenate(out)


# algorithms ----------------------------------------------------------------


class Algorithm:
    """Shared plumbing: RNG streams, featurizer + classifier, Adam."""

    name = "Algorithm"

    def __init__(self, input_shape, num_classes: int, num_domains: int, hparams: dict, seed: int = 0):
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.num_domains = num_domains
        self.hparams = dict(hparams)
        init_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
        self.init_rng = np.random.default_rng(init_seq)
        # dropout masks, domain pairings, mixing weights
        self.rng = np.random.default_rng(noise_seq)
        self.step_count = 0
        self.featurizer = models.build_featurizer(self.input_shape, self.hparams, self.init_rng)
        self.classifier = models.Classifier(
            self.featurizer.n_outputs, num_classes, self.init_rng, dropout=self.hparams.get("dropout", 0.0)
        )

    @property
    def params(self):
        return self.featurizer.params + self.classifier.params

    def _logits(self, g: Graph, x: np.ndarray) -> Tensor:
        return self.classifier(g, self.featurizer(g, Tensor(x)), self.rng)

    def update(self, minibatches: Minibatches, unlabeled=None) -> dict:
        if not minibatches:
            raise ValueError("update() needs at least one minibatch")
        out = self._update(minibatches)
        self.step_count += 1
        return out

    def _update(self, minibatches: Minibatches) -> dict:
        raise NotImplementedError

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        return models.predict(self.featurizer, self.classifier, x, batch_size=batch_size)


class ERM(Algorithm):
    """Mean cross-entropy over all examples of all training domains."""

    name = "ERM"

    def __init__(self, input_shape, num_classes, num_domains, hparams, seed=0):
        super().__init__(input_shape, num_classes, num_domains, hparams, seed)
        self.optimizer = Adam(self.params, lr=self.hparams["lr"], weight_decay=self.hparams["weight_decay"])

    def _step(self, g: Graph, loss: Tensor):
        self.optimizer.step(g.backward(loss, self.optimizer.params))

    def _update(self, minibatches):
        x, y = _pool(minibatches)
        g = Graph()
        loss = g.cross_entropy(self._logits(g, x), y)
        self._step(g, loss)
        return {"loss": loss.item()}


class IRM(ERM):
    name = "IRM"

    def _update(self, minibatches):
        hp = self.hparams
        weight = hp["irm_lambda"] if self.step_count >= hp["irm_penalty_anneal_iters"] else 1.0
        x, y = _pool(minibatches)
        g = Graph()
        logits = self._logits(g, x)
        # equal batch sizes make the pooled mean equal the mean of per-domain risks
        nll = g.cross_entropy(logits, y)
        penalty = _mean_of(g, [irm_penalty(g, g.rows(logits, a, b), y[a:b]) for a, b in _domain_slices(minibatches)])
        loss = g.add(nll, g.scale(penalty, weight))
        if weight > 1.0:
            loss = g.scale(loss, 1.0 / weight)
        self._step(g, loss)
        return {"loss": loss.item(), "nll": nll.item(), "penalty": penalty.item()}


class DRO(ERM):
    name = "DRO"

    def __init__(self, input_shape, num_classes, num_domains, hparams, seed=0):
        super().__init__(input_shape, num_classes, num_domains, hparams, seed)
        self.q = np.full(num_domains, 1.0 / num_domains)

    def _update(self, minibatches):
        x, y = _pool(minibatches)
        g = Graph()
        logits = self._logits(g, x)
        losses = [g.cross_entropy(g.rows(logits, a, b), y[a:b]) for a, b in _domain_slices(minibatches)]
        if len(self.q) != len(losses):
            self.q = np.full(len(losses), 1.0 / len(losses))
        self.q, coef = group_dro_step(self.q, [l.item() for l in losses], self.hparams["dro_eta"])
        terms = [g.scale(l, c) for l, c in zip(losses, coef)]
        loss = terms[0]
        for t in terms[1:]:
            loss = g.add(loss, t)
        self._step(g, loss)
        return {"loss": loss.item()}


class Mixup(ERM):
    name = "Mixup"

    def _sample_lam(self) -> float:
        alpha = self.hparams["mixup_alpha"]
        return float(self.rng.beta(alpha, alpha))

    def _update(self, minibatches):
        if len(minibatches) < 2:
            raise ValueError("Mixup needs at least 2 training domains")
        pairs = random_pairs(len(minibatches), self.rng)
        mixed, parts = [], []
        for i, j in pairs:
            (xi, yi), (xj, yj) = minibatches[i], minibatches[j]
            n = min(len(yi), len(yj))
            lam = self._sample_lam()
            mixed.append(lam * np.asarray(xi[:n], dtype=np.float64) + (1 - lam) * np.asarray(xj[:n], dtype=np.float64))
            parts.append((n, lam, np.asarray(yi[:n]), np.asarray(yj[:n])))
        g = Graph()
        logits = self._logits(g, np.concatenate(mixed))
        terms, start = [], 0
        for n, lam, yi, yj in parts:
            chunk = g.rows(logits, start, start + n)
            terms.append(g.add(g.scale(g.cross_entropy(chunk, yi), lam), g.scale(g.cross_entropy(chunk, yj), 1 - lam)))
            start += n
        loss = _mean_of(g, terms)
        self._step(g, loss)
        return {"loss": loss.item()}


class MLDG(ERM):
    """First-order MLDG with one randomly chosen meta-test domain per step."""

    name = "MLDG"

    def _loss_and_grad(self, minibatches):
        params = self.optimizer.params

        def fn(theta):
            saved = [p.data for p in params]
            for p, t in zip(params, theta):
                p.data = t
            try:
                x, y = _pool(minibatches)
                g = Graph()
                loss = g.cross_entropy(self._logits(g, x), y)
                return loss.item(), g.backward(loss, params)
            finally:
                for p, s in zip(params, saved):
                    p.data = s

        return fn

    def _update(self, minibatches):
        if len(minibatches) < 2:
            raise ValueError("MLDG needs at least 2 training domains")
        hp = self.hparams
        test = int(self.rng.integers(len(minibatches)))
        self.last_meta_test = test
        meta_train = [mb for i, mb in enumerate(minibatches) if i != test]
        inner_lr = hp.get("mldg_inner_lr") or hp["lr"]
        theta = [p.data for p in self.optimizer.params]
        total, grads, loss_s, loss_t = first_order_meta_gradient(
            self._loss_and_grad(meta_train), self._loss_and_grad([minibatches[test]]), theta, inner_lr, hp["mldg_beta"]
        )
        self.optimizer.step(grads)
        return {"loss": total, "meta_train_loss": loss_s, "meta_test_loss": loss_t}


class _FeatureMatching(ERM):
    kind = ""

    def penalty(self, g: Graph, a: Tensor, b: Tensor) -> Tensor:
        raise NotImplementedError

    def _update(self, minibatches):
        if len(minibatches) < 2:
            raise ValueError(f"{self.name} needs at least 2 training domains")
        x, y = _pool(minibatches)
        g = Graph()
        feats = self.featurizer(g, Tensor(x))
        nll = g.cross_entropy(self.classifier(g, feats, self.rng), y)
        chunks = [g.rows(feats, a, b) for a, b in _domain_slices(minibatches)]
        pair_terms = [
            self.penalty(g, chunks[i], chunks[j]) for i in range(len(chunks)) for j in range(i + 1, len(chunks))
        ]
        penalty = _mean_of(g, pair_terms)
        loss = g.add(nll, g.scale(penalty, self.hparams["mmd_gamma"]))
        self._step(g, loss)
        return {"loss": loss.item(), "nll": nll.item(), "penalty": penalty.item(), "pairs": len(pair_terms)}


class CORAL(_FeatureMatching):
    name = "CORAL"

    def penalty(self, g, a, b):
        return coral_penalty(g, a, b)


class MMD(_FeatureMatching):
    name = "MMD"

    def penalty(self, g, a, b):
        return gaussian_mmd(g, a, b)


class DANN(Algorithm):
    """Alternating discriminator / generator updates on featurizer outputs."""

    name = "DANN"
    conditional = False

    def __init__(self, input_shape, num_classes, num_domains, hparams, seed=0):
        super().__init__(input_shape, num_classes, num_domains, hparams, seed)
        hp = self.hparams
        self.discriminator = models.Discriminator(
            self.featurizer.n_outputs, num_domains, self.init_rng, conditional=self.conditional
        )
        self.gen_opt = Adam(
            self.featurizer.params + self.classifier.params,
            lr=hp["lr_g"],
            beta1=hp["beta1"],
            weight_decay=hp["weight_decay_g"],
        )
        self.disc_opt = Adam(
            self.discriminator.params, lr=hp["lr_d"], beta1=hp["beta1"], weight_decay=hp["weight_decay_d"]
        )

    def _disc_loss(self, g, feats, domains, weights):
        gp = self.hparams["grad_penalty"]
        if gp > 0:
            logits, input_grad = self.discriminator.logits_and_input_grad(g, feats, domains, weights)
            ce = g.cross_entropy(logits, domains, weights)
            penalty = g.mean(g.sum(g.mul(input_grad, input_grad), axis=1))
            return g.add(ce, g.scale(penalty, gp)), ce
        ce = g.cross_entropy(self.discriminator(g, feats), domains, weights)
        return ce, ce

    def _update(self, minibatches):
        if len(minibatches) < 2:
            raise ValueError(f"{self.name} needs at least 2 training domains")
        hp = self.hparams
        x, y = _pool(minibatches)
        domains = np.concatenate([np.full(len(yb), i, dtype=np.int64) for i, (_, yb) in enumerate(minibatches)])
        weights = class_balance_weights(minibatches, self.num_classes) if self.conditional else None

        g = Graph()
        feats = self.featurizer(g, Tensor(x))
        detached = Tensor(feats.data)
        for _ in range(int(hp["d_steps_per_g_step"])):
            gd = Graph()
            disc_loss, disc_ce = self._disc_loss(gd, detached, domains, weights)
            self.disc_opt.step(gd.backward(disc_loss, self.disc_opt.params))

        nll = g.cross_entropy(self.classifier(g, feats, self.rng), y)
        adv = g.cross_entropy(self.discriminator(g, feats), domains, weights)
        gen_loss = g.add(nll, g.scale(adv, -hp["lambda"]))
        self.gen_opt.step(g.backward(gen_loss, self.gen_opt.params))
        return {"gen_loss": gen_loss.item(), "disc_loss": disc_loss.item(), "nll": nll.item(), "disc_ce": adv.item()}


class CDANN(DANN):
    name = "CDANN"
    conditional = True


ALGORITHMS = {
    cls.name: cls for cls in (ERM, IRM, DRO, Mixup, MLDG, CORAL, MMD, DANN, CDANN)
}


def make_algorithm(
    name: str,
    input_shape,
    num_classes: int,
    num_domains: int,
    hparams: dict | None = None,
    seed: int = 0,
    dataset_family: str = "mnist",
) -> Algorithm:
    """Instantiate a registered algorithm; missing hparams take their defaults."""
    if name not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {name!r}; valid names: {', '.join(ALGORITHMS)}")
    full = default_hparams(name, dataset_family)
    full.update(hparams or {})
    return ALGORITHMS[name](input_shape, num_classes, num_domains, full, seed)
