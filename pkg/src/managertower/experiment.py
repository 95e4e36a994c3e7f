"""Wire a RunConfig into data, model, training and evaluation.

Every random stream is a named child of ``Rng(cfg.seed)``, so runs are
reproducible and independent of the order in which pieces are built.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig, config_digest
from .errors import ContractError
from .gradcheck import GradcheckReport, gradcheck_model, perturb_parameters
from .model import ManagerTower
from .objectives import itc_similarity
from .synthdata import BatchStream, PatternSpec, SamplePair, collate, eval_batches, make_dataset
from .tensor import Rng
from .trainer import (Checkpoint, EvalResult, ObjectiveWeights, TrainResult, compute_losses, evaluate,
                      train_loop)


@dataclass
class Experiment:
    cfg: RunConfig
    spec: PatternSpec
    train_set: list[SamplePair]
    heldout: list[SamplePair]
    heldout_batches: list
    stream: BatchStream
    model: ManagerTower
    rng: Rng

    @property
    def digest(self) -> str:
        return config_digest(self.cfg)


def build(cfg: RunConfig) -> Experiment:
    cfg.validate()
    root = Rng(cfg.seed)
    spec = cfg.pattern_spec()
    train_set = make_dataset(spec, cfg.data.train_size, root.child("train_set"))
    heldout = make_dataset(spec, cfg.data.heldout_size, root.child("heldout_set"))
    batches = eval_batches(heldout, cfg.data.eval_batch_size, spec, root.child("heldout_batches"),
                           cfg.data.neg_ratio)
    stream = BatchStream(train_set, cfg.trainer.batch_size, spec, root.child("stream"),
                         cfg.data.neg_ratio)
    model = ManagerTower(cfg.model, root.child("model"))
    return Experiment(cfg, spec, train_set, heldout, batches, stream, model, root)


def train(exp: Experiment, out_dir=None, resume: Checkpoint | None = None) -> TrainResult:
    return train_loop(exp.model, exp.stream, exp.cfg.trainer, exp.cfg.optim, exp.rng.child("loop"),
                      out_dir=out_dir, resume=resume, config_digest=exp.digest,
                      mask_vocab=exp.spec.vocab)


def evaluate_heldout(exp: Experiment) -> EvalResult:
    return evaluate(exp.model, exp.heldout_batches, exp.rng.child("eval"),
                    exp.cfg.trainer.mask_ratio, exp.spec.vocab)


def retrieval_recall(exp: Experiment, batch_size: int = 64) -> dict:
    """Exact recall@1 over matched held-out pairs using uni-modal ITC similarity.

    A retrieval counts as correct when the retrieved item carries the query's
    multiset, since distinct pairs may share one.
    """
    m = exp.model
    zv, zt = [], []
    with T.no_grad():
        for j in range(0, len(exp.heldout), batch_size):
            rows = exp.heldout[j:j + batch_size]
            b = collate(rows, np.ones(len(rows), dtype=np.int64), exp.spec.max_len)
            v_layers, t_layers = m.encode(b.images, b.ids, b.text_mask)
            zv.append(v_layers[-1].data[:, 0])
            zt.append(t_layers[-1].data[:, 0])
        sim = itc_similarity(T.Tensor(np.concatenate(zv)), T.Tensor(np.concatenate(zt)),
                             m.itc_head).data
    keys = [p.multiset for p in exp.heldout]
    i2t = np.mean([keys[int(np.argmax(sim[i]))] == keys[i] for i in range(len(keys))])
    t2i = np.mean([keys[int(np.argmax(sim[:, i]))] == keys[i] for i in range(len(keys))])
    return {"image_to_text_r1": float(i2t), "text_to_image_r1": float(t2i)}


def gradcheck_batch(exp: Experiment, size: int):
    """First training batch cut to ``size`` rows, alternating matched and mismatched pairs."""
    if size < 2:
        raise ContractError("gradcheck needs a batch of at least 2")
    batch = exp.stream.batch_at(0)
    pos, neg = np.nonzero(batch.labels == 1)[0], np.nonzero(batch.labels == 0)[0]
    order = [r for pair in zip(pos, neg) for r in pair] + list(pos[len(neg):]) + list(neg[len(pos):])
    rows = order[:size]
    return type(batch)(batch.images[rows], batch.ids[rows], batch.text_mask[rows], batch.labels[rows])


def gradcheck_run(exp: Experiment, size: int = 4, coords: int = 6, h: float = 1e-4,
                  jitter: float = 0.05, mask_ratio: float = 0.3) -> GradcheckReport:
    """Finite-difference check of the MLM + ITM loss, noise off, over every parameter.

    ``jitter`` perturbs the weights first so no gradient sits at an init symmetry.
    """
    batch = gradcheck_batch(exp, size)
    if jitter > 0:
        perturb_parameters(exp.model, exp.rng.child("gradcheck_jitter"), jitter)
    weights = ObjectiveWeights(mlm=1.0, itm=1.0, itc=0.0)
    loss_rng = exp.rng.child("gradcheck_loss")

    def loss_fn():
        return compute_losses(exp.model, batch, weights, loss_rng, training=False,
                              mask_ratio=mask_ratio, mask_vocab=exp.spec.vocab).total

    return gradcheck_model(exp.model, loss_fn, exp.rng.child("gradcheck"), h=h,
                           coords_per_tensor=coords)
