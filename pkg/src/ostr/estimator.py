"""scikit-learn style front end around the trainer and network."""
from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import episodes as ep
from . import net, objective, trainer


def check_image_pairs(Q, R, size=None):
    """Coerce query/reference inputs to float32 (N, 3, S, S) batches.

    Accepts single (3, S, S) images or (N, 3, S, S) batches with values in
    [0, 1]; uint8 input is rescaled.
    """
    out = []
    for name, x in (("query", Q), ("reference", R)):
        x = np.asarray(x)
        if x.dtype == np.uint8:
            x = x.astype(np.float32) / 255.0
        x = x.astype(np.float32, copy=False)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != x.shape[3]:
            raise ValueError(f"{name} must be (N, 3, S, S), got {x.shape}")
        if size is not None and x.shape[2] != size:
            raise ValueError(f"{name} size {x.shape[2]} does not match the model input {size}")
        if not np.isfinite(x).all() or x.min() < 0 or x.max() > 1:
            raise ValueError(f"{name} pixel values must be finite and within [0, 1]")
        out.append(x)
    if out[0].shape != out[1].shape:
        raise ValueError(f"query {out[0].shape} and reference {out[1].shape} differ in shape")
    return out[0], out[1]


class OneShotTextureSegmenter(BaseEstimator):
    """Segment the pixels of a query image that match a reference texture.

    ``fit`` trains on episodes synthesized from a `TextureBank`; ``predict``
    takes (query, reference) pairs and returns binary masks.
    """

    def __init__(self, preset="tiny", use_dirconv=True, use_gating=True, lr=5e-4,
                 weight_decay=5e-4, momentum=0.5, epochs=30, episodes_per_epoch=64,
                 batch_size=4, lr_decay=0.5, lr_decay_every=10, threshold=0.5, random_state=0):
        self.preset = preset
        self.use_dirconv = use_dirconv
        self.use_gating = use_gating
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.epochs = epochs
        self.episodes_per_epoch = episodes_per_epoch
        self.batch_size = batch_size
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.threshold = threshold
        self.random_state = random_state

    def _net_config(self):
        return replace(net.preset(self.preset), use_dirconv=self.use_dirconv, use_gating=self.use_gating)

    def fit(self, bank, split=None):
        """Train on `bank`; without `split` every class is used for training."""
        if not isinstance(bank, ep.TextureBank):
            raise TypeError("fit expects a TextureBank")
        split = split or ep.SplitSpec(bank.classes, [])
        config = self._net_config()
        tc = trainer.TrainConfig(lr=self.lr, weight_decay=self.weight_decay, momentum=self.momentum,
                                 epochs=self.epochs, episodes_per_epoch=self.episodes_per_epoch,
                                 batch_size=self.batch_size, lr_decay=self.lr_decay,
                                 lr_decay_every=self.lr_decay_every, seed=self.random_state)
        self.params_, self.record_ = trainer.train(bank, split, config, tc)
        self.config_ = config
        self.split_ = split
        return self

    def predict_proba(self, Q, R):
        check_is_fitted(self, "params_")
        Q, R = check_image_pairs(Q, R, self.config_.input_size)
        A, _ = trainer.predict_batches(self.params_, self.config_, Q, R)
        return A[:, 0]

    def predict(self, Q, R):
        return objective.binarize(self.predict_proba(Q, R), self.threshold)

    def gate_weights(self, Q, R):
        check_is_fitted(self, "params_")
        Q, R = check_image_pairs(Q, R, self.config_.input_size)
        return trainer.predict_batches(self.params_, self.config_, Q, R)[1]

    def score(self, episodes_, y=None):
        """Mean IoU over a list of `Episode` objects."""
        Q, R, T = ep.batch_arrays(episodes_)
        pred = self.predict(Q, R)
        return float(np.mean([objective.iou(p, t[0]) for p, t in zip(pred, T)]))

    def save(self, path):
        check_is_fitted(self, "params_")
        net.save_checkpoint(self.params_, self.config_, path)

    @classmethod
    def from_checkpoint(cls, path, **kwargs):
        params, config = net.load_checkpoint(path)
        est = cls(use_dirconv=config.use_dirconv, use_gating=config.use_gating, **kwargs)
        est.params_, est.config_ = params, config
        return est
