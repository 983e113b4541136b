"""
Encoder-predictor-decoder controller.

The encoder is a single-layer LSTM over the cell's token sequence whose final
hidden state is mapped to a Gaussian posterior (mean, log-variance). Two MLP
heads predict accuracy and normalized FLOPS from the latent code; a stacked
LSTM decoder rebuilds the token sequence from it. No attention is used, so the
latent code is the only path from encoder to decoder.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import kendalltau

from src.archspace import SEQ_LEN, VOCAB
from src.data_processing import FlopsScaler, prepare_training_data, tokens_matrix
from src.errors import ConfigError, MissingCheckpointError, ShapeMismatchError
from src.nnkernel import (
    ParamStore,
    adam_step,
    dense_backward,
    dense_forward,
    gaussian_kl,
    gaussian_kl_backward,
    lstm_step,
    lstm_step_backward,
    mse,
    reparameterize,
    reparameterize_backward,
    softmax_xent,
)

logger = logging.getLogger(__name__)

GO = VOCAB  # decoder start symbol, input side only


@dataclass
class ControllerConfig:
    hidden_size: int = 26
    latent_dim: int = None
    acc_widths: list = None
    flops_widths: list = None
    decoder_layers: int = 2
    alpha: float = 0.8
    lam: float = 0.3
    mu: float = 0.2
    beta: float = 1.0
    learning_rate: float = 0.001
    epochs: int = 1000
    retrain_epochs: int = 20
    batch_size: int = 32
    grad_clip: float = 5.0
    # nats per latent dimension the KL term leaves unpenalized
    free_bits: float = 1.0
    # epochs over which beta ramps linearly from 0 to its configured value
    kl_warmup_epochs: int = 50

    def __post_init__(self):
        if self.latent_dim is None:
            self.latent_dim = self.hidden_size
        if self.acc_widths is None:
            self.acc_widths = [self.hidden_size, 64, 1]
        if self.flops_widths is None:
            self.flops_widths = [self.hidden_size, 1]
        self.acc_widths = list(self.acc_widths)
        self.flops_widths = list(self.flops_widths)

    @classmethod
    def large(cls, **overrides):
        return cls(hidden_size=46, **overrides)

    def validate(self):
        if self.hidden_size <= 0:
            raise ConfigError("--hidden-size", "must be positive")
        if self.latent_dim != self.hidden_size:
            raise ConfigError("--latent-dim", "latent_dim must equal the encoder hidden size")
        for flag, value in (("--alpha", self.alpha), ("--lam", self.lam), ("--mu", self.mu)):
            if value <= 0:
                raise ConfigError(flag, f"loss weight must be > 0, got {value}")
        # beta = 0 is the disentangle-off ablation
        if self.beta < 0:
            raise ConfigError("--beta", f"loss weight must be >= 0, got {self.beta}")
        if self.acc_widths[-1] != 1 or self.flops_widths[-1] != 1:
            raise ConfigError("--acc-widths", "predictor heads must end in a single unit")
        if self.learning_rate <= 0:
            raise ConfigError("--lr", "must be positive")
        if self.epochs < 0 or self.retrain_epochs < 0:
            raise ConfigError("--epochs", "must be non-negative")
        if self.batch_size <= 0:
            raise ConfigError("--batch-size", "must be positive")
        if self.decoder_layers < 1:
            raise ConfigError("--decoder-layers", "must be at least 1")
        if self.free_bits < 0:
            raise ConfigError("--free-bits", "must be >= 0")
        if self.kl_warmup_epochs < 0:
            raise ConfigError("--kl-warmup", "must be >= 0")
        return self

    def weights(self):
        return {"alpha": self.alpha, "lam": self.lam, "mu": self.mu, "beta": self.beta}

    def beta_at(self, epoch):
        """Beta in effect during the 0-based lifetime `epoch` of a controller."""
        if self.kl_warmup_epochs == 0:
            return self.beta
        return self.beta * min(1.0, (epoch + 1) / self.kl_warmup_epochs)


@dataclass
class LatentCode:
    mean: np.ndarray
    logvar: np.ndarray
    sample: np.ndarray

    @classmethod
    def point(cls, vector):
        """Code with sample = mean = vector and an infinitely narrow posterior."""
        vector = np.asarray(vector, dtype=np.float64)
        return cls(mean=vector.copy(), logvar=np.full_like(vector, -np.inf), sample=vector.copy())


@dataclass
class LossBreakdown:
    total: float
    acc: float
    flops: float
    rec: float
    kl: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)

    def append(self, epoch, losses):
        self.epochs.append({"epoch": epoch, **asdict(losses)})

    @property
    def totals(self):
        return [e["total"] for e in self.epochs]


def _init_uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DNASController:

    def __init__(self, config=None, seed=0):
        self.config = (config or ControllerConfig()).validate()
        self.seed = seed
        self.store = ParamStore()
        self.scaler = FlopsScaler()
        self.history = TrainHistory()
        self.is_trained = False
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        cfg = self.config
        H, D = cfg.hidden_size, cfg.latent_dim
        add = self.store.add

        add("enc_embed", rng.uniform(-0.1, 0.1, size=(VOCAB, H)))
        add("enc_Wx", _init_uniform(rng, H, (H, 4 * H)))
        add("enc_Wh", _init_uniform(rng, H, (H, 4 * H)))
        enc_b = np.zeros(4 * H)
        enc_b[H:2 * H] = 1.0  # forget gate bias
        add("enc_b", enc_b)
        add("mu_W", _init_uniform(rng, H, (H, D)))
        add("mu_b", np.zeros(D))
        add("lv_W", _init_uniform(rng, H, (H, D)))
        add("lv_b", np.zeros(D))

        for prefix, widths in (("acc", cfg.acc_widths), ("flops", cfg.flops_widths)):
            fan_in = D
            for k, width in enumerate(widths):
                add(f"{prefix}_W{k}", _init_uniform(rng, fan_in, (fan_in, width)))
                add(f"{prefix}_b{k}", np.zeros(width))
                fan_in = width

        add("dec_embed", rng.uniform(-0.1, 0.1, size=(VOCAB + 1, H)))
        for layer in range(cfg.decoder_layers):
            in_dim = H + D if layer == 0 else H
            add(f"dec_init_W{layer}", _init_uniform(rng, D, (D, H)))
            add(f"dec_init_b{layer}", np.zeros(H))
            add(f"dec_Wx{layer}", _init_uniform(rng, H, (in_dim, 4 * H)))
            add(f"dec_Wh{layer}", _init_uniform(rng, H, (H, 4 * H)))
            dec_b = np.zeros(4 * H)
            dec_b[H:2 * H] = 1.0
            add(f"dec_b{layer}", dec_b)
        add("out_W", _init_uniform(rng, H, (H, VOCAB)))
        add("out_b", np.zeros(VOCAB))

    # -- forward / backward pieces ---------------------------------------

    def _encode_forward(self, tokens):
        p = self.store.params
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != SEQ_LEN:
            raise ShapeMismatchError(f"expected (batch, {SEQ_LEN}) tokens, got {tokens.shape}")
        B, H = tokens.shape[0], self.config.hidden_size
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        steps = []
        for t in range(SEQ_LEN):
            h, c, cache = lstm_step(p["enc_embed"][tokens[:, t]], h, c, p["enc_Wx"], p["enc_Wh"], p["enc_b"])
            steps.append(cache)
        mu, mu_cache = dense_forward(h, p["mu_W"], p["mu_b"])
        logvar, lv_cache = dense_forward(h, p["lv_W"], p["lv_b"])
        return mu, logvar, (tokens, steps, mu_cache, lv_cache)

    def _encode_backward(self, dmu, dlogvar, cache, grads):
        tokens, steps, mu_cache, lv_cache = cache
        dh_mu, grads["mu_W"], grads["mu_b"] = dense_backward(dmu, mu_cache)
        dh_lv, grads["lv_W"], grads["lv_b"] = dense_backward(dlogvar, lv_cache)
        dh = dh_mu + dh_lv
        dc = np.zeros_like(dh)
        for t in reversed(range(SEQ_LEN)):
            dx, dh, dc, dWx, dWh, db = lstm_step_backward(dh, dc, steps[t])
            grads["enc_Wx"] += dWx
            grads["enc_Wh"] += dWh
            grads["enc_b"] += db
            np.add.at(grads["enc_embed"], tokens[:, t], dx)

    def _head_forward(self, prefix, z):
        widths = self.config.acc_widths if prefix == "acc" else self.config.flops_widths
        p = self.store.params
        caches = []
        x = z
        for k in range(len(widths)):
            act = "relu" if k < len(widths) - 1 else "identity"
            x, cache = dense_forward(x, p[f"{prefix}_W{k}"], p[f"{prefix}_b{k}"], act)
            caches.append(cache)
        return x[:, 0], caches

    def _head_backward(self, prefix, dout, caches, grads):
        dx = dout[:, None]
        for k in reversed(range(len(caches))):
            dx, dW, db = dense_backward(dx, caches[k])
            if grads is not None:
                grads[f"{prefix}_W{k}"] += dW
                grads[f"{prefix}_b{k}"] += db
        return dx

    def _decoder_init(self, z):
        p = self.store.params
        states, caches = [], []
        for layer in range(self.config.decoder_layers):
            pre, cache = dense_forward(z, p[f"dec_init_W{layer}"], p[f"dec_init_b{layer}"])
            h0 = np.tanh(pre)
            states.append([h0, np.zeros_like(h0)])
            caches.append((h0, cache))
        return states, caches

    def _decoder_step(self, z, prev_ids, states):
        p = self.store.params
        x = np.concatenate([p["dec_embed"][prev_ids], z], axis=1)
        caches = []
        for layer, state in enumerate(states):
            h, c, cache = lstm_step(x, state[0], state[1], p[f"dec_Wx{layer}"], p[f"dec_Wh{layer}"], p[f"dec_b{layer}"])
            state[0], state[1] = h, c
            caches.append(cache)
            x = h
        logits, out_cache = dense_forward(x, p["out_W"], p["out_b"])
        return logits, (caches, out_cache)

    def _decode_forward(self, z, targets):
        """Teacher-forced pass: step t sees targets[t-1] (GO at t=0)."""
        B = z.shape[0]
        inputs = np.concatenate([np.full((B, 1), GO, dtype=np.int64), targets[:, :-1]], axis=1)
        states, init_caches = self._decoder_init(z)
        logits, steps = [], []
        for t in range(SEQ_LEN):
            out, cache = self._decoder_step(z, inputs[:, t], states)
            logits.append(out)
            steps.append(cache)
        return np.stack(logits, axis=1), (inputs, init_caches, steps)

    def _decode_backward(self, dlogits, z, cache, grads):
        inputs, init_caches, steps = cache
        layers = self.config.decoder_layers
        H = self.config.hidden_size
        dz = np.zeros_like(z)
        dh = [np.zeros((z.shape[0], H)) for _ in range(layers)]
        dc = [np.zeros((z.shape[0], H)) for _ in range(layers)]
        for t in reversed(range(SEQ_LEN)):
            lstm_caches, out_cache = steps[t]
            dtop, dW, db = dense_backward(dlogits[:, t], out_cache)
            grads["out_W"] += dW
            grads["out_b"] += db
            dx = dtop
            for layer in reversed(range(layers)):
                dx, dh[layer], dc[layer], dWx, dWh, db = lstm_step_backward(dh[layer] + dx, dc[layer], lstm_caches[layer])
                grads[f"dec_Wx{layer}"] += dWx
                grads[f"dec_Wh{layer}"] += dWh
                grads[f"dec_b{layer}"] += db
            H_emb = self.store.params["dec_embed"].shape[1]
            np.add.at(grads["dec_embed"], inputs[:, t], dx[:, :H_emb])
            dz += dx[:, H_emb:]
        for layer, (h0, cache) in enumerate(init_caches):
            dpre = dh[layer] * (1.0 - h0 * h0)
            dz_init, dW, db = dense_backward(dpre, cache)
            grads[f"dec_init_W{layer}"] += dW
            grads[f"dec_init_b{layer}"] += db
            dz += dz_init
        return dz

    # -- loss ----------------------------------------------------------------

    def total_loss(self, tokens, y_acc, y_flops_norm, seed, weights=None):
        """
        Weighted sum alpha*L_acc + lam*L_flops + mu*L_rec + beta*L_kl and its gradients.

        L_acc / L_flops are summed squared errors, L_rec is the teacher-forced
        sequence negative log-likelihood summed over the batch, L_kl is the
        Gaussian KL to the standard normal prior summed over the batch.

        The optimized KL term is sum_d max(KL_d, n * free_bits), with KL_d the
        KL of latent dimension d summed over the n records; a dimension under
        its floor gets no KL gradient. LossBreakdown.kl is always the raw KL.
        Returns (LossBreakdown, grads) where grads maps parameter name -> array.
        """
        w = self.config.weights() if weights is None else weights
        tokens = np.asarray(tokens, dtype=np.int64)
        y_acc = np.asarray(y_acc, dtype=np.float64)
        y_flops_norm = np.asarray(y_flops_norm, dtype=np.float64)
        if len(tokens) == 0:
            raise ValueError("total_loss needs a nonempty batch")
        if y_acc.shape != (len(tokens),) or y_flops_norm.shape != (len(tokens),):
            raise ShapeMismatchError(f"targets must have shape ({len(tokens)},)")

        mu, logvar, enc_cache = self._encode_forward(tokens)
        z, eps = reparameterize(mu, logvar, seed)
        acc_pred, acc_caches = self._head_forward("acc", z)
        flops_pred, flops_caches = self._head_forward("flops", z)
        logits, dec_cache = self._decode_forward(z, tokens)

        l_acc, d_acc = mse(acc_pred, y_acc)
        l_flops, d_flops = mse(flops_pred, y_flops_norm)
        xent, dlogits = softmax_xent(logits, tokens)
        l_rec = xent * SEQ_LEN
        dlogits = dlogits * SEQ_LEN
        l_kl = gaussian_kl(mu, logvar)
        floor = len(tokens) * self.config.free_bits
        kl_dims = 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=0)
        active = kl_dims > floor
        kl_term = float(np.sum(np.where(active, kl_dims, floor)))
        total = w["alpha"] * l_acc + w["lam"] * l_flops + w["mu"] * l_rec + w["beta"] * kl_term

        grads = {name: np.zeros_like(value) for name, value in self.store.params.items()}
        dz = self._head_backward("acc", w["alpha"] * d_acc, acc_caches, grads)
        dz += self._head_backward("flops", w["lam"] * d_flops, flops_caches, grads)
        dz += self._decode_backward(w["mu"] * dlogits, z, dec_cache, grads)
        dmu, dlogvar = reparameterize_backward(dz, logvar, eps)
        kl_mu, kl_lv = gaussian_kl_backward(mu, logvar)
        dmu += w["beta"] * kl_mu * active
        dlogvar += w["beta"] * kl_lv * active
        self._encode_backward(dmu, dlogvar, enc_cache, grads)
        return LossBreakdown(total=total, acc=l_acc, flops=l_flops, rec=l_rec, kl=l_kl), grads

    # -- training --------------------------------------------------------------

    def train_model(self, records, seed=0, epochs=None, fit_scaler=True):
        """
        Mini-batch Adam on the summed loss over `records` (oracle or pseudo-labelled).
        Continues from the current parameters; beta follows the warm-up schedule
        over the controller's lifetime epochs. Returns the per-epoch history.
        """
        cfg = self.config
        epochs = cfg.epochs if epochs is None else epochs
        data = prepare_training_data(records, self.scaler, fit_scaler=fit_scaler)
        rng = np.random.default_rng(seed)
        n = len(data)
        for epoch in range(epochs):
            perm = rng.permutation(n)
            sums = np.zeros(5)
            weights = {**cfg.weights(), "beta": cfg.beta_at(len(self.history.epochs))}
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                losses, grads = self.total_loss(data.tokens[idx], data.accuracy[idx], data.flops_norm[idx],
                                                seed=rng, weights=weights)
                self._clip(grads)
                self.store.accumulate(grads)
                adam_step(self.store, cfg.learning_rate)
                sums += [losses.total, losses.acc, losses.flops, losses.rec, losses.kl]
            epoch_losses = LossBreakdown(*(sums / n).tolist())
            self.history.append(len(self.history.epochs), epoch_losses)
            logger.debug("epoch %d total %.5f rec %.5f kl %.5f", epoch, epoch_losses.total, epoch_losses.rec, epoch_losses.kl)
        self.is_trained = True
        return self.history

    def _clip(self, grads):
        if not self.config.grad_clip:
            return
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > self.config.grad_clip:
            scale = self.config.grad_clip / norm
            for g in grads.values():
                g *= scale

    # -- inference ---------------------------------------------------------

    def encode(self, tokens, seed=0):
        """Encode one token sequence to a LatentCode with a seeded sample."""
        mu, logvar, _ = self._encode_forward(np.asarray(tokens)[None, :])
        sample, _ = reparameterize(mu, logvar, seed)
        return LatentCode(mean=mu[0], logvar=logvar[0], sample=sample[0])

    def encode_means(self, cells):
        """Posterior means for a list of cells, shape (n, latent_dim)."""
        if not cells:
            return np.zeros((0, self.config.latent_dim))
        mu, _, _ = self._encode_forward(tokens_matrix(cells))
        return mu

    @staticmethod
    def _as_matrix(z, use_sample=False):
        if isinstance(z, LatentCode):
            vec = z.sample if use_sample else z.mean
            return np.atleast_2d(vec), True
        z = np.asarray(z, dtype=np.float64)
        return np.atleast_2d(z), z.ndim == 1

    def predict_acc(self, z, use_sample=False):
        Z, single = self._as_matrix(z, use_sample)
        pred, _ = self._head_forward("acc", Z)
        return float(pred[0]) if single else pred

    def predict_flops_norm(self, z, use_sample=False):
        Z, single = self._as_matrix(z, use_sample)
        pred, _ = self._head_forward("flops", Z)
        return float(pred[0]) if single else pred

    def predict_flops(self, z, use_sample=False):
        """FLOPS prediction de-normalized to multiply-adds."""
        norm = self.predict_flops_norm(z, use_sample)
        out = self.scaler.inverse_transform(np.atleast_1d(norm))
        return float(out[0]) if np.ndim(norm) == 0 else out

    def predictor_gradients(self, Z):
        """d f_acc / dz and d f_flops(normalized) / dz at each row of Z."""
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        ones = np.ones(Z.shape[0])
        _, acc_caches = self._head_forward("acc", Z)
        _, flops_caches = self._head_forward("flops", Z)
        return (self._head_backward("acc", ones, acc_caches, None),
                self._head_backward("flops", ones, flops_caches, None))

    def decode_tokens(self, Z):
        """Greedy decoding of each row of Z into an (n, SEQ_LEN) token matrix."""
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        states, _ = self._decoder_init(Z)
        prev = np.full(Z.shape[0], GO, dtype=np.int64)
        out = np.zeros((Z.shape[0], SEQ_LEN), dtype=np.int64)
        for t in range(SEQ_LEN):
            logits, _ = self._decoder_step(Z, prev, states)
            prev = np.argmax(logits, axis=1)
            out[:, t] = prev
        return out

    def decode(self, z):
        """Greedy decoding of z.sample (or a raw vector) into one token sequence."""
        vec = z.sample if isinstance(z, LatentCode) else z
        return tuple(int(t) for t in self.decode_tokens(vec)[0])

    def evaluate_predictors(self, records):
        """Kendall tau of predicted vs true accuracy and median relative FLOPS error."""
        Z = self.encode_means([r.cell for r in records])
        acc = np.array([r.accuracy for r in records])
        flops = np.array([r.flops for r in records])
        tau, _ = kendalltau(self.predict_acc(Z), acc)
        pred_flops = self.predict_flops(Z)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.abs(pred_flops - flops) / np.where(flops > 0, flops, np.nan)
        return {"kendall_tau": 0.0 if np.isnan(tau) else float(tau),
                "median_flops_rel_error": float(np.nanmedian(rel)) if np.any(~np.isnan(rel)) else 0.0}

    # -- persistence -----------------------------------------------------------

    def save_model(self, directory):
        if not self.is_trained:
            raise ValueError("No trained controller to save")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.store.save(directory / "params")
        sidecar = {"config": asdict(self.config), "seed": self.seed, "scaler": self.scaler.to_dict(),
                   "is_trained": self.is_trained}
        with open(directory / "controller.json", "w", encoding="utf-8") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)

    @classmethod
    def load_model(cls, directory):
        directory = Path(directory)
        if not (directory / "controller.json").exists():
            raise MissingCheckpointError(str(directory))
        with open(directory / "controller.json", encoding="utf-8") as f:
            sidecar = json.load(f)
        controller = cls(ControllerConfig(**sidecar["config"]), seed=sidecar["seed"])
        controller.store = ParamStore.load(directory / "params")
        controller.scaler = FlopsScaler.from_dict(sidecar["scaler"])
        controller.is_trained = sidecar["is_trained"]
        return controller
