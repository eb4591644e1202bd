"""Denoising adversarial autoencoder for full-day log-light records.

The autoencoder maps a noisy 480-sample day to its clean counterpart while a
discriminator on the 50-d latent space tries to tell codes of clean days
from codes of noisy days. The encoder is pushed to make the two
indistinguishable.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter

from .nn import Adam, LayerSpec, Sequential
from .nn.checkpoint import checksum, load_checkpoint, save_checkpoint
from .nn.losses import PROB_CLAMP, discriminator_objective
from .records import LIGHT_FLOOR, DailyLightRecord

log = logging.getLogger(__name__)

DAY_SAMPLES = 480
LATENT_DIM = 50
# log10 lux spans roughly [log10(floor), 5] and is mapped to the unit interval.
LOG_OFFSET = float(np.log10(LIGHT_FLOOR))
LOG_SPAN = 6.0
# Encoder inputs are centred on zero. Decoder targets sit in [0.5, 1.5] and the
# output bias starts at 1.0, so the final ReLU starts (and stays) active;
# with targets touching zero about half the output units die at init.
DECODER_OFFSET = 0.5
OUTPUT_BIAS_INIT = 1.0


class TrainingDiverged(FloatingPointError):
    pass


def _fc_stack(sizes, final=None):
    specs = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        specs.append(LayerSpec("fc", {"fan_in": a, "fan_out": b}))
        specs.append(LayerSpec("relu"))
    if final is not None:
        specs[-1] = LayerSpec(final)
    return specs


def encoder_specs():
    return _fc_stack([DAY_SAMPLES, 200, 100, LATENT_DIM])


def decoder_specs():
    return _fc_stack([LATENT_DIM, 100, 200, DAY_SAMPLES])


def discriminator_specs():
    return _fc_stack([LATENT_DIM, 500, 500, 1], final="sigmoid")


@dataclass
class DaaeModel:
    seed: int = 0
    encoder: Sequential = field(default=None)
    decoder: Sequential = field(default=None)
    discriminator: Sequential = field(default=None)

    def __post_init__(self):
        if self.encoder is None:
            self.encoder = Sequential(encoder_specs(), seed=self.seed)
            self.decoder = Sequential(decoder_specs(), seed=self.seed + 1)
            self.discriminator = Sequential(discriminator_specs(), seed=self.seed + 2)
            self.decoder.layers[-2].params["bias"][:] = OUTPUT_BIAS_INIT

    def encode(self, samples):
        return self.encoder.forward(_encoder_input(to_unit(samples)))

    def reconstruct(self, samples: np.ndarray) -> np.ndarray:
        """Denoise an array of log-light days, shape (N, 480) or (480,)."""
        x = np.asarray(samples, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != DAY_SAMPLES:
            raise ValueError(f"expected {DAY_SAMPLES} samples per day, got {x.shape[1]}")
        out = self.decoder.forward(self.encoder.forward(_encoder_input(to_unit(x))))
        out = from_unit(out - DECODER_OFFSET)
        return out[0] if single else out

    def state_dict(self) -> dict:
        state = {}
        for prefix, net in (("enc", self.encoder), ("dec", self.decoder), ("dis", self.discriminator)):
            state.update({f"{prefix}.{k}": v for k, v in net.state_dict().items()})
        return state

    def load_state_dict(self, state: dict):
        for prefix, net in (("enc", self.encoder), ("dec", self.decoder), ("dis", self.discriminator)):
            net.load_state_dict({k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")})

    def checksum(self) -> int:
        return checksum(self.state_dict())

    def save(self, path, extra: dict | None = None):
        sidecar = {
            "kind": "daae",
            "encoder": [s.to_json() for s in self.encoder.specs],
            "decoder": [s.to_json() for s in self.decoder.specs],
            "discriminator": [s.to_json() for s in self.discriminator.specs],
            "preprocessing": {"resolution_min": 3.0, "samples": DAY_SAMPLES, "log_offset": LOG_OFFSET,
                              "log_span": LOG_SPAN},
            "seed": self.seed,
        }
        sidecar.update(extra or {})
        save_checkpoint(path, self.state_dict(), sidecar)

    @classmethod
    def load(cls, path) -> "DaaeModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "daae":
            raise ValueError(f"{path} is not a DAAE checkpoint")
        model = cls(seed=meta.get("seed", 0))
        model.load_state_dict(tensors)
        return model


def to_unit(x):
    return (np.asarray(x) - LOG_OFFSET) / LOG_SPAN


def _encoder_input(u):
    # centred encoder inputs keep first-layer ReLUs from dying; the decoder's
    # ReLU output still lives in the non-negative unit scale
    return u - 0.5


def from_unit(u):
    return np.asarray(u) * LOG_SPAN + LOG_OFFSET


def denoise(model: DaaeModel, record: DailyLightRecord) -> DailyLightRecord:
    """Reconstruct a 480-sample log-light day; metadata is carried over unchanged."""
    if not record.log_scale:
        raise ValueError("denoise expects a log-scale record")
    if len(record.samples) != DAY_SAMPLES:
        raise ValueError(f"denoise expects {DAY_SAMPLES} samples, got {len(record.samples)}")
    return record.with_samples(model.reconstruct(record.samples), denoised=True)


def pseudo_clean(samples: np.ndarray, width: int = 5) -> np.ndarray:
    """Best-effort clean target for field data: circular median filter, then the
    twilight ramps are made monotone (non-decreasing into the day, non-increasing
    out of it) around the brightest sample."""
    x = median_filter(np.asarray(samples, dtype=np.float64), size=width, mode="wrap")
    n = len(x)
    peak = int(np.argmax(x))
    trough = (peak + n // 2) % n
    rolled = np.roll(x, -trough)
    p = (peak - trough) % n
    rolled[:p + 1] = np.maximum.accumulate(rolled[:p + 1])
    rolled[p:] = np.maximum.accumulate(rolled[p:][::-1])[::-1]
    return np.roll(rolled, trough)


@dataclass
class DaaeTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    step_size: int = 1000
    gamma: float = 0.1
    recon_weight: float = 1.0
    adv_weight: float = 1.0
    seed: int = 0


def _bce_grad_wrt_prob(p, target_one: bool):
    p = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    return (-1.0 / p) if target_one else (1.0 / (1.0 - p))


def make_optimizers(model: DaaeModel, cfg: DaaeTrainConfig) -> tuple[Adam, Adam]:
    """(autoencoder, discriminator) optimizers."""
    return (Adam([model.encoder, model.decoder], lr=cfg.lr, step_size=cfg.step_size, gamma=cfg.gamma),
            Adam(model.discriminator, lr=cfg.lr, step_size=cfg.step_size, gamma=cfg.gamma))


def train_daae(noisy: np.ndarray, clean: np.ndarray, cfg: DaaeTrainConfig | None = None,
               model: DaaeModel | None = None, log_every: int = 0, optimizers: tuple[Adam, Adam] | None = None,
               start_epoch: int = 0):
    """Train on paired (noisy, clean) log-light days, each of shape (N, 480).

    Per batch: one discriminator step ascending
    E[log D(z_clean)] + E[log(1 - D(z_noisy))], then one autoencoder step on
    ``recon_weight * E||Psi(noisy) - clean||^2 + adv_weight * (-E[log D(z_noisy)])``. The two
    encoder objectives share one ADAM step because ADAM's per-parameter
    normalization would otherwise cancel any relative weighting.
    Epochs ``start_epoch .. cfg.epochs - 1`` are run, each with its own
    seeded shuffle; pass ``model`` and ``optimizers`` of an interrupted run to
    resume it. Returns the model and a per-epoch history of
    (recon_loss, disc_objective).
    """
    cfg = cfg or DaaeTrainConfig()
    noisy = np.asarray(noisy, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if len(noisy) == 0:
        raise ValueError("empty training corpus")
    if noisy.shape != clean.shape or noisy.shape[1] != DAY_SAMPLES:
        raise ValueError("noisy and clean must both be (N, 480)")
    model = model or DaaeModel(seed=cfg.seed)
    opt_ae, opt_dis = optimizers or make_optimizers(model, cfg)
    xn, xc = _encoder_input(to_unit(noisy)), _encoder_input(to_unit(clean))
    tc = to_unit(clean) + DECODER_OFFSET
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), epoch])).permutation(len(xn))
        rec_sum = dis_sum = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            bn, bc = xn[idx], xc[idx]

            # discriminator: ascend E[log D(z_clean)] + E[log(1 - D(z_noisy))]
            if cfg.adv_weight > 0:
                z_clean = model.encoder.forward(bc, train=True)
                z_noisy = model.encoder.forward(bn, train=True)
                opt_dis.zero_grad()
                p = model.discriminator.forward(np.concatenate([z_clean, z_noisy]), train=True)
                k = len(bc)
                dis = discriminator_objective(p[:k], p[k:])
                grad = np.empty_like(p)
                grad[:k] = _bce_grad_wrt_prob(p[:k], True) / k
                grad[k:] = _bce_grad_wrt_prob(p[k:], False) / (len(p) - k)
                model.discriminator.backward(grad)
                opt_dis.step()
            else:
                dis = float("nan")

            # reconstruction, plus the encoder's non-saturating adversarial term
            opt_ae.zero_grad()
            z = model.encoder.forward(bn, train=True)
            out = model.decoder.forward(z, train=True)
            diff = out - tc[idx]
            # per-record squared L2 norm on the unit scale, averaged over the batch
            rec = float(np.sum(diff * diff)) / len(diff)
            gz = model.decoder.backward(cfg.recon_weight * 2.0 * diff / len(diff))
            if cfg.adv_weight > 0:
                p = model.discriminator.forward(z, train=True)
                gz = gz + model.discriminator.backward(cfg.adv_weight * _bce_grad_wrt_prob(p, True) / len(p))
                model.discriminator.zero_grad()
            model.encoder.backward(gz)
            opt_ae.step()

            if not np.isfinite(rec) or (cfg.adv_weight > 0 and not np.isfinite(dis)):
                raise TrainingDiverged(f"DAAE diverged at epoch {epoch}: recon={rec}, dis={dis}")
            rec_sum += rec
            dis_sum += dis
            n_batches += 1
        history.append((rec_sum / n_batches, dis_sum / n_batches))
        if log_every and (epoch + 1) % log_every == 0:
            log.info("daae epoch %d recon %.5f dis %.4f", epoch + 1, *history[-1])
    return model, history


def discriminator_gap(model: DaaeModel, noisy: np.ndarray, clean: np.ndarray) -> float:
    """|mean D(z_noisy) - mean D(z_clean)| on the given days."""
    pn = model.discriminator.forward(model.encode(noisy))
    pc = model.discriminator.forward(model.encode(clean))
    return float(abs(pn.mean() - pc.mean()))
