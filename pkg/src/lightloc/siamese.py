"""Siamese embedding models, pair construction, contrastive training and the
Gaussian-kernel spatial softmax over embedding distances."""
from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .astro import night_center_astro
from .nn import Adam, LayerSpec, Sequential
from .nn.checkpoint import checksum, load_checkpoint, save_checkpoint
from .nn.losses import PairLabel, contrastive_loss
from .prep import center_index, window_at, window_length
from .records import AlignedWindow
from .reflib import day_of_year

log = logging.getLogger(__name__)

MODALITIES = ("light", "temperature")
RESOLUTION = {"light": 3.0, "temperature": 60.0}
# affine input normalization (offset, scale) applied before the first conv
INPUT_NORM = {"light": (2.0, 3.0), "temperature": (15.0, 10.0)}
POSITIVE_RADIUS_DEG = 0.5
MIN_CALIBRATION_PAIRS = 30


class TrainingDiverged(FloatingPointError):
    pass


def _conv_block(c_in, c_out, kernel):
    return [
        LayerSpec("conv1d", {"in_channels": c_in, "out_channels": c_out, "kernel": kernel}),
        LayerSpec("batchnorm", {"features": c_out}),
        LayerSpec("relu"),
        LayerSpec("maxpool", {"width": 2}),
    ]


def _head(flat, hidden, embed):
    return [
        LayerSpec("flatten"),
        LayerSpec("fc", {"fan_in": flat, "fan_out": hidden}),
        LayerSpec("relu"),
        LayerSpec("dropout", {"p": 0.3}),
        LayerSpec("fc", {"fan_in": hidden, "fan_out": embed}),
    ]


def light_specs(window_len: int = 361, embed_dim: int = 64) -> list[LayerSpec]:
    """Four conv blocks (128 x 9, then 3 x 128 x 5) and a 512 -> 64 head."""
    specs = _conv_block(1, 128, 9)
    for _ in range(3):
        specs += _conv_block(128, 128, 5)
    length = window_len
    for _ in range(4):
        length //= 2
    return specs + _head(128 * length, 512, embed_dim)


def temp_specs(window_len: int = 19, embed_dim: int = 32) -> list[LayerSpec]:
    """Two 32 x 3 conv blocks and a 64 -> 32 head."""
    specs = _conv_block(1, 32, 3) + _conv_block(32, 32, 3)
    return specs + _head(32 * (window_len // 4), 64, embed_dim)


@dataclass
class SiameseModel:
    modality: str
    net: Sequential
    window_len: int
    resolution: float
    sigma: float | None = None
    margin: float = 1.0
    seed: int = 0

    @classmethod
    def create(cls, modality: str, seed: int = 0, margin: float = 1.0) -> "SiameseModel":
        if modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        res = RESOLUTION[modality]
        n = window_length(res)
        specs = light_specs(n) if modality == "light" else temp_specs(n)
        return cls(modality, Sequential(specs, seed=seed), n, res, None, margin, seed)

    @property
    def embedding_dim(self) -> int:
        return self.net.specs[-1].dims["fan_out"]

    def fingerprint(self) -> dict:
        off, scale = INPUT_NORM[self.modality]
        return {"resolution_min": self.resolution, "window_len": self.window_len,
                "input_offset": off, "input_scale": scale}

    def prepare(self, windows) -> np.ndarray:
        """Stack window samples into a normalized ``(N, L, 1)`` batch."""
        x = np.asarray(windows, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.window_len:
            raise ValueError(f"window length {x.shape[1]} != model's {self.window_len}")
        off, scale = INPUT_NORM[self.modality]
        return ((x - off) / scale)[:, :, None]

    def embed_array(self, windows, chunk: int = 256) -> np.ndarray:
        """Eval-mode embeddings of an ``(N, L)`` array of window samples."""
        x = self.prepare(windows)
        out = [self.net.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.embedding_dim))

    def checksum(self) -> int:
        return checksum(self.net.state_dict())

    def save(self, path, extra: dict | None = None):
        sidecar = {
            "kind": "siamese",
            "modality": self.modality,
            "layers": [s.to_json() for s in self.net.specs],
            "sigma": self.sigma,
            "margin": self.margin,
            "seed": self.seed,
            "preprocessing": self.fingerprint(),
        }
        sidecar.update(extra or {})
        save_checkpoint(path, self.net.state_dict(), sidecar)

    @classmethod
    def load(cls, path) -> "SiameseModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "siamese":
            raise ValueError(f"{path} is not a Siamese checkpoint")
        specs = [LayerSpec.from_json(d) for d in meta["layers"]]
        net = Sequential(specs, seed=meta.get("seed", 0))
        net.load_state_dict(tensors)
        pre = meta["preprocessing"]
        return cls(meta["modality"], net, pre["window_len"], pre["resolution_min"], meta.get("sigma"),
                   meta.get("margin", 1.0), meta.get("seed", 0))


def _check_window(model: SiameseModel, w: AlignedWindow):
    if w.modality != model.modality:
        raise ValueError(f"{w.modality} window given to a {model.modality} model")
    if len(w) != model.window_len or w.resolution != model.resolution:
        raise ValueError("window does not match the model's preprocessing fingerprint")


def embed(model: SiameseModel, w: AlignedWindow) -> np.ndarray:
    _check_window(model, w)
    return model.embed_array(w.samples)[0]


def similarity(model: SiameseModel, a: AlignedWindow, b: AlignedWindow) -> float:
    """Euclidean distance between embeddings; smaller means more alike."""
    _check_window(model, a)
    _check_window(model, b)
    e = model.embed_array(np.stack([a.samples, b.samples]))
    return float(np.linalg.norm(e[0] - e[1]))


def spatial_softmax(scores, sigma: float) -> np.ndarray:
    """p_i proportional to exp(-phi_i^2 / (2 sigma^2)), normalized over the references."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    phi = np.asarray(scores, dtype=np.float64).ravel()
    if phi.size == 0:
        raise ValueError("no scores")
    if not np.any(np.isfinite(phi)):
        raise ValueError("all scores are infinite")
    logits = -(phi * phi) / (2.0 * sigma * sigma)
    return np.exp(logits - logsumexp(logits))


def sigma_from_scores(scores) -> float:
    s = np.asarray(scores, dtype=np.float64)
    if len(s) < MIN_CALIBRATION_PAIRS:
        raise ValueError(f"need at least {MIN_CALIBRATION_PAIRS} positive pairs, got {len(s)}")
    sigma = float(np.std(s, ddof=1))
    if not sigma > 0:
        raise ValueError("positive-pair scores have zero spread (collapsed embedding)")
    return sigma


# --------------------------------------------------------------------------- #
# pairs


@dataclass
class TrainingPair:
    ref_window: AlignedWindow
    tgt_window: AlignedWindow
    label: PairLabel
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PairPolicy:
    """How training pairs are drawn.

    Negatives are drawn uniformly from all eligible negatives, except that a
    ``hard_fraction`` of them come from negatives within ``hard_radius_deg``
    (per axis) of the target, where the embedding must do its finest work.
    """

    n_pairs: int = 2000
    window_days: int = 5
    positive_fraction: float = 0.5
    radius_deg: float = POSITIVE_RADIUS_DEG
    hard_fraction: float = 0.5
    hard_radius_deg: float = 3.0
    cross_year: bool = True


def is_positive(dlat, dlon, radius: float = POSITIVE_RADIUS_DEG):
    return (np.abs(dlat) < radius) & (np.abs(dlon) < radius)


def calibrate_sigma(model: SiameseModel, positive_pairs) -> float:
    """Sample standard deviation of the model's distances over positive pairs; stored on the model."""
    pairs = [p for p in positive_pairs if p.label is PairLabel.POSITIVE]
    if len(pairs) < MIN_CALIBRATION_PAIRS:
        raise ValueError(f"need at least {MIN_CALIBRATION_PAIRS} positive pairs, got {len(pairs)}")
    model.sigma = sigma_from_scores(pair_distances(model, pairs))
    return model.sigma


def pair_distances(model: SiameseModel, pairs) -> np.ndarray:
    if not pairs:
        return np.zeros(0)
    ea = model.embed_array(np.stack([p.ref_window.samples for p in pairs]))
    eb = model.embed_array(np.stack([p.tgt_window.samples for p in pairs]))
    return np.linalg.norm(ea - eb, axis=1)


def _draw(rng, pool):
    return int(pool[rng.integers(len(pool))])


class _Candidates:
    """Reference candidates of one date key, sorted by latitude for band lookups."""

    def __init__(self, idx, lat, lon):
        order = np.argsort(lat[idx], kind="stable")
        self.idx = idx[order]
        self.lat = lat[self.idx]
        self.lon = lon[self.idx]

    def band(self, lat0, half):
        lo = np.searchsorted(self.lat, lat0 - half, side="right")
        hi = np.searchsorted(self.lat, lat0 + half, side="left")
        return slice(lo, hi)


def make_pairs(library, policy: PairPolicy = PairPolicy(), seed: int = 0, targets=None) -> list[TrainingPair]:
    """Balanced positive/negative pairs, deterministic under ``seed``.

    Light: targets are the library's measured records; references are any
    entry (measured or longitude-synthesized) within ``window_days`` by day of
    year and from a different year. Both windows are cut around the
    reference's night center.

    Temperature: ``targets`` are sensor records; references are the library's
    station/Kriged records within ``window_days`` calendar days. Both windows
    are cut around the astronomical night center of the reference location on
    the target's date.
    """
    rng = np.random.default_rng(seed)
    a = library.arrays()
    light = library.modality == "light"
    if light:
        tgt_pool = np.flatnonzero(a["provenance"] == 0)
        get_target = library.records.__getitem__
    else:
        if not targets:
            raise ValueError("temperature pairs need sensor target records")
        tgt_pool = np.arange(len(targets))
        get_target = targets.__getitem__
    if len(tgt_pool) == 0:
        raise ValueError("no eligible pairs: no target records")
    lat, lon_eff, year, parent = a["lat"], a["lon_eff"], a["year"], a["parent"]
    cache: dict = {}

    def candidates(date):
        key = day_of_year(date) if light else date.toordinal()
        if key not in cache:
            cache[key] = _Candidates(library.query(date, policy.window_days, same_year=not light), lat, lon_eff)
        return cache[key]

    def allowed(idx, t, tgt):
        if not light:
            return np.ones(len(idx), dtype=bool)
        ok = parent[idx] != t
        if policy.cross_year:
            ok &= year[idx] != tgt.date.year
        return ok

    r = policy.radius_deg
    n_pos = int(round(policy.n_pairs * policy.positive_fraction))
    want = [True] * n_pos + [False] * (policy.n_pairs - n_pos)
    rng.shuffle(want)
    pairs: list[TrainingPair] = []
    misses = 0
    for positive in want:
        while True:
            t = _draw(rng, tgt_pool)
            tgt = get_target(t)
            c = candidates(tgt.date)
            tlat, tlon = tgt.coord.lat, tgt.coord.lon
            pick = None
            if positive:
                sl = c.band(tlat, r)
                sub = c.idx[sl]
                ok = (np.abs(c.lon[sl] - tlon) < r) & allowed(sub, t, tgt)
                if ok.any():
                    pick = _draw(rng, sub[ok])
            else:
                if rng.random() < policy.hard_fraction:
                    h = policy.hard_radius_deg
                    sl = c.band(tlat, h)
                    sub = c.idx[sl]
                    dlon = np.abs(c.lon[sl] - tlon)
                    ok = (dlon < h) & ~((np.abs(c.lat[sl] - tlat) < r) & (dlon < r)) & allowed(sub, t, tgt)
                    if ok.any():
                        pick = _draw(rng, sub[ok])
                if pick is None and len(c.idx):
                    # uniform over the eligible negatives by rejection
                    for _ in range(200):
                        k = int(rng.integers(len(c.idx)))
                        i = c.idx[k:k + 1]
                        if is_positive(c.lat[k] - tlat, c.lon[k] - tlon, r) or not allowed(i, t, tgt)[0]:
                            continue
                        pick = int(i[0])
                        break
            if pick is not None:
                break
            misses += 1
            if misses > 50 * policy.n_pairs + 1000:
                raise ValueError("no eligible pairs under this policy")
        pairs.append(build_pair(library, pick, tgt, positive))
    return pairs


def build_pair(library, ref_index: int, tgt, positive: bool) -> TrainingPair:
    entry_arrays = library.arrays()
    parent = int(entry_arrays["parent"][ref_index])
    ref_rec = library.records[parent]
    if library.modality == "light":
        center = float(library.entry_night_centers([ref_index])[0])
        shift = int(entry_arrays["shift"][ref_index])
        idx, rem = center_index(center, ref_rec.resolution)
        # the shifted copy's window is the parent's window at its own center
        ref_w = window_at(ref_rec.samples, ref_rec.resolution, idx - shift, center, rem, "light")
    else:
        ref_coord = ref_rec.coord
        center = night_center_astro(ref_coord, tgt.date)
        idx, rem = center_index(center, ref_rec.resolution)
        ref_w = window_at(ref_rec.samples, ref_rec.resolution, idx, center, rem, "temperature")
    tgt_w = window_at(tgt.samples, tgt.resolution, idx, center, rem, ref_w.modality)
    meta = {
        "ref_index": int(ref_index),
        "ref_coord": (float(entry_arrays["lat"][ref_index]), float(entry_arrays["lon_eff"][ref_index])),
        "tgt_coord": tgt.coord.as_tuple(),
        "ref_date": dt.date.fromordinal(int(entry_arrays["ordinal"][ref_index])).isoformat(),
        "tgt_date": tgt.date.isoformat(),
    }
    return TrainingPair(ref_w, tgt_w, PairLabel.POSITIVE if positive else PairLabel.NEGATIVE, meta)


# --------------------------------------------------------------------------- #
# training


@dataclass
class SiameseTrainConfig:
    epochs: int = 1
    batch_pairs: int = 16
    lr: float = 1e-3
    step_size: int = 1000
    gamma: float = 0.1
    seed: int = 0


def make_optimizer(model: SiameseModel, cfg: SiameseTrainConfig) -> Adam:
    return Adam(model.net, lr=cfg.lr, step_size=cfg.step_size, gamma=cfg.gamma)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Shuffling/dropout stream of one epoch, so a resumed run replays it exactly."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))


def train_siamese(model: SiameseModel, pairs, cfg: SiameseTrainConfig | None = None, calibrate: bool = True,
                  log_every: int = 0, optimizer: Adam | None = None, start_epoch: int = 0):
    """Contrastive training on embedding distances, then sigma calibration.

    Runs epochs ``start_epoch .. cfg.epochs - 1``; pass the ``optimizer`` of an
    interrupted run to resume it. Returns the model and the mean loss of each
    epoch run.
    """
    cfg = cfg or SiameseTrainConfig()
    if not pairs:
        raise ValueError("empty pair stream")
    opt = optimizer or make_optimizer(model, cfg)
    ref = model.prepare(np.stack([p.ref_window.samples for p in pairs]))
    tgt = model.prepare(np.stack([p.tgt_window.samples for p in pairs]))
    positive = np.array([p.label is PairLabel.POSITIVE for p in pairs])
    history = []
    step = 0
    for epoch in range(start_epoch, cfg.epochs):
        rng = epoch_rng(cfg.seed, epoch)
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), cfg.batch_pairs):
            idx = order[start:start + cfg.batch_pairs]
            b = len(idx)
            opt.zero_grad()
            emb = model.net.forward(np.concatenate([ref[idx], tgt[idx]]), train=True, rng=rng)
            diff = emb[:b] - emb[b:]
            dist = np.sqrt((diff * diff).sum(axis=1))
            loss, dl = contrastive_loss(dist, positive[idx], model.margin)
            batch_loss = float(loss.mean())
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(f"contrastive loss became {batch_loss} at epoch {epoch}, step {step}")
            with np.errstate(invalid="ignore", divide="ignore"):
                unit = np.where(dist[:, None] > 0, diff / dist[:, None], 0.0)
            g = (dl / b)[:, None] * unit
            model.net.backward(np.concatenate([g, -g]))
            opt.step()
            total += batch_loss * b
            step += 1
            if log_every and step % log_every == 0:
                log.info("siamese %s step %d loss %.4f", model.modality, step, batch_loss)
        history.append(total / len(pairs))
    if calibrate:
        calibrate_sigma(model, [p for p in pairs if p.label is PairLabel.POSITIVE])
    return model, history
