"""Two-stage positioning then channel estimation.

Stage 1 maps pilots Y to UE coordinates. The predicted coordinates give a
geometric LoS channel. Stage 2 sees that LoS prior, the coordinates and the
min-norm back-projection of the pilot residual Y - W h_LoS, and predicts the
NLoS remainder. The full estimate is LoS prior + predicted NLoS.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .channel import CarrierConfig, los_channels
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Dataset
from .evaluation import min_norm_operator
from .geometry import ArrayKind, ArrayLayout, build_layout, half_wavelength
from .net import CpMambaNet, NetConfig
from .optim import Adam

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    def __init__(self, step, batch, value):
        super().__init__(f"non-finite loss {value} at step {step} (batch indices {list(batch)})")
        self.step = step
        self.batch = list(batch)


class DegeneratePosition(ValueError):
    pass


class IncompatibleModels(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    steps: int = 1000
    seed: int = 0
    report_every: int = 10
    # "constant" or "cosine" (decays to lr_floor * lr at the last step)
    lr_schedule: str = "constant"
    lr_floor: float = 0.01
    # stop as soon as a batch loss falls below this value
    target_loss: float | None = None
    # stage 2 only: train on ground-truth positions instead of stage-1 output
    oracle_positions: bool = False
    # stage 2 only: "physical" (batch MSE in channel units) or "scaled" (per-sample scaled MSE)
    stage2_loss: str = "physical"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.stage2_loss not in ("physical", "scaled"):
            raise ValueError(f"unknown stage-2 loss {self.stage2_loss!r}")
        if self.report_every < 1:
            raise ValueError("report_every must be >= 1")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant" or self.steps <= 1:
            return self.lr
        frac = step / (self.steps - 1)
        floor = self.lr * self.lr_floor
        return floor + 0.5 * (self.lr - floor) * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainResult:
    model: object
    trace: list  # (step, loss) rows at the report cadence
    initial_loss: float
    final_loss: float
    steps_run: int


@dataclass(frozen=True)
class Scales:
    y_scale: float
    h_scale: float
    r_max: float


def fit_scales(ds: Dataset) -> Scales:
    Y = ds.stack("Y")
    h = ds.stack("h")
    y_rms = float(np.sqrt(np.mean(np.abs(Y.astype(np.complex128)) ** 2)))
    h_rms = float(np.sqrt(np.mean(np.abs(h.astype(np.complex128)) ** 2)))
    return Scales(1.0 / y_rms, 1.0 / h_rms, float(ds.config.r_max))


def complex_planes(z: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """[S, A, B] complex -> [S, 2, A, B] float32 (Re, Im)."""
    return (np.stack([z.real, z.imag], axis=1) * scale).astype(np.float32)


def planes_to_complex(p: np.ndarray) -> np.ndarray:
    return p[:, 0].astype(np.float64) + 1j * p[:, 1].astype(np.float64)


def los_from_position(C_hat, layout: ArrayLayout, cfg: CarrierConfig, r_floor: float | None = None):
    """Geometric LoS channel(s) at estimated Cartesian position(s).

    ``C_hat`` is [2] (returns [K, N]) or [S, 2] (returns [S, K, N]). With
    ``r_floor`` set, radii are clamped to at least that value; otherwise a
    zero radius is an error.
    """
    C = np.asarray(C_hat, dtype=np.float64)
    single = C.ndim == 1
    C = np.atleast_2d(C)
    R = np.hypot(C[:, 0], C[:, 1])
    phi = np.arctan2(C[:, 1], C[:, 0])
    if r_floor is not None:
        R = np.maximum(R, r_floor)
    elif np.any(R == 0):
        raise DegeneratePosition("estimated position at the array centre has no defined LoS channel")
    out = los_channels(layout, R, phi, cfg)
    return out[0] if single else out


# --- models -------------------------------------------------------------------


def _meta(ds: Dataset) -> dict:
    cfg = ds.config
    return {
        "kind": {"name": cfg.kind.name, "params": list(cfg.kind.params), "eta": cfg.kind.eta},
        "carrier": dataclasses.asdict(cfg.carrier),
        "P": cfg.P,
        "N_RF": cfg.N_RF,
        "combiner_seed": cfg.seed,
        "gen_digest": cfg.digest(),
    }


def _compatible(a: dict, b: dict) -> bool:
    keys = ("kind", "carrier", "P", "N_RF", "combiner_seed")
    return all(a.get(k) == b.get(k) for k in keys)


class PositionModel:
    def __init__(self, net: CpMambaNet, scales: Scales, meta: dict):
        self.net = net
        self.scales = scales
        self.meta = meta

    @classmethod
    def build(cls, ds: Dataset, net_cfg: NetConfig | None = None, scales: Scales | None = None):
        K, M = ds.config.carrier.K, ds.config.P * ds.config.N_RF
        base = net_cfg or NetConfig()
        cfg = dataclasses.replace(base, head="position", in_channels=2, height=K, width=M)
        return cls(CpMambaNet(cfg), scales or fit_scales(ds), _meta(ds))

    def encode(self, Y: np.ndarray) -> np.ndarray:
        return complex_planes(np.asarray(Y), self.scales.y_scale)

    def forward(self, x):
        """Normalized coordinates [B, 2] (units of r_max)."""
        return self.net(x)

    def predict(self, Y: np.ndarray, chunk: int = 64) -> np.ndarray:
        """[S, K, M] pilots -> [S, 2] coordinates in meters."""
        Y = np.asarray(Y)
        out = []
        with ad.no_grad():
            for i in range(0, len(Y), chunk):
                out.append(self.net(self.encode(Y[i : i + chunk])).value.astype(np.float64))
        return np.concatenate(out) * self.scales.r_max if out else np.zeros((0, 2))

    def config_dict(self) -> dict:
        return {
            "stage": "pos",
            "net": self.net.cfg.to_dict(),
            "scales": dataclasses.asdict(self.scales),
            "meta": self.meta,
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.config_dict(), self.net.state_dict())

    @classmethod
    def load(cls, path) -> "PositionModel":
        config, params = load_checkpoint(path)
        if config.get("stage") != "pos":
            raise IncompatibleModels(f"{path} is not a positioning checkpoint")
        net = CpMambaNet(NetConfig.from_dict(config["net"]))
        net.load_state_dict(params)
        return cls(net, Scales(**config["scales"]), config["meta"])


class ChannelModel:
    IN_CHANNELS = 6

    def __init__(self, net: CpMambaNet, scales: Scales, meta: dict, Wbar: np.ndarray):
        self.net = net
        self.scales = scales
        self.meta = meta
        self.Wbar = Wbar
        self.pinv = min_norm_operator(Wbar)

    @classmethod
    def build(cls, ds: Dataset, net_cfg: NetConfig | None = None, scales: Scales | None = None):
        K, N = ds.config.carrier.K, ds.layout.n_elements
        base = net_cfg or NetConfig()
        cfg = dataclasses.replace(base, head="channel", in_channels=cls.IN_CHANNELS, height=K, width=N)
        return cls(CpMambaNet(cfg), scales or fit_scales(ds), _meta(ds), ds.combiner.stacked)

    def sample_scales(self, Y) -> np.ndarray:
        """Per-sample input multiplier 1 / rms(W^+ Y), observable from the pilots alone."""
        back = np.asarray(Y) @ self.pinv.T
        rms = np.sqrt(np.mean(np.abs(back) ** 2, axis=(1, 2)))
        return 1.0 / np.maximum(rms, np.finfo(np.float64).tiny)

    def encode(self, C_hat, h_los_hat, Y):
        """Network input and per-sample scales.

        Planes: Re/Im LoS prior, Re/Im back-projected residual W^+(Y - W h_LoS),
        then x and y in units of r_max, clipped to [-1, 1] so that a wild
        stage-1 estimate cannot overflow the network. Complex planes are
        multiplied by the per-sample scale so that near and far users look
        alike to the network.
        """
        sc = self.scales
        C_hat = np.asarray(C_hat, dtype=np.float64)
        h_los_hat = np.asarray(h_los_hat)
        Y = np.asarray(Y)
        s = self.sample_scales(Y)
        back = (Y - h_los_hat @ self.Wbar.T) @ self.pinv.T
        S, K, N = h_los_hat.shape
        coords = np.broadcast_to(np.clip(C_hat / sc.r_max, -1.0, 1.0)[:, :, None, None], (S, 2, K, N))
        w = s[:, None, None]
        x = np.concatenate(
            [complex_planes(h_los_hat * w), complex_planes(back * w), coords.astype(np.float32)],
            axis=1,
        )
        return x, s

    def forward(self, x):
        """Scaled NLoS planes [B, 2, K, N]; divide by the sample scale for physical units."""
        return self.net(x)

    def predict_nlos(self, C_hat, h_los_hat, Y, chunk: int = 32) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(Y), chunk):
                x, s = self.encode(C_hat[i : i + chunk], h_los_hat[i : i + chunk], Y[i : i + chunk])
                out.append(planes_to_complex(self.net(x).value) / s[:, None, None])
        return np.concatenate(out)

    def config_dict(self) -> dict:
        return {
            "stage": "ch",
            "net": self.net.cfg.to_dict(),
            "scales": dataclasses.asdict(self.scales),
            "meta": self.meta,
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.config_dict(), self.net.state_dict())

    @classmethod
    def load(cls, path, Wbar: np.ndarray) -> "ChannelModel":
        config, params = load_checkpoint(path)
        if config.get("stage") != "ch":
            raise IncompatibleModels(f"{path} is not a channel-estimation checkpoint")
        net = CpMambaNet(NetConfig.from_dict(config["net"]))
        net.load_state_dict(params)
        return cls(net, Scales(**config["scales"]), config["meta"], Wbar)


def layout_from_meta(meta: dict) -> tuple[ArrayLayout, CarrierConfig]:
    carrier = CarrierConfig(**meta["carrier"])
    k = meta["kind"]
    kind = ArrayKind(k["name"], tuple(k["params"]), k["eta"])
    return build_layout(kind, half_wavelength(carrier.f_c)), carrier


# --- training -------------------------------------------------------------------


def _batches(n: int, size: int, seed: int):
    """Endless stream of index batches from reshuffled epochs."""
    rng = np.random.default_rng(seed)
    size = min(size, n)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - size + 1, size):
            yield np.sort(perm[i : i + size])


def _fit(net, params, make_batch, loss_fn, n, cfg: TrainConfig, report_scale=1.0):
    opt = Adam(params, lr=cfg.lr)
    batches = _batches(n, cfg.batch_size, cfg.seed)
    trace = []
    initial = final = float("nan")
    steps_run = 0
    for step in range(cfg.steps):
        idx = next(batches)
        x, target = make_batch(idx)
        loss = loss_fn(net(x), target)
        value = float(loss.value)
        if not math.isfinite(value):
            raise NumericalFailure(step, idx, value)
        reported = value * report_scale
        if step == 0:
            initial = reported
        final = reported
        steps_run = step + 1
        if step % cfg.report_every == 0:
            trace.append((step, reported))
        if cfg.target_loss is not None and reported < cfg.target_loss:
            if trace[-1][0] != step:
                trace.append((step, reported))
            log.info("target loss reached at step %d", step)
            break
        ad.backward(loss)
        opt.step(cfg.lr_at(step))
        opt.zero_grad()
    return trace, initial, final, steps_run


def train_stage1(train: Dataset, net_cfg: NetConfig | None = None, cfg: TrainConfig = TrainConfig(),
                 scales: Scales | None = None) -> TrainResult:  # fmt: skip
    """Fit the positioning network; loss is mean squared coordinate error in m^2."""
    model = PositionModel.build(train, net_cfg, scales)
    x_all = model.encode(train.stack("Y"))
    C_all = train.stack("C").astype(np.float32)
    r_max = np.float32(model.scales.r_max)

    def make_batch(idx):
        return x_all[idx], C_all[idx]

    def loss_fn(pred, target):
        return ad.batch_sq_error(ad.mul(pred, r_max), target)

    trace, initial, final, steps = _fit(model.net, model.net.parameters(), make_batch, loss_fn, len(train), cfg)
    return TrainResult(model, trace, initial, final, steps)


def stage2_targets(ds: Dataset, pos_model: PositionModel | None, oracle: bool = False):
    """Stage-1 positions and LoS priors for every sample of ``ds``."""
    C_hat = ds.stack("C") if oracle or pos_model is None else pos_model.predict(ds.stack("Y"))
    h_los_hat = los_from_position(C_hat, ds.layout, ds.config.carrier, r_floor=ds.config.r_min)
    if h_los_hat.ndim == 2:
        h_los_hat = h_los_hat[None]
    return C_hat, h_los_hat


def train_stage2(train: Dataset, pos_model: PositionModel, net_cfg: NetConfig | None = None,
                 cfg: TrainConfig = TrainConfig(), scales: Scales | None = None) -> TrainResult:  # fmt: skip
    """Fit the NLoS network on top of a frozen positioning model.

    With ``cfg.stage2_loss == "physical"`` the optimized loss is
    h_scale^2 (1/V) sum_i ||h_i - h~_i||^2, i.e. the plain batch MSE of the
    channel estimate up to a constant; the trace reports it in physical units.
    ``"scaled"`` instead weights every sample by its own input scale, which
    equalizes near and far users.
    """
    if pos_model is not None and not _compatible(pos_model.meta, _meta(train)):
        raise IncompatibleModels("positioning model was trained for a different array/combiner")
    model = ChannelModel.build(train, net_cfg, scales or (pos_model.scales if pos_model else None))
    C_hat, h_los_hat = stage2_targets(train, pos_model, cfg.oracle_positions)
    x_all, s = model.encode(C_hat, h_los_hat, train.stack("Y"))
    resid = train.stack("h").astype(np.complex128) - h_los_hat
    target_all = complex_planes(resid * s[:, None, None])
    if cfg.stage2_loss == "physical":
        # ||net/s - resid||^2 h_scale^2 = ||net - s resid||^2 (h_scale/s)^2
        root_w = (model.scales.h_scale / s).astype(np.float32)
        report = 1.0 / model.scales.h_scale**2
    else:
        root_w = np.ones(len(s), np.float32)
        report = 1.0

    def make_batch(idx):
        return x_all[idx], (target_all[idx], root_w[idx, None, None, None])

    def loss_fn(pred, target):
        t, rw = target
        return ad.batch_sq_error(ad.mul(pred, rw), t * rw)

    trace, initial, final, steps = _fit(
        model.net, model.net.parameters(), make_batch, loss_fn, len(train), cfg, report_scale=report
    )
    return TrainResult(model, trace, initial, final, steps)


def infer(Y, pos_model: PositionModel, ch_model: ChannelModel | None, layout: ArrayLayout,
          carrier: CarrierConfig, r_floor: float = 0.1):  # fmt: skip
    """Joint estimate for pilots Y [S, K, M]: returns (C_hat [S, 2], h_hat [S, K, N])."""
    if ch_model is not None and not _compatible(pos_model.meta, ch_model.meta):
        raise IncompatibleModels("positioning and channel checkpoints disagree on array/combiner")
    kind = pos_model.meta["kind"]
    if kind["name"] != layout.kind.name or tuple(kind["params"]) != layout.kind.params:
        raise IncompatibleModels(f"checkpoint array {kind} does not match layout {layout.kind.label()}")
    Y = np.asarray(Y)
    C_hat = pos_model.predict(Y)
    h_los_hat = np.atleast_3d(los_from_position(C_hat, layout, carrier, r_floor=r_floor))
    if ch_model is None:
        return C_hat, h_los_hat
    return C_hat, h_los_hat + ch_model.predict_nlos(C_hat, h_los_hat, Y)


def write_trace_csv(trace, path) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for step, loss in trace:
            fh.write(f"{step},{loss!r}\n")
