"""Mask-conditioned light field reconstruction network, loss, and training loop.

The network is fully convolutional: 11 3x3 conv layers, the middle four
dilated at rates 2-4-8-16, each but the last followed by batch norm and ELU,
the last by a sigmoid that pins the output to (0, 1). It consumes the coded
sensor patch concatenated channel-wise with the matching sensing tensor
patch, which is what makes a single parameter set valid for any patch
location and any mask drawn from the training distribution.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm, Conv2D, ELU, Sequential, Sigmoid
from .lightfield import CodedImage, LightField, SensingTensor
from .optim import AdamState, adam_step, exp_decay_lr

DEFAULT_DILATIONS = (1, 1, 1, 2, 4, 8, 16, 1, 1, 1, 1)


@dataclass(frozen=True)
class ReconNetConfig:
    nv: int = 5
    channels: int = 128
    n_layers: int = 11
    dilations: tuple = DEFAULT_DILATIONS
    kernel: int = 3
    beta: float = 0.004
    patch: tuple = (100, 100)
    batch: int = 32

    def __post_init__(self):
        if self.n_layers != len(self.dilations):
            raise ValueError("dilation schedule length must equal layer count")
        dilated = [r for r in self.dilations if r > 1]
        if dilated != [2, 4, 8, 16]:
            raise ValueError(f"expected exactly four dilated layers at rates 2,4,8,16, got {dilated}")
        if self.nv < 1 or self.channels < 1:
            raise ValueError("nv and channels must be positive")

    @property
    def phi_channels(self) -> int:
        return self.nv * self.nv * 3

    @property
    def in_channels(self) -> int:
        return 1 + self.phi_channels

    @property
    def out_channels(self) -> int:
        return self.nv * self.nv * 3


def pack_input(image: CodedImage, phi: SensingTensor) -> np.ndarray:
    """Stack measurement and attenuated sensing weights into [h, w, 1 + Nv^2*3].

    Channel 0 is the coded image; channels 1.. hold the effective (attenuated)
    sensing tensor flattened in the canonical angular-color order, so the two
    inputs live on comparable scales.
    """
    if (image.height, image.width) != (phi.height, phi.width):
        raise ValueError(
            f"coded image {image.data.shape} and sensing tensor "
            f"{phi.weights.shape[:2]} are not aligned"
        )
    h, w, q = phi.height, phi.width, phi.nv * phi.nv * 3
    out = np.empty((h, w, 1 + q), dtype=np.float32)
    out[:, :, 0] = image.data
    out[:, :, 1:] = phi.weights.reshape(h, w, q) * phi.attenuation
    return out


def unpack_input(packed: np.ndarray, nv: int) -> tuple[CodedImage, SensingTensor]:
    """Exact inverse of :func:`pack_input`."""
    q = nv * nv * 3
    if packed.ndim != 3 or packed.shape[2] != 1 + q:
        raise ValueError(f"packed input shape {packed.shape} does not match nv={nv}")
    h, w = packed.shape[:2]
    image = CodedImage(packed[:, :, 0])
    weights = packed[:, :, 1:].reshape(h, w, nv, nv, 3) * (nv * nv * 3)
    return image, SensingTensor(np.clip(weights, 0.0, 1.0))


def build_recon_net(cfg: ReconNetConfig, seed: int = 0, dtype=np.float32) -> Sequential:
    """Assemble the layer stack; the last two convs carry Nv^2*3 channels."""
    rng = np.random.default_rng(seed)
    layer_seeds = rng.integers(0, 2**63 - 1, size=cfg.n_layers)
    layers = []
    in_ch = cfg.in_channels
    for i, rate in enumerate(cfg.dilations):
        last = i == cfg.n_layers - 1
        out_ch = cfg.out_channels if i >= cfg.n_layers - 2 else cfg.channels
        layers.append(
            Conv2D(in_ch, out_ch, kernel=cfg.kernel, dilation=rate,
                   seed=int(layer_seeds[i]), dtype=dtype)
        )
        if last:
            layers.append(Sigmoid())
        else:
            layers.append(BatchNorm(out_ch, dtype=dtype))
            layers.append(ELU())
        in_ch = out_ch
    return Sequential(layers)


class ReconNet:
    """Config + parameter bundle with light field in/out plumbing."""

    def __init__(self, cfg: ReconNetConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.net = build_recon_net(cfg, seed=seed, dtype=dtype)

    def forward_packed(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.net.forward(x, train=train)

    def backward(self, g_out: np.ndarray) -> np.ndarray:
        return self.net.backward(g_out)

    def reconstruct(self, image: CodedImage, phi: SensingTensor, train: bool = False) -> LightField:
        x = pack_input(image, phi)[None]
        out = self.forward_packed(x, train=train)[0]
        h, w = out.shape[:2]
        nv = self.cfg.nv
        return LightField(out.reshape(h, w, nv, nv, 3))

    def params(self) -> dict:
        return self.net.params()

    def grads(self) -> dict:
        return self.net.grads()

    def state(self) -> dict:
        return self.net.state()

    def set_params(self, values: dict) -> None:
        self.net.set_params(values)

    def set_state(self, values: dict) -> None:
        self.net.set_state(values)


def recon_forward(cfg: ReconNetConfig, params: dict, image: CodedImage,
                  phi: SensingTensor, state: dict | None = None) -> LightField:
    """Run the network described by (cfg, params) on one coded patch."""
    if phi.nv != cfg.nv:
        raise ValueError(f"sensing tensor nv={phi.nv} does not match config nv={cfg.nv}")
    model = ReconNet(cfg, seed=0)
    model.set_params(params)
    if state:
        model.set_state(state)
    return model.reconstruct(image, phi, train=False)


def recon_loss(
    l_hat,
    l,
    image: CodedImage,
    phi: SensingTensor,
    beta: float,
    data_norm: str = "l1",
):
    """Training objective: data distance plus measurement-consistency penalty.

    loss = ||l_hat - l||_1 (or squared l2 in fine-tune mode)
         + beta * || forward(phi, l_hat) - i ||_2^2

    Returns ``(loss, grad)`` where ``grad`` is d loss / d l_hat as a 5-D
    array; the consistency term backpropagates through the fixed linear
    forward map via its adjoint.
    """
    lh = l_hat.data if isinstance(l_hat, LightField) else np.asarray(l_hat)
    lt = l.data if isinstance(l, LightField) else np.asarray(l)
    if lh.shape != lt.shape or lh.shape != phi.weights.shape:
        raise ValueError("light field, target and sensing tensor shapes must match")
    res = lh - lt
    if data_norm == "l1":
        loss_data = float(np.abs(res).sum())
        grad = np.sign(res)
    elif data_norm == "l2":
        loss_data = float((res * res).sum())
        grad = 2.0 * res
    else:
        raise ValueError(f"unknown data norm {data_norm!r}")
    att = phi.attenuation
    meas_res = (phi.weights * lh).sum(axis=(2, 3, 4)) * att - image.data
    loss_cs = float((meas_res * meas_res).sum())
    grad = grad + beta * 2.0 * phi.weights * (att * meas_res)[:, :, None, None, None]
    return loss_data + beta * loss_cs, grad


@dataclass
class TrainBatch:
    """Aligned (coded image, sensing tensor, ground truth) patch triples."""

    images: np.ndarray  # [B, h, w]
    phis: np.ndarray    # [B, h, w, nv, nv, 3] unattenuated weights
    fields: np.ndarray  # [B, h, w, nv, nv, 3]

    @property
    def size(self) -> int:
        return self.images.shape[0]

    @property
    def nv(self) -> int:
        return self.phis.shape[3]


def sample_batch(T, M, B: int, sigma: float, seed) -> TrainBatch:
    """Draw B independent (field, mask) pairs and simulate their measurements.

    Fields come uniformly from ``T`` and sensing tensors independently from
    ``M`` (the pairing is combinatorial), i = forward(phi, l) + N(0, sigma^2).
    Deterministic given the seed.
    """
    if len(T) == 0 or len(M) == 0:
        raise ValueError("patch source and sensing tensor source must be non-empty")
    rng = np.random.default_rng(seed)
    idx_l = rng.integers(0, len(T), size=B)
    idx_p = rng.integers(0, len(M), size=B)
    fields = np.stack([np.asarray(T[i].data, dtype=np.float32) for i in idx_l])
    phis = np.stack([np.asarray(M[i].weights, dtype=np.float32) for i in idx_p])
    att = 1.0 / (phis.shape[3] * phis.shape[4] * 3)
    images = (phis * fields).sum(axis=(3, 4, 5)) * att
    if sigma > 0:
        images = images + rng.normal(0.0, sigma, size=images.shape).astype(np.float32)
    return TrainBatch(images=images, phis=phis, fields=fields)


def batch_loss(out: np.ndarray, batch: TrainBatch, beta: float, data_norm: str = "l1"):
    """Mean per-sample recon loss over a batch; returns (loss, grad on out).

    ``out`` is the raw network output [B, h, w, Nv^2*3].
    """
    B, h, w = out.shape[:3]
    nv = batch.nv
    lh = out.reshape(B, h, w, nv, nv, 3)
    res = lh - batch.fields
    if data_norm == "l1":
        loss_data = np.abs(res).sum()
        grad = np.sign(res)
    else:
        loss_data = (res * res).sum()
        grad = 2.0 * res
    att = 1.0 / (nv * nv * 3)
    meas_res = (batch.phis * lh).sum(axis=(3, 4, 5)) * att - batch.images
    loss_cs = (meas_res * meas_res).sum()
    grad = grad + beta * 2.0 * batch.phis * (att * meas_res)[:, :, :, None, None, None]
    loss = (loss_data + beta * loss_cs) / B
    return float(loss), (grad / B).reshape(B, h, w, nv * nv * 3)


def pack_batch(batch: TrainBatch) -> np.ndarray:
    B, h, w = batch.images.shape
    nv = batch.nv
    q = nv * nv * 3
    att = 1.0 / q
    x = np.empty((B, h, w, 1 + q), dtype=np.float32)
    x[..., 0] = batch.images
    x[..., 1:] = batch.phis.reshape(B, h, w, q) * att
    return x


def should_switch_to_l2(epoch_losses: list, window: int = 20, rel_improve: float = 0.005) -> bool:
    """Fine-tune trigger: relative improvement over the last ``window`` epochs
    fell below ``rel_improve``."""
    if len(epoch_losses) < window + 1:
        return False
    past = epoch_losses[-window - 1]
    now = epoch_losses[-1]
    if past <= 0:
        return True
    return (past - now) / past < rel_improve


def _producer(T, M, n_batches, B, sigma, seed, out_q):
    rng = np.random.default_rng(seed)
    for _ in range(n_batches):
        batch_seed = rng.integers(0, 2**63 - 1)
        out_q.put(sample_batch(T, M, B, sigma, int(batch_seed)))
    out_q.put(None)


@dataclass
class TrainResult:
    params: dict
    state: dict
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    diverged: bool = False
    l2_switch_epoch: int | None = None


def train_recon(
    cfg: ReconNetConfig,
    T,
    M,
    epochs: int = 1,
    steps_per_epoch: int = 100,
    lr0: float = 5e-4,
    sigma: float = 0.0,
    seed: int = 0,
    decay: float = 0.98,
    batch_size: int | None = None,
    fine_tune: bool = False,
    ft_window: int = 20,
    ft_rel_improve: float = 0.005,
    out_dir=None,
    model: ReconNet | None = None,
) -> TrainResult:
    """Adam training of the reconstruction network on sampled patch batches.

    Batches are assembled in a producer thread feeding a bounded queue while
    the optimizer consumes them; the sampling stream (and thus the run) is
    deterministic given ``seed``. Checkpoints are written per epoch when
    ``out_dir`` is given. On a non-finite loss the run aborts and the last
    end-of-epoch parameters are returned with ``diverged=True``.
    """
    if model is None:
        model = ReconNet(cfg, seed=seed)
    B = batch_size or cfg.batch
    adam = AdamState(lr=lr0)
    params = model.params()
    result = TrainResult(params=params, state=model.state())
    data_norm = "l1"
    good_params = {k: v.copy() for k, v in params.items()}
    good_state = {k: v.copy() for k, v in model.state().items()}

    for epoch in range(epochs):
        adam.lr = exp_decay_lr(lr0, epoch, decay)
        q: queue.Queue = queue.Queue(maxsize=4)
        worker = threading.Thread(
            target=_producer, args=(T, M, steps_per_epoch, B, sigma, seed + epoch, q),
            daemon=True,
        )
        worker.start()
        epoch_sum, n = 0.0, 0
        while True:
            batch = q.get()
            if batch is None:
                break
            x = pack_batch(batch)
            out = model.forward_packed(x, train=True)
            loss, g = batch_loss(out, batch, cfg.beta, data_norm)
            if not np.isfinite(loss):
                model.set_params(good_params)
                model.set_state(good_state)
                result.params = good_params
                result.state = good_state
                result.diverged = True
                worker.join()
                return result
            model.backward(g)
            params = adam_step(model.params(), model.grads(), adam)
            model.set_params(params)
            result.step_losses.append(loss)
            epoch_sum += loss
            n += 1
        worker.join()
        result.epoch_losses.append(epoch_sum / max(n, 1))
        good_params = {k: v.copy() for k, v in model.params().items()}
        good_state = {k: v.copy() for k, v in model.state().items()}
        if out_dir is not None:
            from . import lfio

            lfio.save_checkpoint(
                f"{out_dir}/epoch_{epoch:04d}",
                model.params(),
                model.state(),
                meta={
                    "kind": "recon",
                    "epoch": epoch,
                    "steps": len(result.step_losses),
                    "nv": cfg.nv,
                    "channels": cfg.channels,
                    "beta": cfg.beta,
                    "lr": adam.lr,
                    "data_norm": data_norm,
                },
            )
        if fine_tune and data_norm == "l1" and should_switch_to_l2(
            result.epoch_losses, ft_window, ft_rel_improve
        ):
            data_norm = "l2"
            result.l2_switch_epoch = epoch + 1
    result.params = model.params()
    result.state = model.state()
    return result
