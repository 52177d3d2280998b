"""The layered generator under analysis.

The network decomposes as head(g_n(...g_1(z)...)): four early layers (a
linear reshape plus three stride-2 transposed-conv blocks) and a two-block
stride-1 head ending in tanh. `forward` is literally the composition of
`forward_layers` and `forward_from`, so the range-subset witness holds
bit-exactly by construction.

Distillation training regresses the generator onto a deterministic latent
decode: each class reads four latent dims through the Gaussian CDF as its
(presence, size, center-y, center-x) uniforms, with the presence threshold
set to the class's empirical frequency in the training dataset. Training on
a withheld-class dataset therefore induces a generator that never draws
that class, while the push-forward of N(0,I) otherwise matches the scene
distribution.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from . import scene as sc
from .layers import (
    ConvLayer,
    ConvTransposeLayer,
    LinearLayer,
    layer_from_description,
    run_layers,
    sequential_params,
)

WEIGHT_MAGIC = b"GSCP"
WEIGHT_VERSION = 1

DIMS_PER_CLASS = 4  # presence, size, center-y, center-x


@dataclass
class TrainConfig:
    mode: str = "distill"  # distill | adversarial
    steps: int = 3000
    batch_size: int = 16
    lr: float = 2e-3
    critic_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("TrainConfig: steps must be >= 1")
        if self.mode not in ("distill", "adversarial"):
            raise ValueError(f"TrainConfig: unknown mode {self.mode!r}")


@dataclass
class LayerActivation:
    index: int  # activations are the output of layer `index` (1-based)
    value: ad.Tensor


class GeneratorNet:
    """Ordered layers g_1..g_n plus a head, with an explicit split index."""

    def __init__(self, latent_dim=32, split_index=4, layers=None, meta=None, init_seed=0):
        self.latent_dim = latent_dim
        self.split_index = split_index
        self.meta = dict(meta or {})
        if layers is not None:
            self.layers = list(layers)
        else:
            rng = np.random.default_rng(init_seed)
            self.layers = [
                LinearLayer(latent_dim, 48 * 8 * 8, "leaky", out_chw=(48, 8, 8), rng=rng),
                ConvTransposeLayer(48, 32, 4, 2, 1, "leaky", coords=True, rng=rng),
                ConvTransposeLayer(32, 20, 4, 2, 1, "leaky", coords=True, rng=rng),
                ConvTransposeLayer(20, 18, 3, 1, 1, "leaky", coords=True, rng=rng),
                ConvTransposeLayer(18, 16, 3, 1, 1, "leaky", coords=True, rng=rng),
                ConvTransposeLayer(16, 3, 3, 1, 1, "tanh", coords=True, rng=rng),
            ]
        if not (1 <= self.split_index < len(self.layers)):
            raise ValueError(f"split index {self.split_index} out of range")
        self.layer_shapes = self._shape_table()

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def _shape_table(self):
        shapes = []
        cur = (self.latent_dim,)
        for layer in self.layers:
            cur = layer.out_shape(cur)
            shapes.append(tuple(cur))
        return shapes

    def params(self):
        return sequential_params(self.layers)

    # -- forward surfaces ---------------------------------------------------

    def _as_batched_latent(self, z) -> tuple[ad.Tensor, bool]:
        t = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
        if t.data.ndim == 1:
            if t.shape != (self.latent_dim,):
                raise ValueError(f"latent has dimension {t.shape}, expected ({self.latent_dim},)")
            return ad.reshape(t, (1, self.latent_dim)), True
        if t.data.ndim == 2 and t.shape[1] == self.latent_dim:
            return t, False
        raise ValueError(f"latent has shape {t.shape}, expected [{self.latent_dim}] or [N,{self.latent_dim}]")

    def forward_layers(self, z, upto: int | None = None) -> LayerActivation:
        """Run the early layers, returning the activation after layer `upto`."""
        upto = self.split_index if upto is None else upto
        if not (1 <= upto <= self.split_index):
            raise ValueError(f"layer index {upto} out of range [1, {self.split_index}]")
        t, squeeze = self._as_batched_latent(z)
        out = run_layers(self.layers[:upto], t)
        if squeeze:
            out = ad.reshape(out, out.shape[1:])
        return LayerActivation(index=upto, value=out)

    def forward_from(self, r, frm: int | None = None) -> ad.Tensor:
        """Run layers frm+1..end on an intermediate activation (the head when frm = n)."""
        frm = self.split_index if frm is None else frm
        if isinstance(r, LayerActivation):
            frm = r.index
            r = r.value
        if not (1 <= frm < len(self.layers)):
            raise ValueError(f"layer index {frm} out of range [1, {len(self.layers) - 1}]")
        t = r if isinstance(r, ad.Tensor) else ad.Tensor(r)
        expected = self.layer_shapes[frm - 1]
        squeeze = t.data.ndim == len(expected)
        if squeeze:
            t = ad.reshape(t, (1, *t.shape))
        if tuple(t.shape[1:]) != expected:
            raise ad.ShapeError(
                f"activation shape {tuple(t.shape[1:])} does not match layer {frm} output {expected}"
            )
        out = run_layers(self.layers[frm:], t)
        if squeeze:
            out = ad.reshape(out, out.shape[1:])
        return out

    def forward(self, z) -> ad.Tensor:
        """Full generator: composition of the early layers and the head."""
        return self.forward_from(self.forward_layers(z, self.split_index), self.split_index)


# ---------------------------------------------------------------------------
# latent decode (distillation target)


def empirical_presence(dataset, inventory) -> dict:
    """Fraction of dataset items containing each class, from segmaps."""
    counts = {c.class_id: 0 for c in inventory}
    n = 0
    for item in dataset:
        seg = item[1]
        n += 1
        present = np.unique(seg)
        for cid in present:
            if int(cid) in counts:
                counts[int(cid)] += 1
    return {cid: cnt / max(n, 1) for cid, cnt in counts.items()}


def decode_inventory(inventory, presences: dict):
    return [replace(c, presence=float(presences[c.class_id])) for c in inventory]


def decode_scene(z: np.ndarray, dec_inventory, canvas: int = sc.CANVAS) -> sc.SceneSpec:
    """Deterministic latent-to-scene map; pure function of z."""
    need = DIMS_PER_CLASS * len(dec_inventory)
    if z.shape[-1] < need:
        raise ValueError(f"latent dim {z.shape[-1]} < {need} required by the decode")
    u = ndtr(np.asarray(z, dtype=np.float64)[:need]).reshape(len(dec_inventory), DIMS_PER_CLASS)
    return sc.scene_from_uniforms(u, None, dec_inventory, canvas)


def distill_targets(zs: np.ndarray, dec_inventory, canvas: int = sc.CANVAS) -> np.ndarray:
    """Rendered decode of each latent row: [N,3,H,W] float32 in [-1,1]."""
    return np.stack([
        sc.render(decode_scene(z, dec_inventory, canvas), dec_inventory).data for z in zs
    ])


# ---------------------------------------------------------------------------
# training


def _build_critic(rng) -> list:
    return [
        ConvLayer(3, 16, 4, 2, 1, "leaky", rng=rng),
        ConvLayer(16, 32, 4, 2, 1, "leaky", rng=rng),
        LinearLayer(32 * 8 * 8, 1, "none", rng=rng),
    ]


def train(dataset, config: TrainConfig, inventory=None) -> GeneratorNet:
    """Train a generator on a scene dataset; returns the trained net.

    Distill mode regresses G(z) onto render(decode(z)) with an L1 loss.
    Adversarial mode alternates a small convolutional critic with the
    non-saturating GAN loss against dataset images. Mode dropping is induced
    by the dataset itself (build it with a withheld class).
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    inventory = inventory or sc.default_inventory()
    rng = np.random.default_rng(config.seed)
    net = GeneratorNet(init_seed=config.seed)

    presences = empirical_presence(dataset, inventory)
    dec_inv = decode_inventory(inventory, presences)
    net.meta.update({
        "mode": config.mode,
        "steps": config.steps,
        "seed": config.seed,
        "presences": {str(k): v for k, v in presences.items()},
        "inventory_hash": sc.inventory_hash(inventory),
    })

    params = net.params()
    state = ad.AdamState.for_params(params, lr=config.lr)
    history = []

    if config.mode == "distill":
        # Schedule: foreground-weighted squared-error warmup, annealed into
        # the pure L1 objective for the final quarter. L1 alone parks the net
        # at the per-pixel median (all background, objects cover ~12% of
        # pixels) before any position features exist; the weighted quadratic
        # term rewards partial blobs and bootstraps them past the median.
        bg = (2.0 * sc.background() - 1.0).astype(np.float32)
        anneal_start = int(config.steps * 0.55)
        anneal_end = max(int(config.steps * 0.80), anneal_start + 1)
        for step in range(config.steps):
            state.lr = config.lr * (1.0 - 0.9 * step / max(config.steps - 1, 1))
            zs = rng.standard_normal((config.batch_size, net.latent_dim)).astype(np.float32)
            targets = distill_targets(zs, dec_inv)
            tt = ad.Tensor(targets)
            ad.zero_grads(params)
            out = net.forward(ad.Tensor(zs))
            l1_term = ad.l1(out, tt)
            a = min(1.0, max(0.0, (step - anneal_start) / (anneal_end - anneal_start)))
            if a < 1.0:
                fg = np.abs(targets - bg).max(axis=1, keepdims=True) > 0.2
                weights = ad.Tensor(np.broadcast_to(1.0 + 7.0 * fg, targets.shape).copy())
                diff = ad.add(out, ad.mul_scalar(tt, -1.0))
                wmse = ad.mul_scalar(
                    ad.sum_all(ad.mul(ad.mul(diff, diff), weights)), 1.0 / out.data.size
                )
                loss = ad.add(ad.mul_scalar(l1_term, a), ad.mul_scalar(wmse, 1.0 - a))
            else:
                loss = l1_term
            loss.backward()
            ad.adam_step(params, state)
            history.append(l1_term.item())
    else:
        images = np.stack([item[0].data for item in dataset])
        critic = _build_critic(np.random.default_rng(config.seed + 1))
        c_params = sequential_params(critic)
        c_state = ad.AdamState.for_params(c_params, lr=config.critic_lr)
        for _ in range(config.steps):
            zs = rng.standard_normal((config.batch_size, net.latent_dim)).astype(np.float32)
            real = images[rng.integers(0, len(images), config.batch_size)]
            # critic step: softplus(-D(real)) + softplus(D(fake))
            fake = net.forward(ad.Tensor(zs)).detach()
            ad.zero_grads(c_params)
            d_loss = ad.add(
                _mean_softplus(run_layers(critic, ad.Tensor(real)), negate=True),
                _mean_softplus(run_layers(critic, fake), negate=False),
            )
            d_loss.backward()
            ad.adam_step(c_params, c_state)
            # generator step: softplus(-D(G(z)))
            ad.zero_grads(params)
            g_loss = _mean_softplus(run_layers(critic, net.forward(ad.Tensor(zs))), negate=True)
            g_loss.backward()
            ad.adam_step(params, state)
            history.append(g_loss.item())

    net.meta["train_history"] = history
    return net


def _mean_softplus(logits: ad.Tensor, negate: bool) -> ad.Tensor:
    x = ad.mul_scalar(logits, -1.0) if negate else logits
    return ad.mul_scalar(ad.sum_all(ad.softplus(x)), 1.0 / logits.data.size)


# ---------------------------------------------------------------------------
# weight persistence
#
# layout: magic "GSCP" | u16 version | u32 header length | JSON header |
# per-layer float32 little-endian weight and bias blobs in declared order


def _header_for(net: GeneratorNet) -> dict:
    return {
        "kind": "generator",
        "latent_dim": net.latent_dim,
        "split_index": net.split_index,
        "layer_shapes": [list(s) for s in net.layer_shapes],
        "inventory_hash": net.meta.get("inventory_hash", ""),
        "layers": [layer.describe() for layer in net.layers],
        "meta": {k: v for k, v in net.meta.items() if k != "train_history"},
    }


def write_blob_file(path, header: dict, arrays) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<H", WEIGHT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_blob_file(path) -> tuple[dict, memoryview]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:4] != WEIGHT_MAGIC:
        raise ValueError(f"{path}: not a GSCP weight file (bad magic)")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != WEIGHT_VERSION:
        raise ValueError(f"{path}: unsupported weight format version {version}")
    (hlen,) = struct.unpack("<I", raw[6:10])
    if len(raw) < 10 + hlen:
        raise ValueError(f"{path}: truncated header ({len(raw) - 10} of {hlen} bytes)")
    try:
        header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt weight header: {exc}") from exc
    return header, memoryview(raw)[10 + hlen :]


def consume_params(layers, payload: memoryview, path="weights") -> None:
    offset = 0
    for layer in layers:
        for p in layer.params():
            nbytes = p.data.size * 4
            if offset + nbytes > len(payload):
                raise ValueError(f"{path}: truncated parameter data")
            arr = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4").reshape(p.data.shape)
            p.data = np.ascontiguousarray(arr)
            offset += nbytes
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes in parameter data")


def save_weights(net: GeneratorNet, path) -> None:
    arrays = [p.data for layer in net.layers for p in layer.params()]
    write_blob_file(path, _header_for(net), arrays)


def load_weights(path) -> GeneratorNet:
    header, payload = read_blob_file(path)
    if header.get("kind") != "generator":
        raise ValueError(f"{path}: weight file holds {header.get('kind')!r}, expected a generator")
    layers = [layer_from_description(d) for d in header["layers"]]
    net = GeneratorNet(
        latent_dim=header["latent_dim"],
        split_index=header["split_index"],
        layers=layers,
        meta=header.get("meta", {}),
    )
    declared = [tuple(s) for s in header["layer_shapes"]]
    if declared != list(net.layer_shapes):
        raise ValueError(f"{path}: header layer shapes {declared} do not match layers")
    consume_params(net.layers, payload, str(path))
    return net


def sample_images(net: GeneratorNet, n: int, seed: int, batch: int = 64) -> np.ndarray:
    """Generate n images [N,3,H,W] from seeded standard-normal latents."""
    rng = np.random.default_rng(seed)
    outs = []
    done = 0
    while done < n:
        m = min(batch, n - done)
        zs = rng.standard_normal((m, net.latent_dim)).astype(np.float32)
        outs.append(net.forward(ad.Tensor(zs)).data)
        done += m
    return np.concatenate(outs)
