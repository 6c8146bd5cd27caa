"""The masked-autoencoder network over raw IQ patches and its classifier path."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .nn import Linear, Module, Stack, TransformerBlock, load_params, save_params, trunc_normal


@dataclass
class ModelConfig:
    frame_length: int = 1024
    patch_size: int = 8
    enc_dim: int = 768
    enc_layers: int = 12
    enc_heads: int = 12
    enc_mlp_dim: int | None = None  # default 4 * enc_dim
    dec_dim: int = 512
    dec_layers: int = 4
    dec_heads: int = 8
    dec_mlp_dim: int | None = None  # default 4 * dec_dim
    mask_ratio: float = 0.75
    num_classes: int = 8
    ln_eps: float = 1e-5
    pos_init: str = "sincos"  # or "trunc_normal"
    dropout: float = 0.0  # residual dropout inside every transformer block
    weight_init: str = "trunc_normal"  # std 0.02; or "xavier_uniform" for projection matrices
    dtype: str = "float32"
    init_seed: int = 0

    def __post_init__(self):
        if self.enc_mlp_dim is None:
            self.enc_mlp_dim = 4 * self.enc_dim
        if self.dec_mlp_dim is None:
            self.dec_mlp_dim = 4 * self.dec_dim

    def validate(self):
        if self.patch_size < 1 or self.frame_length % self.patch_size:
            raise ValueError(
                f"patch_size={self.patch_size} does not divide frame_length={self.frame_length}"
            )
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.enc_dim % self.enc_heads:
            raise ValueError("enc_dim must be divisible by enc_heads")
        if self.dec_dim % self.dec_heads:
            raise ValueError("dec_dim must be divisible by dec_heads")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.weight_init not in ("trunc_normal", "xavier_uniform"):
            raise ValueError(f"weight_init must be trunc_normal or xavier_uniform, "
                             f"got {self.weight_init!r}")
        if self.pos_init not in ("sincos", "trunc_normal"):
            raise ValueError(f"pos_init must be sincos or trunc_normal, got {self.pos_init!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    @property
    def num_patches(self) -> int:
        return self.frame_length // self.patch_size

    @property
    def patch_dim(self) -> int:
        return 2 * self.patch_size

    @property
    def num_masked(self) -> int:
        return num_masked(self.num_patches, self.mask_ratio)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def num_masked(n: int, ratio: float) -> int:
    return int(math.floor(ratio * n + 0.5))


def patchify(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., 2, T) frames -> (..., N, 2*patch_size); each patch is [I..., Q...]."""
    frames = np.asarray(frames)
    T = frames.shape[-1]
    if frames.shape[-2] != 2:
        raise ValueError(f"frames must be (..., 2, T), got {frames.shape}")
    if patch_size < 1 or T % patch_size:
        raise ValueError(f"patch_size={patch_size} does not divide frame length {T}")
    lead = frames.shape[:-2]
    n = T // patch_size
    x = frames.reshape(*lead, 2, n, patch_size)
    x = np.moveaxis(x, -3, -2)  # (..., N, 2, p)
    return x.reshape(*lead, n, 2 * patch_size)


def unpatchify(patches: np.ndarray, patch_size: int) -> np.ndarray:
    patches = np.asarray(patches)
    lead = patches.shape[:-2]
    n = patches.shape[-2]
    x = patches.reshape(*lead, n, 2, patch_size)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, 2, n * patch_size)


@dataclass
class MaskPlan:
    """Masking decision for a batch of frames.

    ``kept`` (B, K) and ``masked`` (B, M) are ascending patch indices;
    ``ids_restore`` (B, N) maps the [kept, masked] token order back to
    temporal order, i.e. ``concat(kept, masked)[b][ids_restore[b]] == arange(N)``.
    """

    kept: np.ndarray
    masked: np.ndarray
    ids_restore: np.ndarray
    ratio: float

    @property
    def batch_size(self) -> int:
        return self.kept.shape[0]

    @property
    def num_patches(self) -> int:
        return self.ids_restore.shape[1]

    @property
    def ids_shuffle(self) -> np.ndarray:
        return np.concatenate([self.kept, self.masked], axis=1)

    def mask(self) -> np.ndarray:
        """(B, N) boolean, True where a patch is hidden from the encoder."""
        m = np.zeros((self.batch_size, self.num_patches), dtype=bool)
        np.put_along_axis(m, self.masked, True, axis=1)
        return m

    def subset(self, rows) -> "MaskPlan":
        return MaskPlan(self.kept[rows], self.masked[rows], self.ids_restore[rows], self.ratio)

    def validate(self, n_patches: int | None = None):
        n = self.num_patches if n_patches is None else n_patches
        if self.ids_restore.shape[1] != n:
            raise ValueError(f"mask plan covers {self.ids_restore.shape[1]} patches, model has {n}")
        shuffle = self.ids_shuffle
        if shuffle.shape[1] != n:
            raise ValueError("kept + masked must cover every patch")
        if not np.array_equal(np.sort(shuffle, axis=1), np.broadcast_to(np.arange(n), shuffle.shape)):
            raise ValueError("kept and masked must partition 0..N-1")
        if not np.array_equal(np.take_along_axis(shuffle, self.ids_restore, axis=1),
                              np.broadcast_to(np.arange(n), shuffle.shape)):
            raise ValueError("ids_restore does not invert the kept/masked order")
        return self


def plan_from_masked(masked_rows, n_patches: int, ratio: float | None = None) -> MaskPlan:
    """Build a plan from explicit masked index sets (one per frame, equal sizes)."""
    masked = np.sort(np.atleast_2d(np.asarray(masked_rows, dtype=np.int64)), axis=1)
    if masked.size == 0:
        masked = masked.reshape(max(len(masked), 1), 0)
    b = masked.shape[0]
    flags = np.zeros((b, n_patches), dtype=bool)
    np.put_along_axis(flags, masked, True, axis=1)
    kept = np.stack([np.flatnonzero(~f) for f in flags]).reshape(b, -1)
    shuffle = np.concatenate([kept, masked], axis=1)
    ratio = masked.shape[1] / n_patches if ratio is None else ratio
    return MaskPlan(kept, masked, np.argsort(shuffle, axis=1), ratio)


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator,
                batch_size: int = 1) -> MaskPlan:
    """Uniformly random masks with exactly round(ratio * N) hidden patches per frame."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    m = num_masked(n_patches, ratio)
    order = np.argsort(rng.random((batch_size, n_patches)), axis=1)
    kept = np.sort(order[:, : n_patches - m], axis=1)
    masked = np.sort(order[:, n_patches - m :], axis=1)
    shuffle = np.concatenate([kept, masked], axis=1)
    return MaskPlan(kept, masked, np.argsort(shuffle, axis=1), ratio)


def full_plan(n_patches: int, batch_size: int) -> MaskPlan:
    ids = np.broadcast_to(np.arange(n_patches), (batch_size, n_patches)).copy()
    return MaskPlan(ids, np.zeros((batch_size, 0), dtype=np.int64), ids.copy(), 0.0)


def sincos_table(n: int, dim: int) -> np.ndarray:
    """Fixed 1-D sine/cosine position table, (n, dim)."""
    half = dim // 2
    freq = 1.0 / 10000 ** (np.arange(half) / max(half, 1))
    ang = np.arange(n)[:, None] * freq[None]
    out = np.zeros((n, dim))
    out[:, :half] = np.sin(ang)
    out[:, half : 2 * half] = np.cos(ang)
    return out


def _gather_rows(x, idx):
    return np.take_along_axis(x, idx[..., None], axis=1)


class RISMAE(Module):
    """Patch embedding, transformer encoder, MAE decoder and classifier head.

    The decoder is present when ``with_decoder`` is set (pretraining); the
    classifier head when ``with_head`` is set (fine-tuning and inference).
    """

    def __init__(self, config: ModelConfig, with_decoder: bool = True, with_head: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        cfg = self.config = config.validate()
        dt = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.init_seed) if rng is None else rng
        n, d, dd = cfg.num_patches, cfg.enc_dim, cfg.dec_dim
        drop_rng = np.random.default_rng(np.random.SeedSequence(cfg.init_seed, spawn_key=(17,)))
        self.children["patch_embed"] = Linear(cfg.patch_dim, d, rng, dtype=dt)
        self.params["pos"] = self._pos_table(rng, n, d)
        self.params["cls_token"] = trunc_normal(rng, (d,), dtype=dt)
        self.children["encoder"] = Stack([
            TransformerBlock(d, cfg.enc_heads, cfg.enc_mlp_dim, rng, dt, cfg.ln_eps,
                             cfg.dropout, drop_rng)
            for _ in range(cfg.enc_layers)
        ])
        self.with_decoder = with_decoder
        self.with_head = with_head
        if with_decoder:
            self.children["enc_to_dec"] = Linear(d, dd, rng, dtype=dt)
            self.params["mask_token"] = trunc_normal(rng, (dd,), dtype=dt)
            # row 0 belongs to the class token
            self.params["dec_pos"] = self._pos_table(rng, n + 1, dd)
            self.children["decoder"] = Stack([
                TransformerBlock(dd, cfg.dec_heads, cfg.dec_mlp_dim, rng, dt, cfg.ln_eps,
                             cfg.dropout, drop_rng)
                for _ in range(cfg.dec_layers)
            ])
            self.children["pred"] = Linear(dd, cfg.patch_dim, rng, dtype=dt)
        if cfg.weight_init == "xavier_uniform":
            self._xavier_init()
        if with_head:
            self.attach_head(rng)

    def _xavier_init(self):
        # a separate stream keeps the default-init draws unchanged
        rng = np.random.default_rng(np.random.SeedSequence(self.config.init_seed, spawn_key=(19,)))
        for name, p in self.named_parameters().items():
            if p.ndim == 2 and "pos" not in name:
                a = math.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                p[...] = rng.uniform(-a, a, p.shape)

    def _pos_table(self, rng, n, dim):
        if self.config.pos_init == "sincos":
            return sincos_table(n, dim).astype(self.config.dtype)
        return trunc_normal(rng, (n, dim), dtype=np.dtype(self.config.dtype))

    def attach_head(self, rng=None, num_classes=None):
        if num_classes is not None:
            self.config.num_classes = num_classes
        rng = np.random.default_rng(self.config.init_seed + 1) if rng is None else rng
        self.children["head"] = Linear(self.config.enc_dim, self.config.num_classes, rng,
                                       dtype=np.dtype(self.config.dtype))
        self.with_head = True

    def drop_decoder(self):
        for name in ("enc_to_dec", "decoder", "pred"):
            self.children.pop(name, None)
        for name in ("mask_token", "dec_pos"):
            self.params.pop(name, None)
            self.grads.pop(name, None)
        self.with_decoder = False

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def encoder_param_names(self) -> list[str]:
        names = self.named_parameters()
        return [k for k in names if k.split(".")[0] in ("patch_embed", "encoder", "pos", "cls_token")]

    # ------------------------------------------------------------------ forward
    def embed(self, patches: np.ndarray) -> np.ndarray:
        """z_i = W_patch x_i + b_patch + p_i."""
        if patches.shape[-1] != self.config.patch_dim:
            raise ValueError(f"patch length must be {self.config.patch_dim}, got {patches.shape[-1]}")
        if patches.shape[-2] != self.config.num_patches:
            raise ValueError(f"expected {self.config.num_patches} patches, got {patches.shape[-2]}")
        return self.children["patch_embed"].forward(patches) + self.params["pos"]

    def encode(self, emb: np.ndarray, plan: MaskPlan) -> np.ndarray:
        """[cls; kept embeddings] through the encoder stack -> (B, K+1, d)."""
        squeeze = emb.ndim == 2
        if squeeze:
            emb = emb[None]
        if plan.num_patches != emb.shape[1] or plan.batch_size != emb.shape[0]:
            raise ValueError("mask plan does not match the embedding batch")
        keep = _gather_rows(emb, plan.kept)
        cls = np.broadcast_to(self.params["cls_token"], (emb.shape[0], 1, emb.shape[2]))
        z = np.concatenate([cls, keep], axis=1)
        self._enc_cache = (plan, emb.shape, squeeze)
        out = self.children["encoder"].forward(z)
        return out[0] if squeeze else out

    def restore(self, z_enc: np.ndarray, plan: MaskPlan, add_pos: bool = True) -> np.ndarray:
        """Project to decoder width, fill masked slots with the mask token, unshuffle."""
        if z_enc.shape[1] != plan.kept.shape[1] + 1:
            raise ValueError("encoder output length does not match the mask plan")
        y = self.children["enc_to_dec"].forward(z_enc)
        b, _, dd = y.shape
        fill = np.broadcast_to(self.params["mask_token"], (b, plan.masked.shape[1], dd))
        shuffled = np.concatenate([y[:, 1:], fill], axis=1)
        full = np.concatenate([y[:, :1], _gather_rows(shuffled, plan.ids_restore)], axis=1)
        self._restore_cache = plan
        if add_pos:
            full = full + self.params["dec_pos"]
        return full

    def decode_predict(self, z_full: np.ndarray) -> np.ndarray:
        n = self.config.num_patches
        if z_full.shape[1:] != (n + 1, self.config.dec_dim):
            raise ValueError(f"decoder input must be (B, {n + 1}, {self.config.dec_dim})")
        z = self.children["decoder"].forward(z_full)
        return self.children["pred"].forward(z[:, 1:])

    def forward_pretrain(self, frames: np.ndarray, plan: MaskPlan):
        """Returns (predictions (B, N, 2p), target patches (B, N, 2p))."""
        if not self.with_decoder:
            raise RuntimeError("model has no decoder")
        frames = np.asarray(frames, dtype=self.dtype)
        patches = patchify(frames, self.config.patch_size)
        z_enc = self.encode(self.embed(patches), plan)
        pred = self.decode_predict(self.restore(z_enc, plan))
        return pred, patches

    def forward_features(self, frames: np.ndarray) -> np.ndarray:
        """Class-token encoder output with every patch visible, (B, d)."""
        frames = np.asarray(frames, dtype=self.dtype)
        patches = patchify(frames, self.config.patch_size)
        plan = full_plan(self.config.num_patches, patches.shape[0])
        return self.encode(self.embed(patches), plan)[:, 0]

    def forward_logits(self, frames: np.ndarray) -> np.ndarray:
        if not self.with_head:
            raise RuntimeError("model has no classifier head")
        return self.children["head"].forward(self.forward_features(frames))

    # ----------------------------------------------------------------- backward
    def _backward_encoder(self, dz: np.ndarray) -> np.ndarray:
        """Back through the encoder into patch space; returns d loss / d patches."""
        plan, emb_shape, _ = self._enc_cache
        dz = self.children["encoder"].backward(dz)
        self.grads["cls_token"] = dz[:, 0].sum(axis=0)
        demb = np.zeros(emb_shape, dtype=dz.dtype)
        np.put_along_axis(demb, plan.kept[..., None], dz[:, 1:], axis=1)
        self.grads["pos"] = demb.sum(axis=0)
        return self.children["patch_embed"].backward(demb)

    def backward_pretrain(self, dpred: np.ndarray) -> np.ndarray:
        c = self.children
        dz = c["pred"].backward(dpred)
        b = dz.shape[0]
        dz = np.concatenate([np.zeros((b, 1, dz.shape[2]), dtype=dz.dtype), dz], axis=1)
        dfull = c["decoder"].backward(dz)
        self.grads["dec_pos"] = dfull.sum(axis=0)
        plan = self._restore_cache
        k = plan.kept.shape[1]
        dshuffled = _gather_rows(dfull[:, 1:], plan.ids_shuffle)
        self.grads["mask_token"] = dshuffled[:, k:].sum(axis=(0, 1))
        dy = np.concatenate([dfull[:, :1], dshuffled[:, :k]], axis=1)
        return self._backward_encoder(c["enc_to_dec"].backward(dy))

    def backward_logits(self, dlogits: np.ndarray, freeze_encoder: bool = False):
        dh = self.children["head"].backward(dlogits)
        if freeze_encoder:
            return None
        plan, emb_shape, _ = self._enc_cache
        dz = np.zeros((emb_shape[0], plan.kept.shape[1] + 1, emb_shape[2]), dtype=dh.dtype)
        dz[:, 0] = dh
        return self._backward_encoder(dz)

    # ---------------------------------------------------------------- inference
    def _batched(self, fn, frames, batch_size):
        self.set_training(False)
        outs = [fn(frames[s : s + batch_size]) for s in range(0, len(frames), batch_size)]
        self.clear_cache()
        return np.concatenate(outs, axis=0)

    def predict_proba(self, frames, batch_size: int = 256) -> np.ndarray:
        from .nn import softmax

        return self._batched(lambda f: softmax(self.forward_logits(f)), frames, batch_size)

    def features(self, frames, batch_size: int = 256) -> np.ndarray:
        return self._batched(self.forward_features, frames, batch_size)

    def clear_cache(self):
        super().clear_cache()
        self._enc_cache = self._restore_cache = None

    # --------------------------------------------------------------- parameters
    def get_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_parameters().items()}

    def set_state(self, state: dict[str, np.ndarray], strict: bool = True):
        own = self.named_parameters()
        if strict:
            missing = set(own) - set(state)
            if missing:
                raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, arr in own.items():
            if name in state:
                src = np.asarray(state[name])
                if src.shape != arr.shape:
                    raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
                arr[...] = src


def classify(model: RISMAE, frame, batch_size: int = 256) -> np.ndarray:
    """Class probabilities for one (2, T) frame or a (B, 2, T) batch."""
    frames = np.asarray(frame)
    single = frames.ndim == 2
    probs = model.predict_proba(frames[None] if single else frames, batch_size)
    return probs[0] if single else probs


def save_checkpoint(model: RISMAE, directory, rng_state: dict | None = None,
                    extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"model": model.config.to_dict(), "with_decoder": model.with_decoder,
            "with_head": model.with_head}
    if extra:
        meta.update(extra)
    with open(directory / "config.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    save_params(model.named_parameters(), directory)
    with open(directory / "rng.json", "w", encoding="utf-8") as fh:
        json.dump(rng_state or {}, fh, indent=2, default=int)
    return directory


def load_checkpoint(directory, with_decoder: bool | None = None, num_classes: int | None = None,
                    dtype: str | None = None) -> RISMAE:
    """Rebuild a model from a checkpoint directory.

    ``with_decoder=False`` drops decoder parameters; a ``num_classes`` that
    differs from the stored head (or a checkpoint without a head) attaches a
    freshly initialized classifier.
    """
    directory = Path(directory)
    with open(directory / "config.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = ModelConfig.from_dict(meta["model"])
    if dtype is not None:
        cfg.dtype = dtype
    stored_head = meta.get("with_head", True)
    fresh_head = num_classes is not None and (num_classes != cfg.num_classes or not stored_head)
    if num_classes is not None:
        cfg.num_classes = num_classes
    dec = meta.get("with_decoder", True) if with_decoder is None else with_decoder
    if dec and not meta.get("with_decoder", True):
        raise ValueError("checkpoint has no decoder parameters")
    want_head = stored_head or num_classes is not None
    model = RISMAE(cfg, with_decoder=dec, with_head=want_head)
    state = load_params(directory, dtype=model.dtype)
    own = set(model.named_parameters())
    if fresh_head:
        state = {k: v for k, v in state.items() if not k.startswith("head.")}
    state = {k: v for k, v in state.items() if k in own}
    model.set_state(state, strict=False)
    missing = own - set(state)
    allowed = {k for k in own if k.startswith("head.")} if fresh_head else set()
    if missing - allowed:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing - allowed)[:5]}")
    return model
