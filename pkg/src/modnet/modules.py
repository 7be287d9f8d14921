"""Compositional modules, identity modules, the shared decoder and the ID classifier."""

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
from torch import nn

from modnet.lie import exp_map

CHECKPOINT_FORMAT = 1


def _check_image(x, image_shape):
    """``image_shape`` is (H, W, 3); torch images are channel-first."""
    H, W, C = image_shape
    if x.dim() < 3 or tuple(x.shape[-3:]) != (C, H, W):
        raise ValueError(f"expected images of shape (..., {C}, {H}, {W}), got {tuple(x.shape)}")


class CompositionalModule(nn.Module):
    """Input-observing encoder that emits a transformation through the exponential map.

    Conv stack (stride 2) -> dense hidden layer -> heads for mu and log sigma,
    plus ``k`` learnable Lie-algebra generators of side ``u``.
    """

    def __init__(self, k, u, image_shape, channels=(32, 32, 64, 64), hidden=256, basis_std=0.1):
        super().__init__()
        self.k, self.u = k, u
        self.image_shape = tuple(image_shape)
        H, W, C = self.image_shape
        layers = []
        prev = C
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, 4, stride=2, padding=1), nn.ReLU()]
            prev = ch
        self.features = nn.Sequential(*layers)
        down = 2 ** len(channels)
        self.hidden = nn.Sequential(nn.Flatten(), nn.Linear(prev * (H // down) * (W // down), hidden), nn.ReLU())
        self.mu_head = nn.Linear(hidden, k)
        self.logsigma_head = nn.Linear(hidden, k)
        self.bases = nn.Parameter(torch.randn(k, u, u) * basis_std)

    def encode(self, x):
        _check_image(x, self.image_shape)
        h = self.hidden(self.features(x))
        return self.mu_head(h), torch.exp(self.logsigma_head(h))

    def forward(self, x, eps):
        mu, sigma = self.encode(x)
        z = reparameterize(mu, sigma, eps)
        return exp_map(z, self.bases), mu, sigma, z


class IdentityModule(nn.Module):
    """A learnable ``u x u`` matrix. It has no input, by construction."""

    def __init__(self, u, init_std=0.01):
        super().__init__()
        self.matrix = nn.Parameter(torch.eye(u) + init_std * torch.randn(u, u))

    def forward(self):
        return self.matrix


class Decoder(nn.Module):
    """Maps a flattened transform to an image in [0, 1].

    Dense layer to a 4x4 feature map followed by four transposed convolutions.
    For 32x32 outputs the last layer keeps resolution (stride 1); for 64x64
    all four layers upsample.
    """

    def __init__(self, u, image_shape, channels=(32, 32, 64, 64)):
        super().__init__()
        self.u = u
        self.image_shape = tuple(image_shape)
        H, W, C = self.image_shape
        if H != W or H not in (32, 64):
            raise ValueError(f"image side must be 32 or 64, got {H}x{W}")
        widths = list(reversed(channels))
        self.base = widths[0]
        self.dense = nn.Linear(u * u, 4 * 4 * self.base)
        layers = []
        upsamples = 3 if H == 32 else 4
        prev = self.base
        for idx in range(4):
            last = idx == 3
            out = C if last else widths[min(idx + 1, len(widths) - 1)]
            if idx < upsamples:
                layers.append(nn.ConvTranspose2d(prev, out, 4, stride=2, padding=1))
            else:
                layers.append(nn.ConvTranspose2d(prev, out, 3, stride=1, padding=1))
            if not last:
                layers.append(nn.ReLU())
            prev = out
        self.deconv = nn.Sequential(*layers)

    def forward(self, T):
        if T.dim() < 2 or tuple(T.shape[-2:]) != (self.u, self.u):
            raise ValueError(f"transform must be {self.u}x{self.u}, got {tuple(T.shape)}")
        lead = T.shape[:-2]
        h = torch.relu(self.dense(T.reshape(-1, self.u * self.u)))
        img = torch.sigmoid(self.deconv(h.view(-1, self.base, 4, 4)))
        return img.view(*lead, *img.shape[1:])


class IDClassifier(nn.Module):
    """Fully connected shape classifier over flattened transforms."""

    def __init__(self, u, num_classes, hidden=(128, 64)):
        super().__init__()
        layers = []
        prev = u * u
        for h in hidden:
            layers += [nn.Linear(prev, h), nn.ReLU()]
            prev = h
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(prev, num_classes)
        self.num_classes = num_classes

    def features(self, T):
        return self.body(T.reshape(*T.shape[:-2], -1))

    def forward(self, T):
        return self.head(self.features(T))


def encode(module, x):
    """Return ``(mu, sigma)`` for images ``x`` of shape ``(..., 3, H, W)``."""
    return module.encode(x)


def reparameterize(mu, sigma, eps):
    if mu.shape != sigma.shape or mu.shape != eps.shape:
        raise ValueError(f"shape mismatch: mu {tuple(mu.shape)}, sigma {tuple(sigma.shape)}, eps {tuple(eps.shape)}")
    return mu + sigma * eps


def comp_forward(module, x, eps):
    """Return ``(T, mu, sigma, z)`` for a compositional module."""
    return module(x, eps)


def identity_transform(module):
    return module()


def decode(decoder, T):
    return decoder(T)


class ModulePool(nn.Module):
    """``m`` compositional modules, ``n`` identity modules, one decoder and an optional ID classifier."""

    def __init__(self, m, n, u=6, k=4, image_shape=(32, 32, 3), channels=(32, 32, 64, 64), hidden=256,
                 num_classes=4, id_classifier=False, basis_std=0.1, identity_std=0.01):
        super().__init__()
        if m < 1 or n < 1:
            raise ValueError(f"need m >= 1 and n >= 1, got m={m}, n={n}")
        if u < 2:
            raise ValueError(f"matrix side must be >= 2, got {u}")
        self.m, self.n, self.u, self.k = m, n, u, k
        self.image_shape = tuple(image_shape)
        self.channels = tuple(channels)
        self.hidden = hidden
        self.num_classes = num_classes
        self.comps = nn.ModuleList(
            CompositionalModule(k, u, image_shape, channels, hidden, basis_std) for _ in range(m))
        self.idents = nn.ModuleList(IdentityModule(u, identity_std) for _ in range(n))
        self.decoder = Decoder(u, image_shape, channels)
        self.classifier = IDClassifier(u, num_classes) if id_classifier else None

    @property
    def bases(self):
        return torch.stack([c.bases for c in self.comps])

    def identity_matrices(self):
        return torch.stack([identity_transform(j) for j in self.idents])

    def hparams(self):
        return {"m": self.m, "n": self.n, "u": self.u, "k": self.k, "image_shape": list(self.image_shape),
                "channels": list(self.channels), "hidden": self.hidden, "num_classes": self.num_classes,
                "id_classifier": self.classifier is not None}

    def named_tensors(self):
        """Parameters keyed as ``comp/{i}/...``, ``ident/{j}/matrix``, ``decoder/...``, ``classifier/...`` (1-based)."""
        out = {}
        for i, c in enumerate(self.comps, 1):
            for name, p in c.state_dict().items():
                out[f"comp/{i}/{name}"] = p
        for j, ident in enumerate(self.idents, 1):
            out[f"ident/{j}/matrix"] = ident.matrix.data
        for name, p in self.decoder.state_dict().items():
            out[f"decoder/{name}"] = p
        if self.classifier is not None:
            for name, p in self.classifier.state_dict().items():
                out[f"classifier/{name}"] = p
        return out

    def load_named_tensors(self, tensors):
        expected = self.named_tensors()
        missing = sorted(set(expected) - set(tensors))
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {missing[:5]}")
        with torch.no_grad():
            for key, p in expected.items():
                src = torch.as_tensor(tensors[key])
                if src.shape != p.shape:
                    raise ValueError(f"tensor {key} has shape {tuple(src.shape)}, expected {tuple(p.shape)}")
                p.copy_(src)


class CheckpointError(Exception):
    pass


def _zip_write(zf, name, payload):
    # Fixed timestamp keeps archives byte-identical across runs.
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def _npy_bytes(arr):
    buf = io.BytesIO()
    # copy(order="C") rather than ascontiguousarray, which turns 0-d arrays into 1-d.
    np.save(buf, np.asarray(arr).copy(order="C"), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, pool, meta=None, extra_tensors=None):
    """Write a zip archive of ``.npy`` tensors plus ``meta.json``.

    ``meta`` is merged into the pool hyperparameters (seed, step, ...).
    ``extra_tensors`` holds non-model state such as optimizer moments.
    """
    header = dict(pool.hparams())
    header["format"] = CHECKPOINT_FORMAT
    header.update(meta or {})
    tensors = {k: v.detach().cpu().numpy() for k, v in pool.named_tensors().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(header, sort_keys=True, indent=1))
        for key in sorted(tensors):
            _zip_write(zf, f"tensors/{key}.npy", _npy_bytes(tensors[key]))
    return path


def read_checkpoint(path):
    """Return ``(meta, tensors)`` from an archive written by :func:`save_checkpoint`."""
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            tensors = {}
            for name in zf.namelist():
                if name.startswith("tensors/") and name.endswith(".npy"):
                    tensors[name[len("tensors/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    except (OSError, KeyError, zipfile.BadZipFile, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    return meta, tensors


def pool_from_meta(meta):
    return ModulePool(meta["m"], meta["n"], meta["u"], meta["k"], tuple(meta["image_shape"]),
                      tuple(meta["channels"]), meta["hidden"], meta["num_classes"], meta["id_classifier"])


def load_checkpoint(path):
    """Rebuild a :class:`ModulePool` from a checkpoint. Returns ``(pool, meta, tensors)``."""
    meta, tensors = read_checkpoint(path)
    pool = pool_from_meta(meta)
    try:
        pool.load_named_tensors(tensors)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return pool, meta, tensors
