"""Model zoo: every architecture variant is built from one ablation config.

``preset(name)`` returns the config for a stable model identifier
(capsnet, capsnet_nor, aff_capsnet, aff_capsnet_dr, convnet_fc,
convnet_fc_lk, convnet_avg, convnet_r, convnet_cr, convnet_cr_sf);
``build_model`` turns a config into a ``ModelSpec`` holding the layer
geometry and parameter shape registry, ``init_params`` materializes the
parameters, and ``forward`` runs one batch end to end.
"""

import hashlib
import json
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import capsules as cp
from . import layers as ly
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

ARCH_FAMILIES = ("convnet_fc", "convnet_avg", "convnet_r", "convnet_cr", "convnet_cr_sf", "capsnet")
ROUTINGS = ("dynamic", "none")
RECONSTRUCTIONS = ("none", "normal", "conditional")
LOSSES = ("margin", "cross_entropy", "binary_cross_entropy")
KERNEL_SIZES = (3, 5, 7, 9, 11)
INPUT_SIZES = (36, 40)


@dataclass(frozen=True)
class AblationConfig:
    arch_family: str
    routing: str = "dynamic"
    routing_iterations: int = 3
    shared_transm: bool = False
    squash_enabled: bool = True
    reconstruction: str = "conditional"
    loss: str = "margin"
    kernel_size: int = 9
    input_size: int = 40
    channel_width: int = 256
    fc_widths: tuple = None  # convnet_fc hidden widths; None = auto-shrink to match capsnet
    num_classes: int = 10
    d_in: int = 8
    d_out: int = 16
    recon_loss_scale: float = 0.0005
    routing_detach: bool = False

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if d["fc_widths"] is not None:
            d["fc_widths"] = list(d["fc_widths"])
        return d


_PRESETS = {
    "convnet_fc": dict(arch_family="convnet_fc", routing="none", reconstruction="none",
                       loss="cross_entropy", kernel_size=5, fc_widths=(328, 192)),
    "convnet_fc_lk": dict(arch_family="convnet_fc", routing="none", reconstruction="none",
                          loss="cross_entropy", kernel_size=9, fc_widths=None),
    "convnet_avg": dict(arch_family="convnet_avg", routing="none", reconstruction="none",
                        loss="cross_entropy", kernel_size=9),
    "capsnet": dict(arch_family="capsnet", routing="dynamic"),
    "capsnet_nor": dict(arch_family="capsnet", routing="none"),
    "aff_capsnet": dict(arch_family="capsnet", routing="none", shared_transm=True),
    "aff_capsnet_dr": dict(arch_family="capsnet", routing="dynamic", shared_transm=True),
    "convnet_r": dict(arch_family="convnet_r", routing="none", reconstruction="normal",
                      loss="cross_entropy"),
    "convnet_cr": dict(arch_family="convnet_cr", routing="none", reconstruction="conditional",
                       loss="binary_cross_entropy"),
    "convnet_cr_sf": dict(arch_family="convnet_cr_sf", routing="none",
                          reconstruction="conditional", loss="margin"),
}

MODEL_NAMES = tuple(sorted(_PRESETS))


def preset(name, **overrides):
    """Config for a stable model identifier, with field overrides applied."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown model name {name!r}; choose from {MODEL_NAMES}")
    base = dict(_PRESETS[name])
    bad = set(overrides) - {f.name for f in fields(AblationConfig)}
    if bad:
        raise ConfigError(f"unknown config fields {sorted(bad)}")
    base.update(overrides)
    if isinstance(base.get("fc_widths"), list):
        base["fc_widths"] = tuple(base["fc_widths"])
    return AblationConfig(**base)


def config_fingerprint(cfg):
    """Stable hash of a resolved config (hex sha256)."""
    canon = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class ModelSpec:
    cfg: AblationConfig
    conv_defs: list            # (cout, k, stride) per conv layer
    spatial: list              # spatial size after each conv
    m_capsules: int            # primary capsule count (0 for plain convnets)
    flat_dim: int              # flattened feature size feeding the head
    fc_widths_resolved: tuple  # convnet_fc hidden widths actually used
    param_shapes: dict         # name -> shape tuple, insertion order = init order
    layer_chain: list          # human-readable shape chain
    params: dict = field(default_factory=dict)

    @property
    def has_reconstruction(self):
        return self.cfg.reconstruction != "none"


def _conv_out(size, k, stride, what):
    if k > size:
        raise ConfigError(f"{what}: kernel {k} exceeds spatial size {size}")
    out = (size - k) // stride + 1
    if out < 1:
        raise ConfigError(f"{what}: output size collapsed to {out}")
    return out


def _validate(cfg):
    checks = [
        (cfg.arch_family in ARCH_FAMILIES, f"arch_family {cfg.arch_family!r} not in {ARCH_FAMILIES}"),
        (cfg.routing in ROUTINGS, f"routing {cfg.routing!r} not in {ROUTINGS}"),
        (cfg.reconstruction in RECONSTRUCTIONS,
         f"reconstruction {cfg.reconstruction!r} not in {RECONSTRUCTIONS}"),
        (cfg.loss in LOSSES, f"loss {cfg.loss!r} not in {LOSSES}"),
        (cfg.kernel_size in KERNEL_SIZES, f"kernel_size {cfg.kernel_size} not in {KERNEL_SIZES}"),
        (cfg.input_size in INPUT_SIZES, f"input_size {cfg.input_size} not in {INPUT_SIZES}"),
        (cfg.channel_width > 0, "channel_width must be positive"),
        (cfg.num_classes == 10, "num_classes is fixed at 10"),
    ]
    fam = cfg.arch_family
    if fam == "capsnet":
        checks += [
            (cfg.routing_iterations >= 1 or cfg.routing != "dynamic",
             "routing_iterations must be >= 1"),
            (cfg.channel_width % cfg.d_in == 0,
             f"channel_width {cfg.channel_width} must be divisible by d_in {cfg.d_in}"),
        ]
    else:
        checks += [
            (cfg.routing == "none", f"{fam} does not route; set routing='none'"),
            (not cfg.shared_transm, f"shared_transm only applies to capsnet, not {fam}"),
        ]
    if fam == "convnet_cr_sf":
        checks.append((cfg.channel_width % cfg.d_in == 0,
                       f"channel_width {cfg.channel_width} must be divisible by d_in {cfg.d_in}"))
    if fam in ("convnet_fc", "convnet_avg"):
        checks += [
            (cfg.reconstruction == "none", f"{fam} has no reconstruction head"),
            (cfg.loss != "margin", f"{fam} outputs logits, not capsule lengths; margin loss invalid"),
        ]
    if fam == "convnet_r":
        checks += [
            (cfg.reconstruction != "conditional",
             "convnet_r has no class-grouped representation; conditional masking invalid"),
            (cfg.loss != "margin", "convnet_r outputs logits; margin loss invalid"),
        ]
    if fam == "convnet_cr":
        checks.append((cfg.loss != "margin", "convnet_cr outputs sigmoid logits; margin loss invalid"))
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def _conv_stack(cfg):
    w = cfg.channel_width
    k = cfg.kernel_size
    if cfg.arch_family == "convnet_fc":
        return [(w, k, 1), (w, k, 1), (max(1, w // 2), k, 1)]
    return [(w, k, 1), (w, k, 2)]


def _auto_fc_widths(cfg, flat_dim):
    """Shrink the two hidden widths so the total lands within 10% of the
    same-kernel capsnet's parameter count (large-kernel fc variant)."""
    target = count_params(build_model(preset(
        "capsnet", kernel_size=cfg.kernel_size, input_size=cfg.input_size,
        channel_width=cfg.channel_width, d_in=cfg.d_in, d_out=cfg.d_out)))
    convs = _conv_stack(cfg)
    conv_count = 0
    cin = 1
    for cout, k, _ in convs:
        conv_count += cout * cin * k * k + cout
        cin = cout
    n = cfg.num_classes
    w1_ref, w2_ref = 328.0, 192.0

    def head_count(alpha):
        w1 = max(1, round(w1_ref * alpha))
        w2 = max(1, round(w2_ref * alpha))
        return (flat_dim * w1 + w1) + (w1 * w2 + w2) + (w2 * n + n), (w1, w2)

    # quadratic in alpha: (w1_ref*w2_ref) a^2 + (flat*w1_ref + ...) a - budget = 0
    budget = target - conv_count - n
    if budget <= 0:
        return (1, 1)
    qa = w1_ref * w2_ref
    qb = flat_dim * w1_ref + w1_ref + w2_ref + w2_ref * n
    alpha = (-qb + np.sqrt(qb * qb + 4 * qa * budget)) / (2 * qa)
    head, widths = head_count(alpha)
    total = head + conv_count
    assert abs(total - target) / target < 0.10, (total, target)
    return widths


def build_model(cfg):
    """Resolve a config into layer geometry and the parameter shape registry."""
    _validate(cfg)
    fam = cfg.arch_family
    convs = _conv_stack(cfg)
    chain = [f"input 1x{cfg.input_size}x{cfg.input_size}"]
    shapes = {}
    size = cfg.input_size
    cin = 1
    spatial = []
    for i, (cout, k, stride) in enumerate(convs):
        size = _conv_out(size, k, stride, f"conv{i}")
        spatial.append(size)
        shapes[f"conv{i}/kernel"] = (cout, cin, k, k)
        shapes[f"conv{i}/bias"] = (cout,)
        chain.append(f"conv({cout},{k},{stride})+relu -> {cout}x{size}x{size}")
        cin = cout
    feat_channels = cin
    rep_dim = cfg.num_classes * cfg.d_out
    m_capsules = 0
    flat_dim = feat_channels * size * size
    fc_resolved = ()

    if fam == "capsnet":
        m_capsules = (feat_channels // cfg.d_in) * size * size
        rows = 1 if cfg.shared_transm else m_capsules
        shapes["transform/matrices"] = (rows, cfg.d_in, rep_dim)
        chain.append(f"primary capsules -> {m_capsules}x{cfg.d_in}"
                     + (" (squashed)" if cfg.squash_enabled else ""))
        chain.append(f"votes ({'shared' if cfg.shared_transm else 'per-capsule'} transform)"
                     f" -> {m_capsules}x{cfg.num_classes}x{cfg.d_out}")
        chain.append(
            f"{'dynamic routing x' + str(cfg.routing_iterations) if cfg.routing == 'dynamic' else 'uniform vote average'}"
            f" -> {cfg.num_classes}x{cfg.d_out}")
    elif fam == "convnet_cr_sf":
        m_capsules = (feat_channels // cfg.d_in) * size * size
        shapes["rep/weight"] = (flat_dim, rep_dim)
        shapes["rep/bias"] = (rep_dim,)
        chain.append(f"primary capsules -> {m_capsules}x{cfg.d_in}"
                     + (" (squashed)" if cfg.squash_enabled else ""))
        chain.append(f"fc({rep_dim}) -> {cfg.num_classes}x{cfg.d_out}"
                     + (" (squashed)" if cfg.squash_enabled else ""))
    elif fam == "convnet_cr":
        shapes["rep/weight"] = (flat_dim, rep_dim)
        shapes["rep/bias"] = (rep_dim,)
        chain.append(f"fc({rep_dim}) -> {cfg.num_classes} groups of {cfg.d_out}; logits = group sums")
    elif fam == "convnet_r":
        shapes["rep/weight"] = (flat_dim, rep_dim)
        shapes["rep/bias"] = (rep_dim,)
        shapes["out/weight"] = (rep_dim, cfg.num_classes)
        shapes["out/bias"] = (cfg.num_classes,)
        chain.append(f"fc({rep_dim}) -> fc({cfg.num_classes}) logits")
    elif fam == "convnet_avg":
        shapes["out/weight"] = (feat_channels, cfg.num_classes)
        shapes["out/bias"] = (cfg.num_classes,)
        chain.append(f"global avg pool -> {feat_channels}")
        chain.append(f"fc({cfg.num_classes}) logits")
    elif fam == "convnet_fc":
        widths = cfg.fc_widths
        if widths is None:
            widths = _auto_fc_widths(cfg, flat_dim)
        fc_resolved = tuple(int(w) for w in widths)
        prev = flat_dim
        chain.append(f"flatten -> {flat_dim}")
        for i, width in enumerate(fc_resolved):
            shapes[f"fc{i}/weight"] = (prev, width)
            shapes[f"fc{i}/bias"] = (width,)
            chain.append(f"fc({width})+relu")
            prev = width
        shapes["out/weight"] = (prev, cfg.num_classes)
        shapes["out/bias"] = (cfg.num_classes,)
        chain.append(f"fc({cfg.num_classes}) logits")

    if cfg.reconstruction != "none":
        out_px = cfg.input_size * cfg.input_size
        for i, (d_in_fc, d_out_fc) in enumerate(
            [(rep_dim, 512), (512, 1024), (1024, out_px)]
        ):
            shapes[f"recon/fc{i}/weight"] = (d_in_fc, d_out_fc)
            shapes[f"recon/fc{i}/bias"] = (d_out_fc,)
        chain.append(f"reconstruction fc(512)+fc(1024)+fc({out_px}), {cfg.reconstruction}")

    return ModelSpec(
        cfg=cfg,
        conv_defs=convs,
        spatial=spatial,
        m_capsules=m_capsules,
        flat_dim=flat_dim,
        fc_widths_resolved=fc_resolved,
        param_shapes=shapes,
        layer_chain=chain,
    )


def count_params(spec):
    """Exact parameter count, biases and reconstruction head included."""
    return int(sum(int(np.prod(s)) for s in spec.param_shapes.values()))


def humanize_count(count):
    millions = count / 1e6
    return f"{millions:.1f}M" if millions >= 10 else f"{millions:.2f}M"


def init_params(spec, rng):
    """Fill the parameter registry; same rng seed gives identical values."""
    cfg = spec.cfg
    params = {}
    for name, shape in spec.param_shapes.items():
        if name.endswith("/bias"):
            params[name] = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        elif name.startswith("conv"):
            cout, cin, k, _ = shape
            params[name] = Tensor(
                ly.glorot_uniform(rng, shape, cin * k * k, cout * k * k), requires_grad=True
            )
        elif name == "transform/matrices":
            params[name] = Tensor(
                ly.glorot_uniform(rng, shape, cfg.d_in, cfg.num_classes * cfg.d_out),
                requires_grad=True,
            )
        else:  # fully connected weights
            params[name] = Tensor(
                ly.glorot_uniform(rng, shape, shape[0], shape[1]), requires_grad=True
            )
    spec.params = params
    return params


@dataclass
class ForwardResult:
    probs: np.ndarray        # (B, N) detached output probabilities
    loss: Tensor = None      # total loss (classification + scaled reconstruction)
    cls_loss: Tensor = None
    recon_loss: Tensor = None
    recons: list = None      # decoded pixel tensors, one per reconstruction pass
    lengths: Tensor = None   # capsule lengths when the model has them
    logits: Tensor = None    # raw logits for logit-based models
    rep: Tensor = None       # (B, N*D_out) representation feeding the decoder
    capsules: object = None  # OutputCapsules for capsule-shaped models
    routing_state: object = None


def _multi_hot(labels, n):
    labels = np.asarray(labels)
    if labels.ndim == 1:
        out = np.zeros((labels.shape[0], n), dtype=np.float32)
        out[np.arange(labels.shape[0]), labels] = 1.0
        return out
    out = np.zeros((labels.shape[0], n), dtype=np.float32)
    for col in range(labels.shape[1]):
        out[np.arange(labels.shape[0]), labels[:, col]] = 1.0
    return out


def _cls_loss(cfg, lengths, logits, labels):
    labels = np.asarray(labels)
    if cfg.loss == "margin":
        return cp.margin_loss(lengths, _multi_hot(labels, cfg.num_classes))
    if cfg.loss == "cross_entropy":
        if labels.ndim != 1:
            raise ConfigError("cross_entropy handles exactly one label per record")
        return ad.cross_entropy_with_logits(logits if logits is not None else lengths, labels)
    targets = _multi_hot(labels, cfg.num_classes)
    if logits is not None:
        return ad.bce_with_logits(logits, targets)
    return ad.bce_on_probs(lengths, targets)


def decode(spec, rep):
    """Run the reconstruction head on a (B, N*D_out) representation."""
    h = ad.relu(ly.fc_forward(rep, spec.params["recon/fc0/weight"], spec.params["recon/fc0/bias"]))
    h = ad.relu(ly.fc_forward(h, spec.params["recon/fc1/weight"], spec.params["recon/fc1/bias"]))
    return ad.sigmoid(
        ly.fc_forward(h, spec.params["recon/fc2/weight"], spec.params["recon/fc2/bias"])
    )


def _recon_losses(spec, grouped, rep_flat, labels, x_flat, recon_targets):
    """Decoded images and the summed per-image SSE reconstruction loss."""
    cfg = spec.cfg
    recons = []
    total = None
    batch = x_flat.data.shape[0]
    labels = np.asarray(labels) if labels is not None else None
    if cfg.reconstruction == "conditional":
        if labels is None:
            raise ConfigError("conditional reconstruction training requires target labels")
        label_cols = labels[:, None] if labels.ndim == 1 else labels
        for col in range(label_cols.shape[1]):
            rep = cp.mask_capsules(grouped, label_cols[:, col])
            recon = decode(spec, rep)
            recons.append(recon)
            if recon_targets is not None:
                tgt = recon_targets[:, col] if recon_targets.ndim == 3 else recon_targets
            else:
                tgt = x_flat.data
            sse = ad.mul_scalar(ad.reduce_sum(ad.square(ad.sub(recon, tgt))), 1.0 / batch)
            total = sse if total is None else ad.add(total, sse)
    else:
        recon = decode(spec, rep_flat)
        recons.append(recon)
        tgt = x_flat.data if recon_targets is None else (
            recon_targets if recon_targets.ndim == 2 else recon_targets.reshape(batch, -1)
        )
        total = ad.mul_scalar(ad.reduce_sum(ad.square(ad.sub(recon, tgt))), 1.0 / batch)
    return recons, total


def forward(spec, x, labels=None, recon_targets=None, want_loss=None):
    """Run one batch through the model.

    ``labels`` is (B,) for single-digit tasks or (B, 2) for overlapping
    digits; ``recon_targets`` optionally holds flattened per-digit target
    images (B, 2, S*S).  When labels are given, the returned loss is
    classification plus ``recon_loss_scale`` times the reconstruction
    error.  ``want_loss=True`` with no labels raises.
    """
    cfg = spec.cfg
    if not spec.params:
        raise ConfigError("model parameters not initialized; call init_params first")
    if want_loss and labels is None:
        raise ConfigError("loss requested but no targets given")

    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    b = t.data.shape[0]
    if t.data.shape != (b, 1, cfg.input_size, cfg.input_size):
        raise ShapeError(
            f"batch shape {t.data.shape} != (B, 1, {cfg.input_size}, {cfg.input_size})"
        )
    x_flat = Tensor(t.data.reshape(b, -1))

    h = t
    for i, (_, _, stride) in enumerate(spec.conv_defs):
        h = ad.relu(
            ad.conv2d(h, spec.params[f"conv{i}/kernel"], spec.params[f"conv{i}/bias"], stride)
        )

    lengths = logits = rep_flat = grouped = caps = state = None
    fam = cfg.arch_family

    if fam == "capsnet":
        poses = cp.primary_capsules(h, cfg.d_in)
        if cfg.squash_enabled:
            poses = cp.squash(poses)
        votes = cp.transform_votes(
            poses, spec.params["transform/matrices"], cfg.num_classes, cfg.d_out
        )
        if cfg.routing == "dynamic":
            caps, state = cp.dynamic_routing(
                votes,
                cfg.routing_iterations,
                squash_output=cfg.squash_enabled,
                detach_coefficients=cfg.routing_detach,
            )
        else:
            caps = cp.no_routing_average(votes, squash_output=cfg.squash_enabled)
        grouped = caps.v
        lengths = caps.lengths
        rep_flat = ad.reshape(grouped, (b, cfg.num_classes * cfg.d_out))
        probs = np.clip(lengths.data, 0.0, 1.0)
    elif fam == "convnet_cr_sf":
        poses = cp.primary_capsules(h, cfg.d_in)
        if cfg.squash_enabled:
            poses = cp.squash(poses)
        flat = ad.reshape(poses, (b, spec.flat_dim))
        pre = ly.fc_forward(flat, spec.params["rep/weight"], spec.params["rep/bias"])
        pre_groups = ad.reshape(pre, (b, cfg.num_classes, cfg.d_out))
        grouped = cp.squash(pre_groups) if cfg.squash_enabled else pre_groups
        caps = cp.OutputCapsules(v=grouped, lengths=ad.l2_norm_lastaxis(grouped))
        lengths = caps.lengths
        rep_flat = ad.reshape(grouped, (b, cfg.num_classes * cfg.d_out))
        probs = np.clip(lengths.data, 0.0, 1.0)
    elif fam == "convnet_cr":
        flat = ad.reshape(h, (b, spec.flat_dim))
        rep = ly.fc_forward(flat, spec.params["rep/weight"], spec.params["rep/bias"])
        grouped = ad.reshape(rep, (b, cfg.num_classes, cfg.d_out))
        logits = ad.reduce_sum(grouped, axes=(2,))
        rep_flat = rep
        probs = 1.0 / (1.0 + np.exp(-logits.data))
    elif fam == "convnet_r":
        flat = ad.reshape(h, (b, spec.flat_dim))
        rep_flat = ly.fc_forward(flat, spec.params["rep/weight"], spec.params["rep/bias"])
        logits = ly.fc_forward(rep_flat, spec.params["out/weight"], spec.params["out/bias"])
        probs = _softmax_np(logits.data) if cfg.loss == "cross_entropy" else (
            1.0 / (1.0 + np.exp(-logits.data))
        )
    elif fam == "convnet_avg":
        pooled = ly.global_avg_pool(h)
        logits = ly.fc_forward(pooled, spec.params["out/weight"], spec.params["out/bias"])
        probs = _softmax_np(logits.data) if cfg.loss == "cross_entropy" else (
            1.0 / (1.0 + np.exp(-logits.data))
        )
    else:  # convnet_fc
        flat = ad.reshape(h, (b, spec.flat_dim))
        hfc = flat
        for i in range(len(spec.fc_widths_resolved)):
            hfc = ad.relu(
                ly.fc_forward(hfc, spec.params[f"fc{i}/weight"], spec.params[f"fc{i}/bias"])
            )
        logits = ly.fc_forward(hfc, spec.params["out/weight"], spec.params["out/bias"])
        probs = _softmax_np(logits.data) if cfg.loss == "cross_entropy" else (
            1.0 / (1.0 + np.exp(-logits.data))
        )

    result = ForwardResult(
        probs=probs,
        recons=[],
        lengths=lengths,
        logits=logits,
        rep=rep_flat,
        capsules=caps,
        routing_state=state,
    )

    if labels is None:
        return result

    result.cls_loss = _cls_loss(cfg, lengths, logits, labels)
    total = result.cls_loss
    if cfg.reconstruction != "none":
        if recon_targets is not None:
            recon_targets = np.asarray(recon_targets, dtype=np.float32)
            if recon_targets.ndim == 3:
                recon_targets = recon_targets.reshape(b, recon_targets.shape[1], -1)
        result.recons, result.recon_loss = _recon_losses(
            spec, grouped, rep_flat, labels, x_flat, recon_targets
        )
        total = ad.add(total, ad.mul_scalar(result.recon_loss, cfg.recon_loss_scale))
    result.loss = total
    return result


def _softmax_np(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def rep_for_class(spec, result, class_ids):
    """The 16-unit representation slice of each record's given class.

    Capsule-shaped models return the class capsule; convnet_r has no
    grouping, so the same contiguous 16-unit slices of its 160-unit
    layer are used by convention.
    """
    cfg = spec.cfg
    class_ids = np.asarray(class_ids)
    rows = np.arange(class_ids.shape[0])
    if result.capsules is not None:
        return result.capsules.v.data[rows, class_ids]
    rep = result.rep.data.reshape(-1, cfg.num_classes, cfg.d_out)
    return rep[rows, class_ids]
