"""Model state assembly and the shared forward pass.

One ModelState holds every trainable parameter for both domains under a
fixed census: the parameter dictionary is built once at construction, in a
deterministic order, and optimizers iterate it by name. Ablation variants
reshape the structure here (which codes are fused, what the user tower
consumes) so the training loop stays variant-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import disentangle as dis
from . import fusion as fu
from . import graph as gr
from .autodiff import Value
from .config import ConfigError, RunConfig
from .mixup import interpolate

BRANCHES = ("a", "b", "aug")

# fusion component lists per variant, per domain; "ind_other" is the other
# domain's independent code (the transfer_ind probe)
_COMPONENTS = {
    "full": ("spe", "ind", "sha"),
    "fixed_lambda": ("spe", "ind", "sha"),
    "elbo": ("spe", "ind", "sha"),
    "wo_sha": ("spe", "ind"),
    "wo_spe": ("ind", "sha"),
    "wo_ind": ("spe", "sha"),
    "transfer_ind": ("spe", "ind", "sha", "ind_other"),
}


def variant_components(variant: str) -> tuple[str, ...]:
    if variant == "base":
        return ()
    try:
        return _COMPONENTS[variant]
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}") from None


@dataclass
class DomainModel:
    gcn: gr.GcnWeights
    fusion: fu.FusionWeights | None
    user_tower: fu.TowerWeights
    item_tower: fu.TowerWeights


@dataclass
class DecoderWeights:
    w: Value
    b: Value


@dataclass
class ModelState:
    config: RunConfig
    adjacency_a: gr.NormalizedAdjacency
    adjacency_b: gr.NormalizedAdjacency
    domain_a: DomainModel
    domain_b: DomainModel
    encoders: dict[str, dis.DisentangleWeights] = field(default_factory=dict)
    classifier: dis.DomainClassifier | None = None
    decoders: dict[str, DecoderWeights] = field(default_factory=dict)
    params: dict[str, Value] = field(default_factory=dict)

    @property
    def graph_width(self) -> int:
        return (self.config.l + 1) * self.config.k


def _census(model: ModelState) -> dict[str, Value]:
    params: dict[str, Value] = {}

    def put(name: str, value: Value) -> None:
        params[name] = value

    for tag, dm in (("a", model.domain_a), ("b", model.domain_b)):
        put(f"gcn_{tag}.e0", dm.gcn.e0)
        for idx, (w, b) in enumerate(dm.gcn.layers):
            put(f"gcn_{tag}.w{idx}", w)
            put(f"gcn_{tag}.b{idx}", b)
    for branch in BRANCHES:
        enc = model.encoders.get(branch)
        if enc is None:
            continue
        put(f"enc_{branch}.w0", enc.w0)
        put(f"enc_{branch}.b0", enc.b0)
        for h, head in (("h1", enc.head1), ("h2", enc.head2)):
            put(f"enc_{branch}.{h}.w_mu", head.w_mu)
            put(f"enc_{branch}.{h}.b_mu", head.b_mu)
            put(f"enc_{branch}.{h}.w_sigma", head.w_sigma)
            put(f"enc_{branch}.{h}.b_sigma", head.b_sigma)
    if model.classifier is not None:
        put("clf.w", model.classifier.w)
        put("clf.b", model.classifier.b)
    for tag, dm in (("a", model.domain_a), ("b", model.domain_b)):
        if dm.fusion is not None:
            for idx, w in enumerate(dm.fusion.w_components):
                put(f"fus_{tag}.c{idx}", w)
            put(f"fus_{tag}.ws", dm.fusion.w_s)
        for idx, w in enumerate(dm.user_tower.weights):
            put(f"tow_{tag}.user.{idx}", w)
        for idx, w in enumerate(dm.item_tower.weights):
            put(f"tow_{tag}.item.{idx}", w)
    for key in sorted(model.decoders):
        put(f"dec_{key}.w", model.decoders[key].w)
        put(f"dec_{key}.b", model.decoders[key].b)
    return params


def build_model(
    adjacency_a: gr.NormalizedAdjacency,
    adjacency_b: gr.NormalizedAdjacency,
    config: RunConfig,
) -> ModelState:
    config.validate()
    if adjacency_a.num_users != adjacency_b.num_users:
        raise ConfigError("domains must share the user set")
    rng = np.random.default_rng([config.seed, 0])
    k, l, std = config.k, config.l, config.init_std
    gw = (l + 1) * k
    components = variant_components(config.variant)

    def domain(adjacency: gr.NormalizedAdjacency) -> DomainModel:
        gcn = gr.init_gcn_weights(adjacency.size, k, l, rng, std)
        fusion = None
        if components and config.fusion == "attention":
            fusion = fu.init_fusion_weights(k, len(components), rng, std)
        user_in = gw if not components else fu.fused_width(config.fusion, k, len(components))
        return DomainModel(
            gcn=gcn,
            fusion=fusion,
            user_tower=fu.init_tower_weights(user_in, k, rng, std),
            item_tower=fu.init_tower_weights(gw, k, rng, std),
        )

    model = ModelState(
        config=config,
        adjacency_a=adjacency_a,
        adjacency_b=adjacency_b,
        domain_a=domain(adjacency_a),
        domain_b=domain(adjacency_b),
    )
    if components:
        for branch in BRANCHES:
            model.encoders[branch] = dis.init_disentangle_weights(gw, k, rng, std)
        model.classifier = dis.init_domain_classifier(k, rng, std)
    if config.variant == "elbo":
        for branch in BRANCHES:
            for head in ("h1", "h2"):
                model.decoders[f"{branch}.{head}"] = DecoderWeights(
                    w=Value(rng.normal(0.0, std, size=(k, gw))),
                    b=Value(rng.normal(0.0, std, size=(1, gw))),
                )
    model.params = _census(model)
    return model


@dataclass
class ForwardPass:
    """Everything a loss or an evaluation needs from one forward sweep."""

    users: np.ndarray  # sorted union of user indices the pass covers
    lam: float
    emb_items_a: Value
    emb_items_b: Value
    s_a: Value  # towered user representations aligned with `users`
    s_b: Value
    codes: dict[str, Value] = field(default_factory=dict)
    enc_results: dict[str, dis.EncodeResult] = field(default_factory=dict)
    enc_inputs: dict[str, Value] = field(default_factory=dict)


def forward(
    model: ModelState,
    user_indices: np.ndarray,
    lam: float,
    stochastic: bool,
    noise_rngs: dict[str, np.random.Generator] | None = None,
) -> ForwardPass:
    cfg = model.config
    users = np.asarray(user_indices, dtype=np.int64)
    emb_a = gr.encode_graph(model.adjacency_a, model.domain_a.gcn)
    emb_b = gr.encode_graph(model.adjacency_b, model.domain_b.gcn)
    eu_a = ad.gather_rows(emb_a.users, users)
    eu_b = ad.gather_rows(emb_b.users, users)

    if not variant_components(cfg.variant):  # base: towers on raw graph embeddings
        return ForwardPass(
            users=users,
            lam=lam,
            emb_items_a=emb_a.items,
            emb_items_b=emb_b.items,
            s_a=fu.tower_forward(eu_a, model.domain_a.user_tower),
            s_b=fu.tower_forward(eu_b, model.domain_b.user_tower),
        )

    e_aug = interpolate(eu_a, eu_b, lam)
    enc_inputs = {"a": eu_a, "b": eu_b, "aug": e_aug}
    enc_results: dict[str, dis.EncodeResult] = {}
    for branch in BRANCHES:
        rng = noise_rngs.get(branch) if noise_rngs else None
        enc_results[branch] = dis.encode(
            enc_inputs[branch], model.encoders[branch], rng=rng, stochastic=stochastic
        )
    codes = {
        "ind_a": enc_results["a"].z1,
        "spe_a": enc_results["a"].z2,
        "ind_b": enc_results["b"].z1,
        "spe_b": enc_results["b"].z2,
        "sha": enc_results["aug"].z1,
        "spe_aug": enc_results["aug"].z2,
    }

    def fused_user_rep(tag: str, dm: DomainModel) -> Value:
        other = "b" if tag == "a" else "a"
        chosen = []
        for comp in variant_components(cfg.variant):
            if comp == "ind_other":
                chosen.append(codes[f"ind_{other}"])
            elif comp == "sha":
                chosen.append(codes["sha"])
            else:
                chosen.append(codes[f"{comp}_{tag}"])
        fused = fu.fuse(chosen, cfg.fusion, dm.fusion)
        return fu.tower_forward(fused, dm.user_tower)

    return ForwardPass(
        users=users,
        lam=lam,
        emb_items_a=emb_a.items,
        emb_items_b=emb_b.items,
        s_a=fused_user_rep("a", model.domain_a),
        s_b=fused_user_rep("b", model.domain_b),
        codes=codes,
        enc_results=enc_results,
        enc_inputs=enc_inputs,
    )


def score_pairs(
    fwd: ForwardPass,
    model: ModelState,
    domain: str,
    pair_users: np.ndarray,
    pair_items: np.ndarray,
) -> tuple[Value, Value, Value]:
    """Cosine scores for (user, item) pairs; returns (y_hat, s_rows, t_rows)."""
    dm = model.domain_a if domain == "a" else model.domain_b
    s_all = fwd.s_a if domain == "a" else fwd.s_b
    emb_items = fwd.emb_items_a if domain == "a" else fwd.emb_items_b
    positions = np.searchsorted(fwd.users, pair_users)
    if not np.array_equal(fwd.users[positions], pair_users):
        raise ad.ContractError("pair users missing from the forward pass")
    s_rows = ad.gather_rows(s_all, positions)
    t_rows = fu.tower_forward(ad.gather_rows(emb_items, pair_items), dm.item_tower)
    return fu.predict(s_rows, t_rows), s_rows, t_rows


def item_representations(fwd: ForwardPass, model: ModelState, domain: str) -> Value:
    dm = model.domain_a if domain == "a" else model.domain_b
    emb_items = fwd.emb_items_a if domain == "a" else fwd.emb_items_b
    return fu.tower_forward(emb_items, dm.item_tower)


def save_model(path: str, model: ModelState) -> None:
    from .config import config_lines
    from .data import atomic_bytes_write
    import io

    arrays = {name: value.data for name, value in model.params.items()}
    arrays["__config__"] = np.array(config_lines(model.config))
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    atomic_bytes_write(path, buffer.getvalue())


def load_model(
    path: str,
    adjacency_a: gr.NormalizedAdjacency,
    adjacency_b: gr.NormalizedAdjacency,
) -> ModelState:
    from .config import parse_config_text
    from .data import ArtifactError
    import os

    if not os.path.exists(path):
        raise ArtifactError(f"model file not found: {path}")
    try:
        archive = np.load(path)
    except Exception as exc:
        raise ArtifactError(f"unreadable model file {path}: {exc}") from exc
    if "__config__" not in archive:
        raise ArtifactError(f"model file {path} lacks a config record")
    config = parse_config_text("\n".join(archive["__config__"].tolist()))
    model = build_model(adjacency_a, adjacency_b, config)
    saved = set(archive.files) - {"__config__"}
    if saved != set(model.params):
        raise ArtifactError(f"model file {path} has a mismatched parameter census")
    for name, value in model.params.items():
        data = archive[name]
        if data.shape != value.data.shape:
            raise ArtifactError(
                f"parameter {name} shape {data.shape} != expected {value.data.shape}"
            )
        value.data = data.astype(np.float64)
    return model
