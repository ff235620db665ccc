"""Variant assembly: wiring bands, backbones, fusion, and classifier heads.

Four variants mirror the compared architectures:

    resnet     residual CNN on the raw image, plain linear head
    vit        transformer on the raw image, plain linear head
    dctvit     three learned-band reconstructions -> transformer features,
               softmax fusion over 3 branches, Bayesian linear head
    dctvitres  dctvit plus a parallel residual-CNN branch on the raw image,
               softmax fusion over 4 branches, Bayesian linear head

Branch order in the fusion is fixed: (low, mid, high[, resnet]).
"""

from __future__ import annotations

import numpy as np

from . import engine as E
from .backbones import MicroResNet, MicroResNetConfig, MicroViT, MicroViTConfig
from .bands import CutoffParams, band_decompose, compute_masks, frequency_index
from .bayes import BayesLinearParams, batch_logits, kl_loss, sample_weights
from .config import RunConfig
from .dct import plan_for
from .engine import Tensor
from .fusion import FusionParams, fuse
from .nn import Linear, Module
from .rng import Rng

BRANCH_NAMES = ("low", "mid", "high", "resnet")


class PipelineModel(Module):
    def __init__(self, cfg: RunConfig, rng: Rng):
        if cfg.num_classes < 1:
            raise ValueError("model construction needs num_classes >= 1 "
                             "(resolve it from the corpus first)")
        self.cfg = cfg
        self.variant = cfg.variant
        self.uses_bands = cfg.variant in ("dctvit", "dctvitres")
        self.uses_resnet = cfg.variant in ("resnet", "dctvitres")
        self.uses_vit = cfg.variant in ("vit", "dctvit", "dctvitres")
        self.bayes_head = cfg.variant in ("dctvit", "dctvitres")
        self.plan = plan_for(cfg.image_size, cfg.image_size)

        vit_cfg = MicroViTConfig(
            image_size=cfg.image_size, patch_size=cfg.patch_size,
            embed_dim=cfg.vit_embed_dim, layers=cfg.vit_layers,
            heads=cfg.vit_heads, mlp_ratio=cfg.vit_mlp_ratio,
            out_dim=cfg.feature_dim)
        resnet_cfg = MicroResNetConfig(
            channels=tuple(cfg.resnet_channels),
            blocks_per_stage=cfg.resnet_blocks_per_stage,
            out_dim=cfg.feature_dim)

        if self.uses_bands:
            self.cutoffs = CutoffParams(cfg.cutoff_init_c1, cfg.cutoff_init_c2,
                                        cfg.mask_sharpness, cfg.ordered_cutoffs)
            if cfg.shared_vit_backbone:
                self.vit = MicroViT(vit_cfg, rng.derive("vit"))
            else:
                self.vits = [MicroViT(vit_cfg, rng.derive(f"vit{i}")) for i in range(3)]
        elif self.uses_vit:
            self.vit = MicroViT(vit_cfg, rng.derive("vit"))
        if self.uses_resnet:
            self.resnet = MicroResNet(resnet_cfg, rng.derive("resnet"))

        if self.uses_bands:
            self.fusion = FusionParams(4 if self.uses_resnet else 3)
        if self.bayes_head:
            self.head = BayesLinearParams(cfg.feature_dim, cfg.num_classes,
                                          rng.derive("head"),
                                          prior_sigma=cfg.prior_sigma)
        else:
            self.head = Linear(cfg.feature_dim, cfg.num_classes, rng.derive("head"))

    # -- forward paths -------------------------------------------------------

    def _band_vit(self, index: int) -> MicroViT:
        if self.cfg.shared_vit_backbone:
            return self.vit
        return self.vits[index]

    def band_images(self, images: Tensor):
        """(low, mid, high) reconstructions of a (B, 3, S, S) batch."""
        return band_decompose(images, self.cutoffs, self.plan)

    def masks(self):
        f = frequency_index(self.plan.height, self.plan.width)
        return compute_masks(self.cutoffs, f)

    def features(self, images: Tensor) -> Tensor:
        """Fused (B, D) features of a (B, 3, S, S) image batch."""
        if not self.uses_bands:
            branch = self.resnet if self.uses_resnet else self.vit
            return branch(images)
        bands = self.band_images(images)
        feats = [self._band_vit(i)(band) for i, band in enumerate(bands)]
        if self.uses_resnet:
            feats.append(self.resnet(images))
        return fuse(feats, self.fusion)

    def draw_head_noise(self, rng: Rng):
        """Standard-normal noise for one posterior draw; None for plain heads."""
        if not self.bayes_head:
            return None
        w_shape, b_shape = self.head.noise_shapes()
        return rng.normals(w_shape), rng.normals(b_shape)

    def forward_train(self, images: Tensor, noise):
        """(logits, kl) with one sampled posterior draw for the whole batch."""
        feats = self.features(images)
        if not self.bayes_head:
            return self.head(feats), None
        w, b = sample_weights(self.head, noise[0], noise[1])
        return batch_logits(feats, w, b), kl_loss(self.head)

    def forward_eval(self, images: Tensor, mode: str | None = None,
                     rng: Rng | None = None, samples: int | None = None) -> Tensor:
        """Deterministic inference logits (call under engine.no_grad())."""
        feats = self.features(images)
        if not self.bayes_head:
            return self.head(feats)
        mode = mode or self.cfg.predictive_mode
        if mode == "mean":
            return batch_logits(feats, self.head.mu_w, self.head.mu_b)
        samples = samples or self.cfg.mc_samples
        acc = None
        for _ in range(samples):
            w, b = sample_weights(self.head, rng.normals(self.head.mu_w.shape),
                                  rng.normals(self.head.mu_b.shape))
            z = batch_logits(feats, w, b)
            acc = z if acc is None else E.add(acc, z)
        return E.div(acc, float(samples))

    # -- introspection for metrics/checkpoints ---------------------------------

    def cutoff_values(self):
        return self.cutoffs.cutoff_values() if self.uses_bands else None

    def fusion_values(self):
        if not self.uses_bands:
            return None
        alphas = self.fusion.coefficient_values()
        return alphas if len(alphas) == 4 else np.append(alphas, np.nan)

    def param_groups(self) -> dict[str, list[Tensor]]:
        """Differentiated-rate groups: backbones vs cutoffs/fusion/head."""
        backbone, head = [], []
        for name, p in self.named_parameters():
            root = name.split(".", 1)[0]
            (backbone if root in ("vit", "vits", "resnet") else head).append(p)
        return {"backbone": backbone, "head": head}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        """Strict by-name load; missing/unexpected names are hard errors."""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        if missing or extra:
            raise KeyError(f"checkpoint does not match model: "
                           f"missing {missing or 'none'}, unexpected {extra or 'none'}")
        for name, p in own.items():
            arr = tensors[name]
            if tuple(arr.shape) != p.shape:
                raise KeyError(f"checkpoint tensor {name} has shape {tuple(arr.shape)}, "
                               f"model expects {p.shape}")
            p.data[...] = arr


def build_model(cfg: RunConfig, rng: Rng | None = None) -> PipelineModel:
    return PipelineModel(cfg, rng if rng is not None else Rng(cfg.seed))
