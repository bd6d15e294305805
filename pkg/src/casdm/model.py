"""The cascaded noise/image model and the single-network baselines.

Variants:

``ddpm_eps``  one network predicting the noise.
``ddpm_x0``   one network predicting the clean image.
``dual``      one network with 2C+1 outputs: noise, clean image and mixing weight.
``casdm``     theta predicts the noise; the implied clean image is detached and
              refined by a second network phi, which also emits the mixing weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from casdm import schedule as sch
from casdm.netcore import ad
from casdm.netcore.autodiff import Tensor
from casdm.netcore.params import ParamStore
from casdm.networks import NetworkSpec, UNet


class Variant(str, Enum):
    DDPM_EPS = "ddpm_eps"
    DDPM_X0 = "ddpm_x0"
    DUAL = "dual"
    CASDM = "casdm"


PHI_ARCHS = ("unet_lite", "fixres_cnn")
PHI_INPUTS = ("x0_star_only", "concat_x0star_eps")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "casdm"
    phi_arch: str = "unet_lite"
    phi_input: str = "x0_star_only"
    channels: int = 32
    blocks: int = 2
    levels: int = 2
    attention: tuple[bool, ...] = ()
    image_size: int = 8
    image_channels: int = 1

    def __post_init__(self):
        try:
            Variant(self.variant)
        except ValueError:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {[v.value for v in Variant]}") from None
        if self.phi_arch not in PHI_ARCHS:
            raise ValueError(f"unknown phi_arch {self.phi_arch!r}; expected one of {PHI_ARCHS}")
        if self.phi_input not in PHI_INPUTS:
            raise ValueError(f"unknown phi_input {self.phi_input!r}; expected one of {PHI_INPUTS}")
        object.__setattr__(self, "attention", tuple(bool(a) for a in self.attention))


@dataclass
class CasDmOutput:
    """One forward pass. Fields a variant does not produce are ``None``.

    ``x0_star`` is always a detached value (no path back into theta).
    """

    eps_pred: Tensor | None = None
    x0_star: Tensor | None = None
    x0_pred: Tensor | None = None
    r: Tensor | None = None


class DiffusionModel:
    def __init__(self, cfg: ModelConfig, sched: sch.NoiseSchedule):
        self.cfg = cfg
        self.sched = sched
        self.variant = Variant(cfg.variant)
        c = cfg.image_channels
        common = dict(
            base_channels=cfg.channels, blocks=cfg.blocks, levels=cfg.levels, attention=cfg.attention
        )
        theta_out = {Variant.DUAL: 2 * c + 1}.get(self.variant, c)
        self.nets: dict[str, UNet] = {
            "theta": UNet(NetworkSpec(in_channels=c, out_channels=theta_out, **common))
        }
        if self.variant is Variant.CASDM:
            phi_in = 2 * c if cfg.phi_input == "concat_x0star_eps" else c
            self.nets["phi"] = UNet(
                NetworkSpec(
                    in_channels=phi_in,
                    out_channels=c + 1,
                    fixed_resolution=cfg.phi_arch == "fixres_cnn",
                    zero_out=True,
                    **common,
                )
            )

    @property
    def net_names(self) -> tuple[str, ...]:
        return tuple(self.nets)

    def init(self, seed: int) -> dict[str, ParamStore]:
        """Parameters for each network, each drawn from its own seed stream.

        The stream for a network depends only on (seed, network name), so
        theta is initialised identically whatever phi looks like.
        """
        out = {}
        for name, net in self.nets.items():
            rng = np.random.default_rng(_name_seed(seed, name))
            store = net.init(rng)
            store.seed = seed
            out[name] = store
        return out

    # -- forward passes --------------------------------------------------

    def forward_theta(self, p: Mapping[str, Tensor], x_t: Tensor, t) -> Tensor:
        self._check_input(x_t)
        return self.nets["theta"](p, x_t, t)

    def forward_phi(self, p: Mapping[str, Tensor], phi_input: Tensor, t) -> tuple[Tensor, Tensor]:
        c = self.cfg.image_channels
        out = self.nets["phi"](p, phi_input, t)
        return out[..., :c], ad.sigmoid(out[..., c:])

    def forward_cascade(self, params: Mapping[str, Mapping[str, Tensor]], x_t: Tensor, t) -> CasDmOutput:
        eps = self.forward_theta(params["theta"], x_t, t)
        # the whole of theta is cut off from phi's graph here
        x0_star = ad.constant(sch.x0_from_eps(x_t.data, eps.data, t, self.sched))
        phi_in = x0_star
        if self.cfg.phi_input == "concat_x0star_eps":
            phi_in = ad.concat([x0_star, ad.stop_gradient(eps)], axis=-1)
        x0_pred, r = self.forward_phi(params["phi"], phi_in, t)
        return CasDmOutput(eps_pred=eps, x0_star=x0_star, x0_pred=x0_pred, r=r)

    def forward(self, params: Mapping[str, Mapping[str, Tensor]], x_t, t) -> CasDmOutput:
        if not isinstance(x_t, Tensor):
            x_t = ad.constant(np.asarray(x_t, dtype=np.float32))
        v = self.variant
        if v is Variant.CASDM:
            return self.forward_cascade(params, x_t, t)
        out = self.forward_theta(params["theta"], x_t, t)
        if v is Variant.DDPM_EPS:
            x0_star = ad.constant(sch.x0_from_eps(x_t.data, out.data, t, self.sched))
            return CasDmOutput(eps_pred=out, x0_star=x0_star)
        if v is Variant.DDPM_X0:
            return CasDmOutput(x0_pred=out)
        c = self.cfg.image_channels
        eps = out[..., :c]
        x0_star = ad.constant(sch.x0_from_eps(x_t.data, eps.data, t, self.sched))
        return CasDmOutput(eps_pred=eps, x0_star=x0_star, x0_pred=out[..., c : 2 * c], r=ad.sigmoid(out[..., 2 * c :]))

    def _check_input(self, x_t: Tensor) -> None:
        s, c = self.cfg.image_size, self.cfg.image_channels
        if x_t.ndim != 4 or x_t.shape[1:] != (s, s, c):
            raise ValueError(f"model expects images of shape (N, {s}, {s}, {c}), got {x_t.shape}")


def forward_variant(model: DiffusionModel, params, x_t, t) -> CasDmOutput:
    return model.forward(params, x_t, t)


def as_tensors(params: Mapping[str, ParamStore], requires_grad: bool = False) -> dict[str, dict[str, Tensor]]:
    return {name: store.tensors(requires_grad=requires_grad) for name, store in params.items()}


def _name_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *name.encode("utf-8")])
