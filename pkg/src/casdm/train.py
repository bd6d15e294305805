"""Training loop, checkpoint lifecycle and resumption.

Randomness is split into independent streams derived from the configured
seeds: parameter init (one stream per network), data order, and the per-step
draws of t and noise. Nothing on phi's side consumes from a stream theta
uses, so theta's update sequence does not depend on phi's configuration.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from casdm import schedule as sch
from casdm.config import ExperimentConfig, dump_config, load_config
from casdm.data import BatchSampler, Dataset, load_folder, load_tensor_dataset, make_synthetic
from casdm.evaluate import proxy_fd
from casdm.losses import LossReport, training_objectives
from casdm.metricfn import FeatureExtractor, MetricTransform, load_extractor
from casdm.model import DiffusionModel, as_tensors
from casdm.netcore import autodiff
from casdm.netcore.optim import AdamState, adam_step, ema_update
from casdm.netcore.params import ParamStore, read_container, write_container
from casdm.sampler import SamplerConfig, model_predictor, sample

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "t", "l_eps", "l_x0", "l_mu", "l_lpips", "l_theta", "l_phi")
MODEL_FILE = "model.cdm"
OPTIM_FILE = "optim.cdm"
STATE_FILE = "state.json"
CONFIG_FILE = "config.yaml"


class CheckpointError(RuntimeError):
    pass


class ConfigMismatchError(CheckpointError):
    """Checkpoint was written under a different configuration."""


class NumericalError(ArithmeticError):
    pass


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    shape = (d.image_size, d.image_size, d.channels)
    if d.kind in ("synthetic_gaussian", "synthetic_patterns"):
        return make_synthetic(d.kind, d.n, shape, d.seed, mean=d.mean, std=d.std, jitter=d.jitter)
    ds = load_folder(d.path, d.channels, d.image_size) if d.kind == "folder" else load_tensor_dataset(d.path)
    if ds.shape != shape:
        raise ValueError(f"dataset images have shape {ds.shape}, config expects {shape}")
    return ds


def build_extractor(cfg: ExperimentConfig) -> FeatureExtractor:
    ext = load_extractor(cfg.metric.backbone, cfg.data.channels, cfg.metric.seed)
    ext.check_resolution(cfg.metric.resolution)
    return ext


def noise_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *b"noise"]))


@dataclass
class TrainState:
    step: int
    params: dict[str, ParamStore]
    optim: dict[str, AdamState]
    ema: dict[str, ParamStore] | None
    batches: BatchSampler
    noise: np.random.Generator


class Trainer:
    def __init__(self, cfg: ExperimentConfig, out_dir: str | Path, dataset: Dataset | None = None):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.sched = sch.make_schedule(cfg.schedule.kind, cfg.schedule.T)
        self.model = DiffusionModel(cfg.model, self.sched)
        self.dataset = dataset if dataset is not None else build_dataset(cfg)
        self.transform = MetricTransform(cfg.metric.resolution)
        self.extractor = build_extractor(cfg)
        params = self.model.init(cfg.train.seed)
        self.state = TrainState(
            step=0,
            params=params,
            optim={k: AdamState.for_params(p, lr=cfg.train.lr) for k, p in params.items()},
            ema={k: p.copy() for k, p in params.items()} if cfg.train.ema else None,
            batches=BatchSampler(len(self.dataset), cfg.train.batch_size, cfg.data.seed),
            noise=noise_rng(cfg.train.seed),
        )

    # -- one step ---------------------------------------------------------

    def train_step(self) -> LossReport:
        st = self.state
        T = self.sched.T
        x0 = self.dataset.images[st.batches.next_indices()]
        t = st.noise.integers(1, T + 1, size=len(x0))
        eps = st.noise.standard_normal(x0.shape, dtype=np.float32)
        x_t = sch.q_sample(x0, t, eps, self.sched)

        leaves = as_tensors(st.params, requires_grad=True)
        out = self.model.forward(leaves, x_t, t)
        objectives, report = training_objectives(
            self.model.variant, out, x0, x_t, eps, t, self.sched, self.cfg.loss, self.extractor, self.transform
        )
        values = [report.l_eps, report.l_x0, report.l_mu, report.l_lpips]
        if not np.all(np.isfinite(values)):
            raise NumericalError(f"non-finite loss at step {st.step + 1}: {report}")
        # one optimizer step per network, each from its own objective
        for name, loss in objectives.items():
            grads = autodiff.grad(loss, leaves[name])
            adam_step(st.params[name], grads, st.optim[name])
        if st.ema is not None:
            for name in st.params:
                ema_update(st.ema[name], st.params[name], self.cfg.train.ema_decay)
        st.step += 1
        return report

    # -- loop -------------------------------------------------------------

    def run(self, until: int | None = None) -> list[dict]:
        cfg = self.cfg.train
        until = cfg.steps if until is None else until
        self.out.mkdir(parents=True, exist_ok=True)
        dump_config(self.cfg, self.out / CONFIG_FILE)
        csv_path = self.out / "losses.csv"
        self._truncate_log(csv_path, self.state.step)
        rows: list[dict] = []
        if self.state.step == 0:
            self.save_checkpoint()
            self._maybe_eval()
        with open(csv_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            while self.state.step < until:
                rep = self.train_step()
                row = {"step": self.state.step, **rep.row()}
                writer.writerow([row[c] for c in LOSS_COLUMNS])
                rows.append(row)
                s = self.state.step
                if s % 100 == 0:
                    fh.flush()
                    log.info("step %d l_theta=%.4f l_phi=%.4f", s, rep.l_theta, rep.l_phi)
                if (cfg.ckpt_every and s % cfg.ckpt_every == 0) or s == until:
                    self.save_checkpoint()
                if cfg.eval_every and (s % cfg.eval_every == 0 or s == until):
                    self._maybe_eval()
        self._write_summary(csv_path)
        return rows

    def _truncate_log(self, csv_path: Path, step: int) -> None:
        """Keep the header and rows up to ``step`` so a resumed run rewrites what follows."""
        kept = []
        if csv_path.exists():
            with open(csv_path, newline="") as fh:
                for rec in csv.reader(fh):
                    if rec and rec[0] != "step" and int(rec[0]) <= step:
                        kept.append(rec)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOSS_COLUMNS)
            w.writerows(kept)

    def _maybe_eval(self) -> None:
        if not self.cfg.train.eval_every:
            return
        fd = self.proxy_fd(self.cfg.train.eval_samples)
        path = self.out / "eval.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["step", "proxy_fd"])
            w.writerow([self.state.step, fd])
        log.info("step %d proxy-FD %.4f", self.state.step, fd)

    def proxy_fd(self, n: int, use_ema: bool = False) -> float:
        gen = self.sample(n, use_ema=use_ema)
        return proxy_fd(self.dataset.images, gen, self.extractor, self.transform)

    def sample(self, n: int, use_ema: bool = False, cfg: SamplerConfig | None = None) -> np.ndarray:
        params = self.state.ema if use_ema and self.state.ema is not None else self.state.params
        shape = (self.cfg.data.image_size, self.cfg.data.image_size, self.cfg.data.channels)
        x, _ = sample(model_predictor(self.model, params), self.sched, cfg or self.cfg.sample, n, shape, batch_size=256)
        return x.astype(np.float32)

    def _write_summary(self, csv_path: Path) -> None:
        with open(csv_path, newline="") as fh:
            recs = [r for r in csv.DictReader(fh)]
        summary = {"step": self.state.step, "config_hash": self.cfg.hash(), "rows": len(recs)}
        if recs:
            leps = np.array([float(r["l_eps"]) for r in recs])
            summary["l_eps_first100"] = float(leps[:100].mean())
            summary["l_eps_last100"] = float(leps[-100:].mean())
            summary["final"] = {k: float(v) for k, v in recs[-1].items()}
        (self.out / "summary.json").write_text(json.dumps(summary, indent=2))

    # -- checkpoints ------------------------------------------------------

    def checkpoint_dir(self, step: int | None = None) -> Path:
        return self.out / "ckpt" / f"step_{self.state.step if step is None else step:07d}"

    def save_checkpoint(self) -> Path:
        st = self.state
        d = self.checkpoint_dir()
        d.mkdir(parents=True, exist_ok=True)
        arrays: dict[str, np.ndarray] = {}
        for name, p in st.params.items():
            arrays.update({f"{name}/{k}": v for k, v in p.items()})
        if st.ema is not None:
            for name, p in st.ema.items():
                arrays.update({f"ema/{name}/{k}": v for k, v in p.items()})
        write_container(d / MODEL_FILE, arrays)
        opt_arrays: dict[str, np.ndarray] = {}
        for name, o in st.optim.items():
            opt_arrays.update({f"{name}/{k}": v for k, v in o.arrays().items()})
        write_container(d / OPTIM_FILE, opt_arrays)
        meta = {
            "step": st.step,
            "config_hash": self.cfg.hash(),
            "optim": {name: {"step": o.step, "lr": o.lr} for name, o in st.optim.items()},
            "batches": st.batches.state(),
            "noise": st.noise.bit_generator.state,
        }
        (d / STATE_FILE).write_text(json.dumps(meta))
        dump_config(self.cfg, d / CONFIG_FILE)
        return d

    def load_checkpoint(self, ckpt: str | Path) -> None:
        ckpt = Path(ckpt)
        for f in (MODEL_FILE, OPTIM_FILE, STATE_FILE):
            if not (ckpt / f).exists():
                raise CheckpointError(f"checkpoint {ckpt} is missing {f}; refusing to resume")
        meta = json.loads((ckpt / STATE_FILE).read_text())
        if meta["config_hash"] != self.cfg.hash():
            raise ConfigMismatchError(
                f"config hash {self.cfg.hash()} does not match checkpoint {meta['config_hash']}; refusing to resume"
            )
        params, ema = load_model_arrays(ckpt / MODEL_FILE, self.model.net_names)
        _check_layout(params, self.state.params, ckpt)
        opt_arrays = read_container(ckpt / OPTIM_FILE)
        optim = {}
        for name in self.model.net_names:
            sub = {k[len(name) + 1 :]: v for k, v in opt_arrays.items() if k.startswith(name + "/")}
            o = meta["optim"][name]
            optim[name] = AdamState.from_arrays(sub, step=o["step"], lr=o["lr"])
        st = self.state
        st.step = int(meta["step"])
        st.params = params
        st.optim = optim
        if self.cfg.train.ema:
            if not ema:
                raise CheckpointError(f"config enables EMA but {ckpt} has no EMA weights")
            st.ema = ema
        st.batches.load_state(meta["batches"])
        st.noise.bit_generator.state = meta["noise"]

    @classmethod
    def resume(cls, ckpt: str | Path, out_dir: str | Path | None = None, cfg: ExperimentConfig | None = None) -> "Trainer":
        ckpt = Path(ckpt)
        if cfg is None:
            if not (ckpt / CONFIG_FILE).exists():
                raise CheckpointError(f"checkpoint {ckpt} has no {CONFIG_FILE}")
            cfg = load_config(ckpt / CONFIG_FILE)
        out = Path(out_dir) if out_dir is not None else ckpt.parent.parent
        tr = cls(cfg, out)
        tr.load_checkpoint(ckpt)
        return tr


def load_model_arrays(path: Path, names) -> tuple[dict[str, ParamStore], dict[str, ParamStore]]:
    arrays = read_container(path)
    params = {n: ParamStore() for n in names}
    ema = {}
    for k, v in arrays.items():
        head, _, rest = k.partition("/")
        if head == "ema":
            net, _, pname = rest.partition("/")
            ema.setdefault(net, ParamStore())[pname] = v
        elif head in params:
            params[head][rest] = v
        else:
            raise CheckpointError(f"{path}: unexpected parameter {k!r}")
    return params, ema


def _check_layout(loaded: dict[str, ParamStore], expected: dict[str, ParamStore], where) -> None:
    for name, exp in expected.items():
        got = loaded.get(name)
        if got is None or list(got.keys()) != list(exp.keys()):
            raise CheckpointError(f"{where}: parameters of {name!r} do not match the configured model")
        for k in exp:
            if got[k].shape != exp[k].shape:
                raise CheckpointError(f"{where}: {name}/{k} has shape {got[k].shape}, expected {exp[k].shape}")


def load_for_sampling(ckpt: str | Path, use_ema: bool = False):
    """(config, model, params) from a checkpoint directory."""
    ckpt = Path(ckpt)
    if not (ckpt / MODEL_FILE).exists() or not (ckpt / CONFIG_FILE).exists():
        raise CheckpointError(f"{ckpt} is not a checkpoint directory (needs {MODEL_FILE} and {CONFIG_FILE})")
    cfg = load_config(ckpt / CONFIG_FILE)
    meta = json.loads((ckpt / STATE_FILE).read_text()) if (ckpt / STATE_FILE).exists() else {}
    if meta and meta.get("config_hash") != cfg.hash():
        raise ConfigMismatchError(f"{ckpt}: stored config does not match the checkpoint's config hash")
    sched = sch.make_schedule(cfg.schedule.kind, cfg.schedule.T)
    model = DiffusionModel(cfg.model, sched)
    params, ema = load_model_arrays(ckpt / MODEL_FILE, model.net_names)
    _check_layout(params, model.init(0), ckpt)
    if use_ema:
        if not ema:
            raise CheckpointError(f"{ckpt} has no EMA weights")
        params = ema
    return cfg, model, params


def list_checkpoints(out_dir: str | Path) -> list[Path]:
    return sorted((Path(out_dir) / "ckpt").glob("step_*"))
